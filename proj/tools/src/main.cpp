#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>

#include "chopgrad/ops.hpp"
#include "commands.hpp"

namespace {

using namespace chopgrad;
using namespace chopgrad::cli;

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::optional<std::size_t> dtrunc;
  std::optional<std::string> mode;
  std::optional<std::size_t> stride;
  std::optional<std::string> d_list;
  std::optional<std::string> t_list;
  std::optional<std::string> chunks;
  std::optional<std::string> fault;
};

/// Applies the given flags on top of the loaded config and records each one
/// as typed on the command line.
RunContext resolve(const std::string& command, const Flags& f) {
  RunContext ctx;
  ctx.command = command;
  if (!f.config.empty()) {
    ctx.config_path = f.config;
    ctx.config = load_experiment(f.config);
  }
  ExperimentConfig& c = ctx.config;
  if (f.seed) {
    c.seed = *f.seed;
    ctx.overrides.add("--seed", std::to_string(*f.seed));
  }
  if (f.dtrunc) {
    c.policy.d_trunc = *f.dtrunc;
    ctx.overrides.add("--dtrunc", std::to_string(*f.dtrunc));
  }
  if (f.mode) {
    try {
      c.policy.mode = eviction_mode_from_string(*f.mode);
    } catch (const Error& e) {
      throw ConfigError(std::string("--mode: ") + e.what());
    }
    ctx.overrides.add("--mode", *f.mode);
  }
  if (f.stride) {
    c.policy.stride = *f.stride;
    ctx.overrides.add("--stride", std::to_string(*f.stride));
  }
  if (f.d_list) {
    c.analysis.d_list = parse_size_list(*f.d_list);
    ctx.overrides.add("--d-list", *f.d_list);
  }
  if (f.t_list) {
    c.analysis.t_list = parse_size_list(*f.t_list);
    ctx.overrides.add("--t-list", *f.t_list);
  }
  if (f.chunks) {
    std::tie(c.policy.chunk_rows, c.policy.chunk_cols) = parse_grid(*f.chunks);
    ctx.overrides.add("--chunks", *f.chunks);
  }
  if (f.threads == 0) throw ConfigError("--threads must be positive");
  ctx.threads = f.threads;
  if (f.threads != 1) ctx.overrides.add("--threads", std::to_string(f.threads));
  if (f.fault) ctx.overrides.add("--inject-fault", *f.fault);
  c.validate();

  std::filesystem::path root;
  if (!f.out.empty()) {
    root = f.out;
    ctx.overrides.add("--out", f.out);
  } else if (!c.output_dir.empty()) {
    root = c.output_dir;
  } else if (const char* env = std::getenv("CHOPGRAD_OUT"); env && *env) {
    root = env;
  } else {
    root = "chopgrad_out";
  }
  ctx.out_dir = root / command;
  std::filesystem::create_directories(ctx.out_dir);
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Truncated backpropagation through a causal video decoder: checks, analyses and toy training."};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "Experiment JSON file (built-in defaults when omitted)");
  app.add_option("--out", f.out, "Output root (default: config output_dir, then $CHOPGRAD_OUT, then ./chopgrad_out)");
  app.add_option("--seed", f.seed, "Base seed for data, encoder, backbone and sample order");
  app.add_option("--threads", f.threads, "Worker cap for Jacobian rows and dataset items (1 = reference mode)");
  app.add_option("--dtrunc", f.dtrunc, "Truncation distance in frame groups");
  app.add_option("--mode", f.mode, "Eviction schedule: eager or deferred");
  app.add_option("--stride", f.stride, "Groups released per deferred eviction");
  app.add_option("--d-list", f.d_list, "Comma-separated truncation distances to sweep");
  app.add_option("--t-list", f.t_list, "Comma-separated group counts to sweep");
  app.add_option("--chunks", f.chunks, "Spatial chunk grid RxC");
  app.add_option("--inject-fault", f.fault, "Scale one op's adjoint (negative control)")->group("");

  const std::map<std::string, std::pair<std::string, std::function<int(const RunContext&)>>> commands{
      {"gradcheck", {"Finite-difference and full-depth oracle checks", cmd_gradcheck}},
      {"locality", {"Temporal influence table and decay fits", cmd_locality}},
      {"grad-error", {"Latent gradient error and its bound per truncation distance", cmd_grad_error}},
      {"param-compare", {"Dataset-averaged parameter gradients vs full backprop", cmd_param_compare}},
      {"profile", {"Memory, time and step counters over D and T", cmd_profile}},
      {"spatial-probe", {"Decode change outside the receptive field of a zeroed block", cmd_spatial_probe}},
      {"train-toy", {"Latent-only vs pixel-loss training on synthetic videos", cmd_train_toy}},
  };
  for (const auto& [name, entry] : commands) app.add_subcommand(name, entry.first);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (f.fault) {
      const auto kind = op_from_name(*f.fault);
      if (!kind) throw ConfigError("--inject-fault: unknown op '" + *f.fault + "'");
      testing_hooks::inject_adjoint_fault(*kind);
    }
    const RunContext ctx = resolve(name, f);
    return commands.at(name).second(ctx);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}
