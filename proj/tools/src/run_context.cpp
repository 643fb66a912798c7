#include "run_context.hpp"

#include <sstream>

#include "chopgrad/report.hpp"

namespace chopgrad::cli {

using nlohmann::json;

const char* revision() { return CHOPGRAD_REVISION; }

void RunContext::write_manifest(const json& results, bool passed) const {
  const SeedSet s = config.seeds();
  json overrides_json = json::array();
  for (const auto& [flag, text] : overrides.given) overrides_json.push_back({{"flag", flag}, {"value", text}});
  const json m{
      {"command", command},
      {"revision", revision()},
      {"schema_version", config.schema_version},
      {"config_file", config_path.empty() ? json(nullptr) : json(config_path.string())},
      {"config_hash", hex64(config_hash(config))},
      {"seeds",
       {{"base", config.seed},
        {"data", s.data},
        {"encoder", s.encoder},
        {"backbone", s.backbone},
        {"order", s.order},
        {"decoder_init", config.decoder.init_seed}}},
      {"threads", threads},
      {"overrides", overrides_json},
      {"config", json::parse(experiment_to_json(config))},
      {"passed", passed},
      {"results", results},
  };
  write_text(out_dir / "manifest.json", m.dump(2) + "\n");
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("'" + text + "' is not a comma-separated list of non-negative integers");
    }
    out.push_back(std::stoul(item));
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string& text) {
  const auto x = text.find_first_of("xX");
  const auto digits = [](const std::string& s) {
    return !s.empty() && s.find_first_not_of("0123456789") == std::string::npos;
  };
  if (x == std::string::npos || !digits(text.substr(0, x)) || !digits(text.substr(x + 1))) {
    throw ConfigError("--chunks expects RxC, got '" + text + "'");
  }
  const std::size_t r = std::stoul(text.substr(0, x)), c = std::stoul(text.substr(x + 1));
  if (r == 0 || c == 0) throw ConfigError("--chunks needs positive counts");
  return {r, c};
}

}  // namespace chopgrad::cli
