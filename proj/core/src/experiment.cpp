#include "chopgrad/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json_convert.hpp"

namespace chopgrad {

namespace detail {

json to_json(const DecoderConfig& c) {
  std::vector<bool> up(c.upsample.begin(), c.upsample.end());
  return json{{"num_layers", c.num_layers},         {"channel_widths", c.channel_widths},
              {"cache_length", c.cache_length},     {"group_size", c.group_size},
              {"upsample", up},                     {"spatial_kernels", c.spatial_kernels},
              {"activation", to_string(c.activation)}, {"leaky_slope", c.leaky_slope},
              {"pixel_channels", c.pixel_channels}, {"latent_height", c.latent_height},
              {"latent_width", c.latent_width},     {"latent_time", c.latent_time},
              {"init_seed", c.init_seed},           {"init_gain", c.init_gain}};
}

DecoderConfig decoder_from_json(const json& j, const std::string& path) {
  DecoderConfig c;
  ObjectReader r(j, path);
  r.get("num_layers", c.num_layers);
  r.get_list("channel_widths", c.channel_widths);
  r.get("cache_length", c.cache_length);
  r.get("group_size", c.group_size);
  r.get_list("upsample", c.upsample);
  r.get_list("spatial_kernels", c.spatial_kernels);
  r.get_enum("activation", c.activation, activation_from_string);
  r.get("leaky_slope", c.leaky_slope);
  r.get("pixel_channels", c.pixel_channels);
  r.get("latent_height", c.latent_height);
  r.get("latent_width", c.latent_width);
  r.get("latent_time", c.latent_time);
  r.get_u64("init_seed", c.init_seed);
  r.get("init_gain", c.init_gain);
  r.finish();
  return c;
}

}  // namespace detail

using detail::json;
using detail::ObjectReader;

SeedSet ExperimentConfig::seeds() const { return {seed, seed + 1, seed + 2, seed + 3}; }

void ExperimentConfig::validate() const {
  if (schema_version != kSchemaVersion) {
    throw ConfigError("schema_version " + std::to_string(schema_version) + " is not supported (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  try {
    decoder.validate();
    policy.validate();
    loss.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (task.frames == 0 || task.frames % decoder.frames_per_group() != 0) {
    throw ConfigError("task.frames must be a positive multiple of " + std::to_string(decoder.frames_per_group()));
  }
  const std::size_t s = decoder.output_scale();
  if (task.height != decoder.latent_height * s || task.width != decoder.latent_width * s) {
    throw ConfigError("task.height/width must equal the decoded frame size " +
                      std::to_string(decoder.latent_height * s) + "x" + std::to_string(decoder.latent_width * s));
  }
  if (task.strength < 0.0) throw ConfigError("task.strength must be non-negative");
  if (task.train_size == 0) throw ConfigError("task.train_size must be positive");
  if (decoder_fit.learning_rate <= 0.0) throw ConfigError("decoder_fit.learning_rate must be positive");
  if (decoder_fit.momentum < 0.0 || decoder_fit.momentum >= 1.0) {
    throw ConfigError("decoder_fit.momentum must lie in [0, 1)");
  }
  if (train.steps == 0) throw ConfigError("train.steps must be positive");
  if (train.learning_rate <= 0.0) throw ConfigError("train.learning_rate must be positive");
  if (train.momentum < 0.0 || train.momentum >= 1.0) throw ConfigError("train.momentum must lie in [0, 1)");
  if (train.pixel_weight < 0.0 || train.latent_weight < 0.0) throw ConfigError("train weights must be non-negative");
  if (analysis.groups == 0) throw ConfigError("analysis.groups must be positive");
  if (analysis.gradcheck_seeds == 0) throw ConfigError("analysis.gradcheck_seeds must be positive");
  if (analysis.dataset_size == 0) throw ConfigError("analysis.dataset_size must be positive");
  if (analysis.d_list.empty()) throw ConfigError("analysis.d_list must not be empty");
  if (analysis.t_list.empty()) throw ConfigError("analysis.t_list must not be empty");
  for (std::size_t t : analysis.t_list) {
    if (t == 0) throw ConfigError("analysis.t_list entries must be positive");
  }
  if (analysis.backbone_hidden == 0) throw ConfigError("analysis.backbone_hidden must be positive");
}

ExperimentConfig parse_experiment(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  ObjectReader root(j, "");
  if (!root.has("schema_version")) throw ConfigError("missing schema_version");
  root.get("schema_version", c.schema_version);
  if (c.schema_version != kSchemaVersion) {
    throw ConfigError("schema_version " + std::to_string(c.schema_version) + " is not supported (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  root.get_u64("seed", c.seed);
  root.get("output_dir", c.output_dir);
  if (root.has("decoder")) c.decoder = detail::decoder_from_json(root.at("decoder"), "decoder");
  if (root.has("policy")) {
    ObjectReader r(root.at("policy"), "policy");
    r.get("d_trunc", c.policy.d_trunc);
    r.get_enum("mode", c.policy.mode, eviction_mode_from_string);
    r.get("stride", c.policy.stride);
    r.get("chunk_rows", c.policy.chunk_rows);
    r.get("chunk_cols", c.policy.chunk_cols);
    r.get_enum("halo", c.policy.halo, halo_mode_from_string);
    r.finish();
  }
  if (root.has("loss")) {
    ObjectReader r(root.at("loss"), "loss");
    r.get_enum("pixel", c.loss.pixel, pixel_loss_from_string);
    r.get("pixel_weight", c.loss.pixel_weight);
    r.get("latent_weight", c.loss.latent_weight);
    r.finish();
  }
  if (root.has("task")) {
    ObjectReader r(root.at("task"), "task");
    r.get_enum("kind", c.task.kind, task_kind_from_string);
    r.get("frames", c.task.frames);
    r.get("height", c.task.height);
    r.get("width", c.task.width);
    r.get("shapes", c.task.shapes);
    r.get("strength", c.task.strength);
    r.get("train_size", c.task.train_size);
    r.get("val_size", c.task.val_size);
    r.finish();
  }
  if (root.has("decoder_fit")) {
    ObjectReader r(root.at("decoder_fit"), "decoder_fit");
    r.get("steps", c.decoder_fit.steps);
    r.get("learning_rate", c.decoder_fit.learning_rate);
    r.get("momentum", c.decoder_fit.momentum);
    r.finish();
  }
  if (root.has("train")) {
    ObjectReader r(root.at("train"), "train");
    r.get("steps", c.train.steps);
    r.get("learning_rate", c.train.learning_rate);
    r.get("momentum", c.train.momentum);
    r.get("latent_weight", c.train.latent_weight);
    r.get("pixel_weight", c.train.pixel_weight);
    r.get("scale_match", c.train.scale_match);
    r.get("full_backprop", c.train.full_backprop);
    r.get("train_decoder", c.train.train_decoder);
    r.finish();
  }
  if (root.has("analysis")) {
    ObjectReader r(root.at("analysis"), "analysis");
    r.get("groups", c.analysis.groups);
    r.get("gradcheck_seeds", c.analysis.gradcheck_seeds);
    r.get("dataset_size", c.analysis.dataset_size);
    r.get_list("d_list", c.analysis.d_list);
    r.get_list("t_list", c.analysis.t_list);
    r.get("full_reference_max_groups", c.analysis.full_reference_max_groups);
    r.get("backbone_hidden", c.analysis.backbone_hidden);
    if (r.has("probe_block")) {
      ObjectReader b(r.at("probe_block"), "analysis.probe_block");
      b.get("h0", c.analysis.probe_block.h0);
      b.get("w0", c.analysis.probe_block.w0);
      b.get("height", c.analysis.probe_block.height);
      b.get("width", c.analysis.probe_block.width);
      b.finish();
    }
    r.finish();
  }
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_experiment(ss.str());
}

std::string experiment_to_json(const ExperimentConfig& c) {
  const LatentBlock& b = c.analysis.probe_block;
  const json j{
      {"schema_version", c.schema_version},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"decoder", detail::to_json(c.decoder)},
      {"policy",
       {{"d_trunc", c.policy.d_trunc},
        {"mode", to_string(c.policy.mode)},
        {"stride", c.policy.stride},
        {"chunk_rows", c.policy.chunk_rows},
        {"chunk_cols", c.policy.chunk_cols},
        {"halo", to_string(c.policy.halo)}}},
      {"loss",
       {{"pixel", to_string(c.loss.pixel)},
        {"pixel_weight", c.loss.pixel_weight},
        {"latent_weight", c.loss.latent_weight}}},
      {"task",
       {{"kind", to_string(c.task.kind)},
        {"frames", c.task.frames},
        {"height", c.task.height},
        {"width", c.task.width},
        {"shapes", c.task.shapes},
        {"strength", c.task.strength},
        {"train_size", c.task.train_size},
        {"val_size", c.task.val_size}}},
      {"decoder_fit",
       {{"steps", c.decoder_fit.steps},
        {"learning_rate", c.decoder_fit.learning_rate},
        {"momentum", c.decoder_fit.momentum}}},
      {"train",
       {{"steps", c.train.steps},
        {"learning_rate", c.train.learning_rate},
        {"momentum", c.train.momentum},
        {"latent_weight", c.train.latent_weight},
        {"pixel_weight", c.train.pixel_weight},
        {"scale_match", c.train.scale_match},
        {"full_backprop", c.train.full_backprop},
        {"train_decoder", c.train.train_decoder}}},
      {"analysis",
       {{"groups", c.analysis.groups},
        {"gradcheck_seeds", c.analysis.gradcheck_seeds},
        {"dataset_size", c.analysis.dataset_size},
        {"d_list", c.analysis.d_list},
        {"t_list", c.analysis.t_list},
        {"full_reference_max_groups", c.analysis.full_reference_max_groups},
        {"backbone_hidden", c.analysis.backbone_hidden},
        {"probe_block", {{"h0", b.h0}, {"w0", b.w0}, {"height", b.height}, {"width", b.width}}}}},
  };
  return j.dump(2) + "\n";
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t config_hash(const ExperimentConfig& config) { return fnv1a64(experiment_to_json(config)); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace chopgrad
