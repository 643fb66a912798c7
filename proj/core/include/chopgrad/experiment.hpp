#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "chopgrad/decoder.hpp"
#include "chopgrad/locality.hpp"
#include "chopgrad/loss.hpp"
#include "chopgrad/scheduler.hpp"
#include "chopgrad/training.hpp"

namespace chopgrad {

inline constexpr int kSchemaVersion = 1;

/// Malformed or invalid experiment document.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Sizes for the analysis commands.
struct AnalysisConfig {
  std::size_t groups = 5;          // latent groups per analysed video
  std::size_t gradcheck_seeds = 3;
  std::size_t dataset_size = 8;    // videos averaged by param-compare
  std::vector<std::size_t> d_list{0, 1, 2, 3, 4};
  std::vector<std::size_t> t_list{8, 16, 32};
  std::size_t full_reference_max_groups = 64;
  LatentBlock probe_block{2, 2, 2, 2};
  std::size_t backbone_hidden = 16;
};

/// Seeds of every random stream, derived from one base seed.
struct SeedSet {
  std::uint64_t data = 0;
  std::uint64_t encoder = 0;
  std::uint64_t backbone = 0;
  std::uint64_t order = 0;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  DecoderConfig decoder;
  TruncationPolicy policy;
  LossSpec loss;
  ToyTask task;
  DecoderFitConfig decoder_fit;
  TrainConfig train;  // policy and pixel loss come from the fields above
  AnalysisConfig analysis;
  std::string output_dir;

  SeedSet seeds() const;
  /// Throws ConfigError naming the first invalid field.
  void validate() const;
};

/// Missing keys keep their defaults; unknown keys and a wrong schema version
/// are errors.
ExperimentConfig parse_experiment(const std::string& json_text);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Canonical JSON (sorted keys, two-space indent, trailing newline).
std::string experiment_to_json(const ExperimentConfig& config);

/// FNV-1a 64 over the canonical JSON.
std::uint64_t config_hash(const ExperimentConfig& config);
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace chopgrad
