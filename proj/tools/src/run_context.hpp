#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "chopgrad/experiment.hpp"

namespace chopgrad::cli {

/// Exit codes shared by every command.
enum Exit : int { kOk = 0, kCheckFailed = 1, kUsage = 2 };

/// Command-line values that supersede the config file, kept verbatim.
struct Overrides {
  std::vector<std::pair<std::string, std::string>> given;  // flag, text

  void add(std::string flag, std::string text) { given.emplace_back(std::move(flag), std::move(text)); }
};

struct RunContext {
  std::string command;
  std::filesystem::path config_path;  // empty: built-in defaults
  ExperimentConfig config;            // overrides applied
  Overrides overrides;
  std::filesystem::path out_dir;      // <root>/<command>
  std::size_t threads = 1;

  /// Writes manifest.json: revision, config hash, seeds, overrides and the
  /// resolved config, plus command-specific fields.
  void write_manifest(const nlohmann::json& results, bool passed) const;
};

std::vector<std::size_t> parse_size_list(const std::string& text);
std::pair<std::size_t, std::size_t> parse_grid(const std::string& text);

const char* revision();

}  // namespace chopgrad::cli
