#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "chopgrad/experiment.hpp"

namespace chopgrad::detail {

using nlohmann::json;

/// Reads known keys from one JSON object and rejects the rest.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const std::string& key) const { return j_.at(key); }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void get(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }
  void get_u64(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  void get(const std::string& key, int& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(where(key) + " must be an integer");
    out = v.get<int>();
  }
  void get(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
    out = v.get<double>();
  }
  void get(const std::string& key, bool& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(where(key) + " must be a boolean");
    out = v.get<bool>();
  }
  void get(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(where(key) + " must be a string");
    out = v.get<std::string>();
  }
  template <class T>
  void get_list(const std::string& key, std::vector<T>& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + " must be an array");
    out.clear();
    for (const json& e : v) {
      if constexpr (std::is_same_v<T, bool>) {
        if (!e.is_boolean()) throw ConfigError(where(key) + " entries must be booleans");
      } else {
        if (!e.is_number_unsigned()) throw ConfigError(where(key) + " entries must be non-negative integers");
      }
      out.push_back(e.get<T>());
    }
  }
  /// String field parsed by `parse`, whose errors become ConfigErrors.
  template <class T, class F>
  void get_enum(const std::string& key, T& out, F parse) {
    if (!has(key)) return;
    std::string s;
    get(key, s);
    try {
      out = parse(s);
    } catch (const Error& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + where(it.key()) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json to_json(const DecoderConfig& c);
DecoderConfig decoder_from_json(const json& j, const std::string& path);

}  // namespace chopgrad::detail
