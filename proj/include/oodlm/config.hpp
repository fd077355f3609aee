#pragma once

// Flat key=value run configuration.  Dotted keys group related settings
// (model.*, train.*, synth.*, ...).  '#' starts a comment, blank lines are
// skipped, later assignments win, and command-line overrides land on top
// of the file.  canonical() renders the sorted key=value text that run
// manifests hash.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oodlm/common.hpp"

namespace oodlm {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig from_string(const std::string& content,
                                    const std::string& origin = "<string>") {
    KeyValueConfig cfg;
    std::istringstream in(content);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string stripped = detail::trim(line);
      if (stripped.empty() || stripped[0] == '#') continue;
      const auto eq = stripped.find('=');
      if (eq == std::string::npos)
        throw ParseError(origin + ":" + std::to_string(line_no) +
                         ": expected key=value, got '" + stripped + "'");
      const std::string key = detail::trim(stripped.substr(0, eq));
      const std::string value = detail::trim(stripped.substr(eq + 1));
      if (key.empty())
        throw ParseError(origin + ":" + std::to_string(line_no) +
                         ": empty key");
      cfg.kv_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_string(buf.str(), path);
  }

  void set(const std::string& key, const std::string& value) {
    if (detail::trim(key).empty())
      throw UsageError("config override has empty key");
    kv_[detail::trim(key)] = detail::trim(value);
  }

  // Accepts "key=value" (the --set flag's argument form).
  void set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
      throw UsageError("config override must look like key=value, got '" +
                       assignment + "'");
    set(assignment.substr(0, eq), assignment.substr(eq + 1));
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_str(const std::string& key,
                      const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  std::string require_str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end())
      throw ConfigError("missing required config key '" + key + "'");
    return it->second;
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    return parse_int(key, it->second);
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      // stoull would wrap a negative value instead of failing.
      if (detail::trim(it->second).find('-') != std::string::npos)
        throw std::invalid_argument("negative");
      std::size_t used = 0;
      const std::uint64_t v = std::stoull(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key +
                        "' must be a non-negative integer, got '" +
                        it->second + "'");
    }
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' must be a number, got '" +
                        it->second + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "' must be a boolean "
                      "(true/false/1/0/yes/no), got '" + v + "'");
  }

  // Comma-separated integer list, e.g. "2,3,4".
  std::vector<int> get_int_list(const std::string& key,
                                std::vector<int> fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::vector<int> out;
    std::string item;
    std::istringstream in(it->second);
    while (std::getline(in, item, ','))
      out.push_back(static_cast<int>(parse_int(key, detail::trim(item))));
    if (out.empty())
      throw ConfigError("config key '" + key + "' must list at least one "
                        "integer");
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

  // Every key must either be in `known` or match a prefix in
  // `known_prefixes` (for open families like synth.mix.*).
  void require_known(const std::set<std::string>& known,
                     const std::vector<std::string>& known_prefixes) const {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : kv_) {
      if (known.count(k)) continue;
      bool matched = false;
      for (const auto& p : known_prefixes)
        if (k.rfind(p, 0) == 0 && k.size() > p.size()) matched = true;
      if (!matched) unknown.push_back(k);
    }
    if (!unknown.empty()) {
      std::string msg = "unknown config key(s):";
      for (const auto& k : unknown) msg += " '" + k + "'";
      throw ConfigError(msg);
    }
  }

  // Sorted "key=value" lines; the text whose SHA-256 identifies a run's
  // configuration (std::map already iterates in key order).
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : kv_) {
      out += k;
      out += '=';
      out += v;
      out += '\n';
    }
    return out;
  }

 private:
  static std::int64_t parse_int(const std::string& key,
                                const std::string& value) {
    try {
      std::size_t used = 0;
      const std::int64_t v = std::stoll(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' must be an integer, got '" +
                        value + "'");
    }
  }

  std::map<std::string, std::string> kv_;
};

}  // namespace oodlm
