#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "recal/errors.hpp"
#include "recal/text.hpp"

namespace recal {

// Flat `[section]` / `key = value` config store (TOML subset: strings,
// numbers, booleans, `#` comments). Keys are addressed as "section.key".
class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse(const std::string& content, const std::string& origin = "config") {
    KvConfig cfg;
    std::string section;
    int lineno = 0;
    for (auto line : text::split(content, '\n')) {
      ++lineno;
      auto t = text::trim(line);
      if (t.empty() || t.front() == '#') continue;
      if (t.front() == '[') {
        if (t.back() != ']')
          throw ParseError(origin + ":" + std::to_string(lineno) + ": unterminated section header");
        section = std::string(text::trim(t.substr(1, t.size() - 2)));
        continue;
      }
      size_t eq = t.find('=');
      if (eq == std::string_view::npos)
        throw ParseError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      std::string key(text::trim(t.substr(0, eq)));
      std::string value(text::trim(t.substr(eq + 1)));
      if (key.empty())
        throw ParseError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
        value = value.substr(1, value.size() - 2);
      cfg.values_[section.empty() ? key : section + "." + key] = value;
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : text::parse_double(it->second, key);
  }

  long long get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : text::parse_int(it->second, key);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw ConfigError("expected true/false for " + key + ", got '" + it->second + "'");
  }

  void set_string(const std::string& key, const std::string& value) { values_[key] = value; }
  void set_double(const std::string& key, double value) { values_[key] = text::format_double(value); }
  void set_int(const std::string& key, long long value) { values_[key] = std::to_string(value); }
  void set_bool(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

  // Emit grouped by section, keys sorted, so output is deterministic.
  std::string serialize() const {
    std::string out;
    std::string current_section;
    bool first = true;
    for (const auto& [full_key, value] : values_) {
      size_t dot = full_key.rfind('.');
      std::string section = dot == std::string::npos ? "" : full_key.substr(0, dot);
      std::string key = dot == std::string::npos ? full_key : full_key.substr(dot + 1);
      if (section != current_section || first) {
        if (!first) out += '\n';
        if (!section.empty()) out += "[" + section + "]\n";
        current_section = section;
        first = false;
      }
      out += key + " = " + quote_if_needed(value) + "\n";
    }
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  static bool looks_like_scalar(const std::string& v) {
    if (v == "true" || v == "false") return true;
    if (v.empty()) return false;
    char* end = nullptr;
    std::strtod(v.c_str(), &end);
    return end == v.c_str() + v.size();
  }

  static std::string quote_if_needed(const std::string& v) {
    return looks_like_scalar(v) ? v : "\"" + v + "\"";
  }

  std::map<std::string, std::string> values_;
};

}  // namespace recal
