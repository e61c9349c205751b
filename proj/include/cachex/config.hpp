#pragma once

// Sectioned key-value files:
//
//   # comment
//   [section]
//   key = 12
//   name = "text"
//   list = [1, 2, 3]
//
// Errors carry the offending line number.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cachex/common.hpp"

namespace cachex {

struct ConfigValue {
  std::string text;
  bool quoted = false;
  std::vector<std::string> list;
  bool is_list = false;
  int line = 0;
};

struct ConfigSection {
  std::string name;
  int line = 0;
  std::map<std::string, ConfigValue> values;

  bool has(const std::string& k) const { return values.count(k) != 0; }

  const ConfigValue& at(const std::string& k) const {
    auto it = values.find(k);
    if (it == values.end()) throw Error(Errc::validation, "[" + name + "] missing key '" + k + "'");
    return it->second;
  }

  std::string str(const std::string& k) const {
    const auto& v = at(k);
    if (v.is_list) throw Error(Errc::parse, where(v) + "'" + k + "' must be a scalar");
    return v.text;
  }
  std::string str(const std::string& k, const std::string& def) const { return has(k) ? str(k) : def; }

  double num(const std::string& k) const { return to_double(at(k), k); }
  double num(const std::string& k, double def) const { return has(k) ? num(k) : def; }

  std::uint64_t uint(const std::string& k) const { return to_uint(at(k), k); }
  std::uint64_t uint(const std::string& k, std::uint64_t def) const { return has(k) ? uint(k) : def; }

  bool flag(const std::string& k, bool def) const {
    if (!has(k)) return def;
    const auto s = str(k);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw Error(Errc::parse, where(at(k)) + "'" + k + "' must be true or false");
  }

  std::vector<double> nums(const std::string& k) const {
    const auto& v = at(k);
    std::vector<double> out;
    if (!v.is_list) return {to_double(v, k)};
    for (const auto& s : v.list) out.push_back(to_double(ConfigValue{s, false, {}, false, v.line}, k));
    return out;
  }
  std::vector<double> nums(const std::string& k, std::vector<double> def) const { return has(k) ? nums(k) : def; }

  std::vector<std::uint64_t> uints(const std::string& k) const {
    const auto& v = at(k);
    if (!v.is_list) return {to_uint(v, k)};
    std::vector<std::uint64_t> out;
    for (const auto& s : v.list) out.push_back(to_uint(ConfigValue{s, false, {}, false, v.line}, k));
    return out;
  }
  std::vector<std::uint64_t> uints(const std::string& k, std::vector<std::uint64_t> def) const {
    return has(k) ? uints(k) : def;
  }

  std::vector<std::string> strs(const std::string& k) const {
    const auto& v = at(k);
    return v.is_list ? v.list : std::vector<std::string>{v.text};
  }

  static std::string where(const ConfigValue& v) { return "line " + std::to_string(v.line) + ": "; }

 private:
  static double to_double(const ConfigValue& v, const std::string& k) {
    if (v.is_list) throw Error(Errc::parse, where(v) + "'" + k + "' must be a number");
    try {
      std::size_t pos = 0;
      const double d = std::stod(v.text, &pos);
      if (pos == v.text.size()) return d;
    } catch (const std::exception&) {
    }
    throw Error(Errc::parse, where(v) + "'" + k + "' is not a number: " + v.text);
  }
  static std::uint64_t to_uint(const ConfigValue& v, const std::string& k) {
    if (v.is_list) throw Error(Errc::parse, where(v) + "'" + k + "' must be an integer");
    std::uint64_t x = 0;
    const char* b = v.text.data();
    const char* e = b + v.text.size();
    int base = 10;
    if (v.text.size() > 2 && v.text[0] == '0' && (v.text[1] == 'x' || v.text[1] == 'X')) {
      b += 2;
      base = 16;
    }
    auto [p, ec] = std::from_chars(b, e, x, base);
    if (ec != std::errc() || p != e) throw Error(Errc::parse, where(v) + "'" + k + "' is not a non-negative integer: " + v.text);
    return x;
  }
};

class Config {
 public:
  static Config parse(std::istream& in, const std::string& origin = "<input>") {
    Config c;
    c.origin_ = origin;
    std::string raw;
    int line = 0;
    ConfigSection* cur = nullptr;
    while (std::getline(in, raw)) {
      ++line;
      std::string s = strip_comment(raw);
      s = trim(s);
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']') throw Error(Errc::parse, origin + ": line " + std::to_string(line) + ": unterminated section header");
        const std::string name = trim(s.substr(1, s.size() - 2));
        if (name.empty()) throw Error(Errc::parse, origin + ": line " + std::to_string(line) + ": empty section name");
        if (c.find(name)) throw Error(Errc::parse, origin + ": line " + std::to_string(line) + ": duplicate section [" + name + "]");
        c.sections_.push_back(ConfigSection{name, line, {}});
        cur = &c.sections_.back();
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw Error(Errc::parse, origin + ": line " + std::to_string(line) + ": expected key = value");
      const std::string key = trim(s.substr(0, eq));
      const std::string val = trim(s.substr(eq + 1));
      if (key.empty()) throw Error(Errc::parse, origin + ": line " + std::to_string(line) + ": empty key");
      if (!cur) {
        c.sections_.push_back(ConfigSection{"", line, {}});
        cur = &c.sections_.back();
      }
      if (cur->values.count(key))
        throw Error(Errc::parse, origin + ": line " + std::to_string(line) + ": duplicate key '" + key + "'");
      cur->values[key] = parse_value(val, line, origin);
    }
    return c;
  }

  static Config parse_string(const std::string& s) {
    std::istringstream in(s);
    return parse(in);
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::parse, "cannot open " + path);
    return parse(in, path);
  }

  const ConfigSection* find(const std::string& name) const {
    for (const auto& s : sections_)
      if (s.name == name) return &s;
    return nullptr;
  }

  const ConfigSection& section(const std::string& name) const {
    if (auto* s = find(name)) return *s;
    throw Error(Errc::validation, origin_ + ": missing section [" + name + "]");
  }

  /// Sections named `prefix.<x>`, in file order.
  std::vector<const ConfigSection*> with_prefix(const std::string& prefix) const {
    std::vector<const ConfigSection*> out;
    for (const auto& s : sections_)
      if (s.name.rfind(prefix + ".", 0) == 0) out.push_back(&s);
    return out;
  }

  const std::vector<ConfigSection>& sections() const { return sections_; }
  const std::string& origin() const { return origin_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::string strip_comment(const std::string& s) {
    bool q = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') q = !q;
      if (!q && s[i] == '#') return s.substr(0, i);
    }
    return s;
  }

  static ConfigValue parse_value(const std::string& v, int line, const std::string& origin) {
    auto fail = [&](const std::string& m) { throw Error(Errc::parse, origin + ": line " + std::to_string(line) + ": " + m); };
    ConfigValue out;
    out.line = line;
    if (v.empty()) fail("missing value");
    if (v.front() == '[') {
      if (v.back() != ']') fail("unterminated list");
      out.is_list = true;
      std::string body = v.substr(1, v.size() - 2);
      std::stringstream ss(body);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.size() >= 2 && item.front() == '"' && item.back() == '"') item = item.substr(1, item.size() - 2);
        if (item.empty()) {
          if (trim(body).empty()) break;
          fail("empty list element");
        }
        out.list.push_back(item);
      }
      return out;
    }
    if (v.front() == '"') {
      if (v.size() < 2 || v.back() != '"') fail("unterminated string");
      out.text = v.substr(1, v.size() - 2);
      out.quoted = true;
      return out;
    }
    out.text = v;
    return out;
  }

  std::string origin_;
  std::vector<ConfigSection> sections_;
};

}  // namespace cachex
