#pragma once

#include <charconv>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cotr/errors.hpp"

namespace cotr {

/// Flat `key = value` configuration; '#' starts a comment.
class KeyValues {
 public:
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  template <class T>
  T get(const std::string& key, T fallback) const {
    return has(key) ? convert<T>(key, values_.at(key)) : fallback;
  }

  template <class T>
  T require(const std::string& key) const {
    if (!has(key)) throw FormatError("missing key '" + key + "'");
    return convert<T>(key, values_.at(key));
  }

  std::vector<double> numbers(const std::string& key) const {
    std::vector<double> out;
    if (!has(key)) return out;
    std::istringstream is(values_.at(key));
    std::string tok;
    while (is >> tok) out.push_back(convert<double>(key, tok));
    return out;
  }

 private:
  template <class T>
  static T convert(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw FormatError("key '" + key + "': expected a boolean, got '" + text + "'");
    } else if constexpr (std::is_floating_point_v<T>) {
      try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used == text.size()) return T(v);
      } catch (const std::exception&) {
      }
      throw FormatError("key '" + key + "': expected a number, got '" + text + "'");
    } else {
      T v{};
      auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size())
        throw FormatError("key '" + key + "': expected an integer, got '" + text + "'");
      return v;
    }
  }

  std::map<std::string, std::string> values_;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
      throw FormatError("line " + std::to_string(n) + ": expected 'key = value'");
    kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

}  // namespace cotr
