#pragma once

// `key = value` text: one pair per line, `#` starts a comment, blank lines
// ignored. Used by model config text inside checkpoints and by CLI config files.

#include <charconv>
#include <cstdio>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "densepipe/error.hpp"

namespace densepipe::kv {

using Pairs = std::vector<std::pair<std::string, std::string>>;

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline Pairs parse(std::string_view text, std::string_view source = "config") {
  Pairs out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": expected `key = value`");
    }
    std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

/// Raised when a value cannot be parsed; names the offending key.
class ValueError : public ConfigError {
 public:
  ValueError(const std::string& key, const std::string& value, const std::string& expected)
      : ConfigError("cannot parse value '" + value + "' for key '" + key + "' (expected " + expected + ")"),
        key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

template <typename Int>
Int to_int(const std::string& key, std::string_view value) {
  Int out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end || value.empty()) throw ValueError(key, std::string(value), "an integer");
  return out;
}

inline double to_double(const std::string& key, std::string_view value) {
  const std::string s(value);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ValueError(key, s, "a number");
  }
  if (used != s.size()) throw ValueError(key, s, "a number");
  return out;
}

inline bool to_bool(const std::string& key, std::string_view value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ValueError(key, std::string(value), "a boolean");
}

template <typename Int>
std::vector<Int> to_int_list(const std::string& key, std::string_view value) {
  std::vector<Int> out;
  if (trim(value).empty()) return out;
  while (true) {
    const auto comma = value.find(',');
    out.push_back(to_int<Int>(key, trim(value.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    value = value.substr(comma + 1);
  }
  return out;
}

template <typename Int>
std::string join(const std::vector<Int>& values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(values[i]);
  }
  return s;
}

/// Shortest text that parses back to exactly the same double.
inline std::string format_double(double v) {
  char buf[64];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::stod(buf) == v) break;
  }
  return buf;
}

}  // namespace densepipe::kv
