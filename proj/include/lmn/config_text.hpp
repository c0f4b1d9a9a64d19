#pragma once

// Flat key=value text: one entry per line, '#' starts a comment line.

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lmn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline std::vector<KeyValue> parse_key_values(std::string_view text) {
  std::vector<KeyValue> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key=value, got '" + std::string(line) + "'");
    out.push_back({std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))), line_no});
  }
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + std::string(v) + "'");
  return out;
}

inline std::uint64_t parse_positive(const std::string& key, std::string_view v) {
  const std::uint64_t out = parse_uint(key, v);
  if (out == 0) throw ConfigError(key + ": must be positive");
  return out;
}

inline double parse_double(const std::string& key, std::string_view v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(std::string(v), &used);
    if (used != v.size()) throw ConfigError(key + ": trailing characters in '" + std::string(v) + "'");
    return out;
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": expected a number, got '" + std::string(v) + "'");
  }
}

inline bool parse_bool(const std::string& key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + std::string(v) + "'");
}

inline std::vector<std::uint64_t> parse_uint_list(const std::string& key, std::string_view v) {
  std::vector<std::uint64_t> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(parse_positive(key, trim(v.substr(0, comma))));
    v = comma == std::string_view::npos ? std::string_view{} : v.substr(comma + 1);
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

}  // namespace lmn
