#pragma once

// Shared helpers for the line-oriented text artifacts.

#include "ugcem/errors.hpp"

#include <charconv>
#include <istream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace ugcem::detail {

/// Reads one '\n'-terminated line. Returns false at clean end of file and
/// throws FormatError when the final line lacks its terminator (truncation).
inline bool read_line(std::istream& in, std::string& line) {
  line.clear();
  if (!std::getline(in, line)) return false;
  if (in.eof()) {
    throw FormatError("truncated file: last line is not newline-terminated");
  }
  return true;
}

inline double parse_real(std::string_view token) {
  while (!token.empty() && token.front() == ' ') token.remove_prefix(1);
  while (!token.empty() && (token.back() == ' ' || token.back() == '\r')) token.remove_suffix(1);
  double v = 0.0;
  const auto* first = token.data();
  const auto* last = token.data() + token.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (token.empty() || ec != std::errc() || ptr != last) {
    throw FormatError("malformed number '" + std::string(token) + "'");
  }
  return v;
}

inline long parse_integer(std::string_view token) {
  long v = 0;
  const auto* last = token.data() + token.size();
  const auto [ptr, ec] = std::from_chars(token.data(), last, v);
  if (token.empty() || ec != std::errc() || ptr != last) {
    throw FormatError("malformed integer '" + std::string(token) + "'");
  }
  return v;
}

inline std::vector<double> parse_reals(std::string_view line, char sep = ',') {
  std::vector<double> out;
  if (line.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(parse_real(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Splits "a=1 b=2" style header fields.
inline std::vector<std::string_view> split_spaces(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    const std::size_t j = s.find(' ', i);
    const std::size_t end = j == std::string_view::npos ? s.size() : j;
    if (end > i) out.push_back(s.substr(i, end - i));
    i = end;
  }
  return out;
}

/// Value of `key=` among header fields, or throws FormatError.
inline std::string_view header_field(const std::vector<std::string_view>& fields, std::string_view key) {
  for (auto f : fields) {
    if (f.size() > key.size() && f.substr(0, key.size()) == key && f[key.size()] == '=') {
      return f.substr(key.size() + 1);
    }
  }
  throw FormatError("header is missing field '" + std::string(key) + "'");
}

}  // namespace ugcem::detail
