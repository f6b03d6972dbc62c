#pragma once

#include <charconv>
#include <cstdint>
#include <istream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "pnr/error.hpp"

namespace pnr::csv {

// Shortest text that parses back to the same double.
inline std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string num(std::uint64_t v) { return std::to_string(v); }

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
T parse(std::string_view field, std::size_t line_no) {
  T v{};
  const auto r = std::from_chars(field.data(), field.data() + field.size(), v);
  if (r.ec != std::errc{} || r.ptr != field.data() + field.size())
    fail(ErrorCategory::format,
         "CSV line " + std::to_string(line_no) + ": cannot parse '" + std::string(field) + "'");
  return v;
}

/// Reads a CSV with a known header; calls row(fields, line_no) per data line.
template <class RowFn>
void read(std::istream& is, std::string_view expected_header, RowFn row) {
  std::string line;
  if (!std::getline(is, line)) fail(ErrorCategory::format, "CSV input is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != expected_header)
    fail(ErrorCategory::format, "unexpected CSV header '" + line + "', expected '" + std::string(expected_header) + "'");
  const std::size_t columns = split(expected_header).size();
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split(line);
    if (fields.size() != columns)
      fail(ErrorCategory::format, "CSV line " + std::to_string(line_no) + " has " +
                                      std::to_string(fields.size()) + " fields, expected " +
                                      std::to_string(columns));
    row(fields, line_no);
  }
}

}  // namespace pnr::csv
