#pragma once

#include <charconv>
#include <istream>
#include <string>
#include <vector>

#include "dacmap/core.hpp"

namespace dacmap {

/// Minimal RFC-4180-ish reader: comma separated, double quotes for fields
/// containing commas, blank lines skipped, CR stripped.
inline std::vector<std::vector<std::string>> read_csv(std::istream &in) {
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cur += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        fields.push_back(std::move(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    fields.push_back(std::move(cur));
    rows.push_back(std::move(fields));
  }
  return rows;
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string &s, const char *what) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (...) {
    fail(std::string("invalid number for ") + what + ": '" + s + "'");
  }
  if (s.find_first_not_of(" \t", pos) != std::string::npos) {
    fail(std::string("invalid number for ") + what + ": '" + s + "'");
  }
  return v;
}

}  // namespace dacmap
