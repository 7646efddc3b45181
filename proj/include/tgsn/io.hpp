#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tgsn/error.hpp"

namespace tgsn::io {

static_assert(sizeof(float) == 4);

inline void write_f32_le(std::ostream& os, std::span<const float> values) {
  std::vector<unsigned char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(values[i]);
    buf[4 * i + 0] = static_cast<unsigned char>(bits & 0xFFu);
    buf[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xFFu);
    buf[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xFFu);
    buf[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xFFu);
  }
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size()));
}

// Reads exactly `count` floats; returns how many complete values were read.
inline std::size_t read_f32_le(std::istream& is, std::span<float> out) {
  std::vector<unsigned char> buf(out.size() * 4);
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  auto got = static_cast<std::size_t>(is.gcount()) / 4;
  for (std::size_t i = 0; i < got; ++i) {
    std::uint32_t bits = static_cast<std::uint32_t>(buf[4 * i]) |
                         (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                         (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                         (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
    out[i] = std::bit_cast<float>(bits);
  }
  return got;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

// Nine significant digits; round-trips float32.
inline std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p, bool binary) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, binary ? std::ios::binary : std::ios::out);
  if (!os) fail(ErrorCode::IoError, "cannot open for writing: " + p.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p, bool binary) {
  std::ifstream is(p, binary ? std::ios::binary : std::ios::in);
  if (!is) fail(ErrorCode::IoError, "cannot open: " + p.string());
  return is;
}

inline std::string read_text(const std::filesystem::path& p) {
  auto is = open_in(p, true);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  auto os = open_out(p, true);
  os << s;
}

inline double parse_number(const std::string& s, const char* field) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::MalformedHeader,
         std::string("field '") + field + "' is not a number: '" + s + "'");
  }
}

inline long long parse_int(const std::string& s, const char* field) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::MalformedHeader,
         std::string("field '") + field + "' is not an integer: '" + s + "'");
  }
}

}  // namespace tgsn::io
