#pragma once

// File formats used by the command-line tool.
//
// Weights come either as a raw little-endian binary32 stream with a sidecar
// metadata record next to it (<file>.meta), or as plain text with one value
// per line ('#' starts a comment line). Records such as the sidecar and the
// codebook summary are "key = value" lines.

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "qprompt/error.hpp"
#include "qprompt/quantizer.hpp"
#include "qprompt/tensor.hpp"

namespace qprompt::cli {

enum class FloatFormat { Auto, F32, Text };

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Text for *.txt and *.csv, binary32 otherwise.
inline FloatFormat resolve(FloatFormat f, const std::string& path) {
  if (f != FloatFormat::Auto) return f;
  return ends_with(path, ".txt") || ends_with(path, ".csv") ? FloatFormat::Text : FloatFormat::F32;
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "write to '" + path + "' failed");
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot open '" + path + "' for writing");
  out << text;
  if (!out) fail(ErrorCode::Io, "write to '" + path + "' failed");
}

/// Shortest decimal form that reads back to the same double.
inline std::string num(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

using Record = std::vector<std::pair<std::string, std::string>>;

inline std::string format_record(const Record& r) {
  std::string out;
  for (const auto& [k, v] : r) out += k + " = " + v + "\n";
  return out;
}

inline std::map<std::string, std::string> parse_record(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::Io, origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

inline std::vector<std::size_t> parse_shape(const std::string& s, const std::string& origin) {
  std::vector<std::size_t> shape;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(part.c_str(), &end, 10);
    if (end == part.c_str() || v == 0) fail(ErrorCode::Io, origin + ": bad shape '" + s + "'");
    shape.push_back(static_cast<std::size_t>(v));
  }
  if (shape.empty()) fail(ErrorCode::Io, origin + ": empty shape");
  return shape;
}

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s;
}

inline std::string meta_path(const std::string& path) { return path + ".meta"; }

inline WeightTensor read_weights(const std::string& path, FloatFormat fmt) {
  WeightTensor w;
  if (resolve(fmt, path) == FloatFormat::Text) {
    const auto bytes = read_bytes(path);
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    std::string line;
    int lineno = 0;
    std::vector<double> values;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      char* end = nullptr;
      const double v = std::strtod(line.c_str() + first, &end);
      const auto rest = std::string(end).find_first_not_of(" \t\r");
      if (end == line.c_str() + first || rest != std::string::npos) {
        fail(ErrorCode::Io, path + ":" + std::to_string(lineno) + ": not a number");
      }
      values.push_back(v);
    }
    w = WeightTensor(std::move(values));
  } else {
    const auto meta = parse_record(
        [&] {
          const auto b = read_bytes(meta_path(path));
          return std::string(b.begin(), b.end());
        }(),
        meta_path(path));
    if (meta.count("format") && meta.at("format") != "f32le") {
      fail(ErrorCode::Io, meta_path(path) + ": unsupported format '" + meta.at("format") + "'");
    }
    if (!meta.count("count")) fail(ErrorCode::Io, meta_path(path) + ": missing 'count'");
    const std::size_t count = std::stoull(meta.at("count"));
    const auto shape = meta.count("shape") ? parse_shape(meta.at("shape"), meta_path(path))
                                           : std::vector<std::size_t>{count};
    const auto bytes = read_bytes(path);
    if (bytes.size() != 4 * count) {
      fail(ErrorCode::LengthMismatch, path + " holds " + std::to_string(bytes.size()) + " bytes, metadata says " +
                                          std::to_string(count) + " floats");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
      values[i] = std::bit_cast<float>(u);
    }
    w = WeightTensor(std::move(values), shape);
  }
  require_nonempty(w.view());
  require_finite(w.view());
  return w;
}

inline void write_weights(const std::string& path, const WeightTensor& w, FloatFormat fmt) {
  if (resolve(fmt, path) == FloatFormat::Text) {
    std::string text;
    for (double v : w.values) text += num(v) + "\n";
    write_text(path, text);
    return;
  }
  std::vector<std::uint8_t> bytes;
  bytes.reserve(4 * w.size());
  for (double v : w.values) {
    const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
  }
  write_bytes(path, bytes);
  write_text(meta_path(path), format_record({{"format", "f32le"},
                                             {"count", std::to_string(w.size())},
                                             {"shape", shape_string(w.shape)}}));
}

inline std::vector<Index> read_indices(const std::string& path) {
  const auto bytes = read_bytes(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  int lineno = 0;
  std::vector<Index> out;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(line.c_str() + first, &end, 10);
    const auto rest = std::string(end).find_first_not_of(" \t\r");
    if (end == line.c_str() + first || rest != std::string::npos || line[first] == '-') {
      fail(ErrorCode::Io, path + ":" + std::to_string(lineno) + ": not a non-negative integer");
    }
    if (v > 0xffffffffull) fail(ErrorCode::IndexOverflow, path + ":" + std::to_string(lineno) + ": index too large");
    out.push_back(static_cast<Index>(v));
  }
  return out;
}

inline std::string indices_text(const std::vector<Index>& idx) {
  std::string s;
  s.reserve(idx.size() * 2);
  for (Index i : idx) s += std::to_string(i) + "\n";
  return s;
}

}  // namespace qprompt::cli
