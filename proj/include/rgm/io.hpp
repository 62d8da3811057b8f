#pragma once

#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "rgm/error.hpp"
#include "rgm/geom.hpp"

namespace rgm::io {

namespace fs = std::filesystem;

/// Shortest decimal form that round-trips to the same double.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw NumericError("format_double: conversion failed");
  return std::string(buf.data(), ptr);
}

inline double parse_double(const std::string& s, const std::string& context) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if (b != e && *b == '+') ++b;
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || ptr != e) throw FormatError(context + ": cannot parse number '" + s + "'");
  return v;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temp file, then renames over the destination.
inline void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename into " + path.string());
  }
}

// ---------------------------------------------------------------------------
// ASCII PLY (vertex element with x y z) and XYZ

inline std::string ply_string(const PointCloud& cloud) {
  std::string s;
  s += "ply\nformat ascii 1.0\nelement vertex " + std::to_string(cloud.size()) +
       "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  const Points& P = cloud.points();
  for (Eigen::Index i = 0; i < P.rows(); ++i)
    s += format_double(P(i, 0)) + " " + format_double(P(i, 1)) + " " + format_double(P(i, 2)) + "\n";
  return s;
}

inline PointCloud parse_ply(const std::string& text, const std::string& context) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw FormatError(context + ": missing 'ply' magic");
  long n_vertex = -1;
  bool in_vertex = false;
  std::vector<std::string> props;
  std::vector<std::pair<std::string, long>> elements;
  bool ended = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw FormatError(context + ": only ASCII PLY is supported");
    } else if (kw == "element") {
      std::string name;
      long count = 0;
      ls >> name >> count;
      elements.emplace_back(name, count);
      in_vertex = (name == "vertex");
      if (in_vertex) {
        if (elements.size() != 1) throw FormatError(context + ": vertex element must come first");
        n_vertex = count;
      }
    } else if (kw == "property") {
      if (in_vertex) {
        std::string type, name;
        ls >> type;
        if (type == "list") throw FormatError(context + ": list properties on vertex unsupported");
        ls >> name;
        props.push_back(name);
      }
    } else if (kw == "end_header") {
      ended = true;
      break;
    }
  }
  if (!ended) throw FormatError(context + ": missing end_header");
  if (n_vertex < 1) throw FormatError(context + ": no vertex element");
  int ix = -1, iy = -1, iz = -1;
  for (std::size_t k = 0; k < props.size(); ++k) {
    if (props[k] == "x") ix = static_cast<int>(k);
    if (props[k] == "y") iy = static_cast<int>(k);
    if (props[k] == "z") iz = static_cast<int>(k);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw FormatError(context + ": vertex lacks x/y/z properties");
  Points P(n_vertex, 3);
  for (long i = 0; i < n_vertex; ++i) {
    if (!std::getline(in, line)) throw CorruptionError(context + ": fewer vertices than declared");
    std::istringstream ls(line);
    std::vector<std::string> tok;
    std::string t;
    while (ls >> t) tok.push_back(t);
    if (tok.size() < props.size()) throw CorruptionError(context + ": short vertex line " + std::to_string(i));
    P(i, 0) = parse_double(tok[static_cast<std::size_t>(ix)], context);
    P(i, 1) = parse_double(tok[static_cast<std::size_t>(iy)], context);
    P(i, 2) = parse_double(tok[static_cast<std::size_t>(iz)], context);
  }
  return PointCloud(std::move(P));
}

inline std::string xyz_string(const PointCloud& cloud) {
  std::string s;
  const Points& P = cloud.points();
  for (Eigen::Index i = 0; i < P.rows(); ++i)
    s += format_double(P(i, 0)) + " " + format_double(P(i, 1)) + " " + format_double(P(i, 2)) + "\n";
  return s;
}

inline PointCloud parse_xyz(const std::string& text, const std::string& context) {
  std::istringstream in(text);
  std::string line;
  std::vector<Vec3> pts;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> tok;
    std::string t;
    while (ls >> t) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok.size() != 3) throw FormatError(context + ": expected 3 numbers per line");
    pts.emplace_back(parse_double(tok[0], context), parse_double(tok[1], context), parse_double(tok[2], context));
  }
  if (pts.empty()) throw FormatError(context + ": no points");
  return PointCloud(pts);
}

/// Dispatches on extension: .ply or anything else as XYZ.
inline PointCloud read_cloud(const fs::path& path) {
  std::string text = read_text(path);
  if (path.extension() == ".ply") return parse_ply(text, path.string());
  return parse_xyz(text, path.string());
}

inline void write_cloud(const fs::path& path, const PointCloud& cloud) {
  write_atomic(path, path.extension() == ".ply" ? ply_string(cloud) : xyz_string(cloud));
}

// ---------------------------------------------------------------------------
// Transforms: one line of 12 numbers, rotation row-major then translation.

inline std::string transform_string(const RigidTransform& T) {
  std::string s;
  auto a = T.to_array();
  for (std::size_t k = 0; k < a.size(); ++k) s += (k ? " " : "") + format_double(a[k]);
  return s;
}

inline RigidTransform parse_transform(const std::string& text, const std::string& context) {
  std::istringstream in(text);
  std::array<double, 12> a{};
  std::string t;
  std::size_t n = 0;
  while (in >> t) {
    if (n == 12) throw FormatError(context + ": more than 12 numbers in transform");
    a[n++] = parse_double(t, context);
  }
  if (n != 12) throw FormatError(context + ": transform needs 12 numbers");
  return RigidTransform::from_array(a);
}

inline RigidTransform read_transform(const fs::path& path) {
  return parse_transform(read_text(path), path.string());
}

inline void write_transform(const fs::path& path, const RigidTransform& T) {
  write_atomic(path, transform_string(T) + "\n");
}

}  // namespace rgm::io
