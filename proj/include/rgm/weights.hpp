#pragma once

// Weights container:
//   "RGMW" magic (4 bytes), uint32 format version, uint32 record count, then per record
//   uint32 name length, name bytes, uint32 rank, uint64 dims[rank], float64 data (row-major).
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "rgm/diff.hpp"
#include "rgm/error.hpp"
#include "rgm/io.hpp"

namespace rgm::diff {

static_assert(std::endian::native == std::endian::little, "weights container assumes a little-endian host");

inline constexpr char kWeightsMagic[4] = {'R', 'G', 'M', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

/// Ordered, named parameter tensors. Indices stay valid across copies.
class ParameterSet {
 public:
  std::size_t add(const std::string& name, Matrix init) {
    if (index_.count(name)) throw ParameterError("duplicate parameter name '" + name + "'");
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.emplace_back(std::move(init), true);
    return tensors_.size() - 1;
  }

  std::size_t size() const { return tensors_.size(); }
  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParameterError("no parameter named '" + name + "'");
    return it->second;
  }

  std::vector<Tensor*> pointers() {
    std::vector<Tensor*> out;
    for (Tensor& t : tensors_) out.push_back(&t);
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const Tensor& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (Tensor& t : tensors_) t.zero_grad();
  }

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t digest() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t k = 0; k < n; ++k) {
        h ^= b[k];
        h *= 1099511628211ull;
      }
    };
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      mix(names_[i].data(), names_[i].size());
      Index r = tensors_[i].value.rows(), c = tensors_[i].value.cols();
      mix(&r, sizeof r);
      mix(&c, sizeof c);
      mix(tensors_[i].value.data(), sizeof(double) * static_cast<std::size_t>(tensors_[i].value.size()));
    }
    return h;
  }

  /// One `name rows cols` line per parameter.
  std::string manifest() const {
    std::string s;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      s += names_[i] + " " + std::to_string(tensors_[i].value.rows()) + " " + std::to_string(tensors_[i].value.cols()) + "\n";
    return s;
  }

 private:
  std::vector<Tensor> tensors_;
  std::vector<std::string> names_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

template <class T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& data, std::string context) : data_(data), context_(std::move(context)) {}
  template <class T>
  T get() {
    T v{};
    need(sizeof(T));
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CorruptionError(context_ + ": truncated weights file");
  }
  const std::string& data_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_weights(const ParameterSet& params) {
  std::string out(kWeightsMagic, 4);
  detail::put(out, kWeightsVersion);
  detail::put(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Matrix& v = params[i].value;
    detail::put(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put(out, std::uint32_t{2});
    detail::put(out, static_cast<std::uint64_t>(v.rows()));
    detail::put(out, static_cast<std::uint64_t>(v.cols()));
    out.append(reinterpret_cast<const char*>(v.data()), sizeof(double) * static_cast<std::size_t>(v.size()));
  }
  return out;
}

/// Parses a container into a fresh set (names and shapes taken from the file).
inline ParameterSet deserialize_weights(const std::string& data, const std::string& context) {
  detail::Reader rd(data, context);
  char magic[4];
  rd.bytes(magic, 4);
  if (std::memcmp(magic, kWeightsMagic, 4) != 0) throw FormatError(context + ": not a weights file (bad magic)");
  auto version = rd.get<std::uint32_t>();
  if (version != kWeightsVersion)
    throw FormatError(context + ": unsupported weights format version " + std::to_string(version) + " (expected " +
                      std::to_string(kWeightsVersion) + ")");
  auto count = rd.get<std::uint32_t>();
  ParameterSet params;
  for (std::uint32_t k = 0; k < count; ++k) {
    auto len = rd.get<std::uint32_t>();
    if (len > 4096) throw CorruptionError(context + ": implausible parameter name length");
    std::string name(len, '\0');
    rd.bytes(name.data(), len);
    auto rank = rd.get<std::uint32_t>();
    if (rank < 1 || rank > 2) throw CorruptionError(context + ": unsupported rank for '" + name + "'");
    std::uint64_t rows = rd.get<std::uint64_t>();
    std::uint64_t cols = rank == 2 ? rd.get<std::uint64_t>() : 1;
    if (rows > (1ull << 32) || cols > (1ull << 32) || rows * cols > (1ull << 34))
      throw CorruptionError(context + ": implausible shape for '" + name + "'");
    Matrix v(static_cast<Index>(rows), static_cast<Index>(cols));
    rd.bytes(v.data(), sizeof(double) * static_cast<std::size_t>(rows * cols));
    params.add(name, std::move(v));
  }
  if (!rd.done()) throw CorruptionError(context + ": trailing bytes after last record");
  return params;
}

inline void save_weights(const std::filesystem::path& path, const ParameterSet& params) {
  io::write_atomic(path, serialize_weights(params));
  std::filesystem::path manifest = path;
  manifest += ".manifest";
  io::write_atomic(manifest, params.manifest());
}

inline ParameterSet read_weights(const std::filesystem::path& path) {
  return deserialize_weights(io::read_text(path), path.string());
}

/// Copies stored values into `params`; every name and shape must match.
inline void load_weights_into(const std::filesystem::path& path, ParameterSet& params) {
  ParameterSet stored = read_weights(path);
  if (stored.size() != params.size())
    throw FormatError(path.string() + ": parameter count " + std::to_string(stored.size()) + " does not match model (" +
                      std::to_string(params.size()) + ")");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    if (!stored.contains(name)) throw FormatError(path.string() + ": missing parameter '" + name + "'");
    const Tensor& s = stored[stored.index_of(name)];
    if (s.value.rows() != params[i].value.rows() || s.value.cols() != params[i].value.cols())
      throw FormatError(path.string() + ": shape mismatch for '" + name + "'");
    params[i].value = s.value;
    params[i].zero_grad();
  }
}

}  // namespace rgm::diff
