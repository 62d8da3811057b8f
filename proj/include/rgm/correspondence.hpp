#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "rgm/error.hpp"
#include "rgm/io.hpp"

namespace rgm {

using IndexPair = std::pair<std::size_t, std::size_t>;

/// Binary N x M matrix with at most one entry per row and per column, stored as a sorted pair list.
class Correspondences {
 public:
  Correspondences(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {}
  Correspondences(std::size_t rows, std::size_t cols, std::vector<IndexPair> pairs)
      : rows_(rows), cols_(cols), pairs_(std::move(pairs)) {
    std::sort(pairs_.begin(), pairs_.end());
    std::vector<char> used_r(rows_, 0), used_c(cols_, 0);
    for (auto [i, j] : pairs_) {
      if (i >= rows_ || j >= cols_) throw ParameterError("Correspondences: index out of range");
      if (used_r[i] || used_c[j]) throw ParameterError("Correspondences: row or column matched twice");
      used_r[i] = used_c[j] = 1;
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }
  const std::vector<IndexPair>& pairs() const { return pairs_; }

  Eigen::MatrixXd dense() const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_));
    for (auto [i, j] : pairs_) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
    return m;
  }

  /// CSV with an `i,j` header.
  std::string csv() const {
    std::string s = "i,j\n";
    for (auto [i, j] : pairs_) s += std::to_string(i) + "," + std::to_string(j) + "\n";
    return s;
  }

  static Correspondences parse_csv(const std::string& text, std::size_t rows, std::size_t cols,
                                   const std::string& context) {
    std::vector<IndexPair> pairs;
    std::size_t start = 0;
    bool header = true;
    while (start < text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      std::string line = text.substr(start, end - start);
      start = end + 1;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (header) {
        header = false;
        if (line == "i,j") continue;
      }
      auto comma = line.find(',');
      if (comma == std::string::npos) throw FormatError(context + ": malformed correspondence row");
      try {
        pairs.emplace_back(std::stoul(line.substr(0, comma)), std::stoul(line.substr(comma + 1)));
      } catch (const std::exception&) {
        throw FormatError(context + ": malformed correspondence row '" + line + "'");
      }
    }
    return Correspondences(rows, cols, std::move(pairs));
  }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<IndexPair> pairs_;
};

}  // namespace rgm
