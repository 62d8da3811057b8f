#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "rgm/correspondence.hpp"
#include "rgm/error.hpp"
#include "rgm/geom.hpp"
#include "rgm/net.hpp"

namespace rgm::solve {

// ---------------------------------------------------------------------------
// Linear assignment

struct Assignment {
  std::vector<IndexPair> pairs;  // sorted by row
  double total = 0.0;            // summed profit
};

namespace detail {

// Shortest augmenting path Hungarian method on a square cost matrix.
// Returns row -> column and the dual potentials.
struct HungarianResult {
  std::vector<std::size_t> col_of_row;
  std::vector<double> u, v;
};

inline HungarianResult hungarian_min(const Eigen::MatrixXd& cost) {
  const std::size_t n = static_cast<std::size_t>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based with a virtual column 0, as in the classical formulation
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  HungarianResult r;
  r.col_of_row.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) r.col_of_row[p[j] - 1] = j - 1;
  r.u.assign(u.begin() + 1, u.end());
  r.v.assign(v.begin() + 1, v.end());
  return r;
}

// Among the perfect matchings that use only zero-reduced-cost edges (exactly the optimal
// assignments), pick the lexicographically smallest one, greedily row by row.
inline void lex_min_tight(const Eigen::MatrixXd& cost, const HungarianResult& h, std::vector<std::size_t>& col_of_row) {
  const std::size_t n = col_of_row.size();
  double scale = std::max(1.0, cost.cwiseAbs().maxCoeff());
  const double tol = 1e-10 * scale;
  std::vector<std::vector<std::size_t>> tight(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - h.u[i] - h.v[j] <= tol) tight[i].push_back(j);
  std::vector<std::size_t> row_of_col(n);
  for (std::size_t i = 0; i < n; ++i) row_of_col[col_of_row[i]] = i;

  std::vector<std::size_t> prev_col(n);
  std::vector<char> seen(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j : tight[i]) {
      if (j >= col_of_row[i]) break;
      // Free column c0 = col_of_row[i]; the row r holding j must be re-routed to c0 through
      // tight edges, touching only rows after i.
      const std::size_t c0 = col_of_row[i];
      const std::size_t r = row_of_col[j];
      if (r < i) continue;
      std::fill(seen.begin(), seen.end(), 0);
      std::vector<std::size_t> queue{r};
      seen[j] = 1;
      std::optional<std::size_t> end_col;
      std::vector<std::size_t> from_row(n, n);
      for (std::size_t qi = 0; qi < queue.size() && !end_col; ++qi) {
        std::size_t row = queue[qi];
        for (std::size_t c : tight[row]) {
          if (seen[c]) continue;
          if (c == c0) {
            from_row[c] = row;
            end_col = c;
            break;
          }
          std::size_t owner = row_of_col[c];
          if (owner <= i) continue;
          seen[c] = 1;
          from_row[c] = row;
          prev_col[owner] = c;
          queue.push_back(owner);
        }
      }
      if (!end_col) continue;
      // walk back: each row on the path moves to the column it reached
      std::size_t c = *end_col;
      while (true) {
        std::size_t row = from_row[c];
        std::size_t old = col_of_row[row];
        col_of_row[row] = c;
        row_of_col[c] = row;
        if (row == r) break;
        c = old;
      }
      col_of_row[i] = j;
      row_of_col[j] = i;
      break;
    }
  }
}

}  // namespace detail

/// Maximum-profit one-to-one assignment of min(R, C) pairs. Among optimal assignments the
/// lexicographically smallest pair list is returned.
inline Assignment lap_hungarian(const Eigen::MatrixXd& profit) {
  const Eigen::Index R = profit.rows(), C = profit.cols();
  Assignment out;
  if (R == 0 || C == 0) return out;
  if (!profit.allFinite()) throw NumericError("lap_hungarian: non-finite profit");
  const Eigen::Index n = std::max(R, C);
  const double top = profit.maxCoeff();
  Eigen::MatrixXd cost = Eigen::MatrixXd::Zero(n, n);
  cost.topLeftCorner(R, C) = (top - profit.array()).matrix();
  auto h = detail::hungarian_min(cost);
  std::vector<std::size_t> col_of_row = h.col_of_row;
  detail::lex_min_tight(cost, h, col_of_row);
  for (Eigen::Index i = 0; i < R; ++i) {
    std::size_t j = col_of_row[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(j) < C) {
      out.pairs.emplace_back(static_cast<std::size_t>(i), j);
      out.total += profit(i, static_cast<Eigen::Index>(j));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Soft to hard

struct HardCorrespondence {
  Correspondences matches;
  std::vector<double> scores;  // soft value of each match, same order as matches.pairs()
};

/// Drops the slack row/column, keeps rows and columns whose (non-slack) sums exceed tau,
/// solves a max-profit LAP on that submatrix and scatters the result back.
inline HardCorrespondence soft_to_hard(const Eigen::MatrixXd& soft, std::size_t N, std::size_t M, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ParameterError("soft_to_hard: tau must lie in [0, 1]");
  if (soft.rows() < static_cast<Eigen::Index>(N) || soft.cols() < static_cast<Eigen::Index>(M))
    throw ParameterError("soft_to_hard: matrix smaller than N x M");
  Eigen::MatrixXd block = soft.topLeftCorner(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(M));
  std::vector<Eigen::Index> rows, cols;
  Eigen::VectorXd rs = block.rowwise().sum();
  Eigen::RowVectorXd cs = block.colwise().sum();
  for (Eigen::Index i = 0; i < rs.size(); ++i)
    if (rs(i) > tau) rows.push_back(i);
  for (Eigen::Index j = 0; j < cs.size(); ++j)
    if (cs(j) > tau) cols.push_back(j);
  HardCorrespondence out{Correspondences(N, M), {}};
  if (rows.empty() || cols.empty()) return out;
  Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = 0; b < cols.size(); ++b)
      sub(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = block(rows[a], cols[b]);
  Assignment asg = lap_hungarian(sub);
  std::vector<IndexPair> pairs;
  for (auto [a, b] : asg.pairs) pairs.emplace_back(static_cast<std::size_t>(rows[a]), static_cast<std::size_t>(cols[b]));
  out.matches = Correspondences(N, M, std::move(pairs));
  for (auto [i, j] : out.matches.pairs())
    out.scores.push_back(block(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
  return out;
}

// ---------------------------------------------------------------------------
// Transform estimation

/// Weighted least-squares rigid fit of dst ~ R src + t (Kabsch with reflection correction).
inline RigidTransform weighted_svd(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                   const std::vector<double>& w) {
  if (src.size() != dst.size() || src.size() != w.size()) throw ParameterError("weighted_svd: size mismatch");
  std::size_t active = 0;
  double total = 0.0;
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (std::size_t k = 0; k < src.size(); ++k) {
    if (w[k] < 0.0) throw ParameterError("weighted_svd: negative weight");
    if (w[k] == 0.0) continue;
    ++active;
    total += w[k];
    cs += w[k] * src[k];
    cd += w[k] * dst[k];
  }
  if (active < 3) throw DegenerateError("weighted_svd: fewer than 3 weighted pairs");
  cs /= total;
  cd /= total;
  Mat3 H = Mat3::Zero();
  double spread = 0.0;
  for (std::size_t k = 0; k < src.size(); ++k) {
    if (w[k] == 0.0) continue;
    Vec3 a = src[k] - cs;
    H += w[k] * a * (dst[k] - cd).transpose();
    spread += w[k] * a.squaredNorm();
  }
  Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  if (!(s(0) > 1e-14 * std::max(1.0, spread)) || s(1) <= 1e-10 * s(0))
    throw DegenerateError("weighted_svd: rank-deficient cross-covariance (collinear or coincident points)");
  const Mat3& U = svd.matrixU();
  const Mat3& V = svd.matrixV();
  Vec3 d(1.0, 1.0, (V * U.transpose()).determinant() < 0.0 ? -1.0 : 1.0);
  Mat3 R = V * d.asDiagonal() * U.transpose();
  return {R, cd - R * cs};
}

/// Weighted SVD from an N x M nonnegative weight matrix (binary C gives unit weights).
inline RigidTransform weighted_svd(const PointCloud& X, const PointCloud& Y, const Eigen::MatrixXd& C) {
  if (C.rows() != static_cast<Eigen::Index>(X.size()) || C.cols() != static_cast<Eigen::Index>(Y.size()))
    throw ParameterError("weighted_svd: weight matrix must be N x M");
  std::vector<Vec3> src, dst;
  std::vector<double> w;
  for (Eigen::Index i = 0; i < C.rows(); ++i)
    for (Eigen::Index j = 0; j < C.cols(); ++j)
      if (C(i, j) != 0.0) {
        src.push_back(X[static_cast<std::size_t>(i)]);
        dst.push_back(Y[static_cast<std::size_t>(j)]);
        w.push_back(C(i, j));
      }
  return weighted_svd(src, dst, w);
}

inline RigidTransform weighted_svd(const PointCloud& X, const PointCloud& Y, const Correspondences& C) {
  std::vector<Vec3> src, dst;
  for (auto [i, j] : C.pairs()) {
    src.push_back(X[i]);
    dst.push_back(Y[j]);
  }
  return weighted_svd(src, dst, std::vector<double>(src.size(), 1.0));
}

struct RansacOptions {
  std::size_t iters = 1000;
  double inlier_thresh = 0.05;
  std::uint64_t seed = 0;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Hypothesise-and-verify over 3-pair samples; hypothesis h draws from its own stream
/// seeded by (seed, h). The largest consensus set (earliest on ties) is refitted.
inline RigidTransform ransac_estimate(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                      const RansacOptions& opt) {
  const std::size_t n = src.size();
  if (n != dst.size()) throw ParameterError("ransac_estimate: size mismatch");
  if (n < 3) throw DegenerateError("ransac_estimate: fewer than 3 pairs");
  const double th2 = opt.inlier_thresh * opt.inlier_thresh;
  auto consensus = [&](const RigidTransform& T) {
    std::vector<std::size_t> in;
    for (std::size_t k = 0; k < n; ++k)
      if ((T(src[k]) - dst[k]).squaredNorm() < th2) in.push_back(k);
    return in;
  };
  std::optional<RigidTransform> best;
  std::vector<std::size_t> best_in;
  const std::vector<double> ones3(3, 1.0);
  for (std::size_t h = 0; h < opt.iters; ++h) {
    Rng rng(splitmix64(opt.seed ^ splitmix64(h)));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::size_t a = pick(rng), b = pick(rng), c = pick(rng);
    while (b == a) b = pick(rng);
    while (c == a || c == b) c = pick(rng);
    RigidTransform T;
    try {
      T = weighted_svd({src[a], src[b], src[c]}, {dst[a], dst[b], dst[c]}, ones3);
    } catch (const DegenerateError&) {
      continue;
    }
    auto in = consensus(T);
    if (!best || in.size() > best_in.size()) {
      best = T;
      best_in = std::move(in);
    }
  }
  if (!best) throw DegenerateError("ransac_estimate: every sample was degenerate");
  if (best_in.size() < 3) return *best;
  std::vector<Vec3> s, d;
  for (std::size_t k : best_in) {
    s.push_back(src[k]);
    d.push_back(dst[k]);
  }
  try {
    return weighted_svd(s, d, std::vector<double>(s.size(), 1.0));
  } catch (const DegenerateError&) {
    return *best;
  }
}

inline RigidTransform ransac_estimate(const PointCloud& X, const PointCloud& Y, const Correspondences& C,
                                      const RansacOptions& opt) {
  std::vector<Vec3> src, dst;
  for (auto [i, j] : C.pairs()) {
    src.push_back(X[i]);
    dst.push_back(Y[j]);
  }
  return ransac_estimate(src, dst, opt);
}

// ---------------------------------------------------------------------------
// Iterative registration

enum class Estimator { svd, ransac };

inline std::string to_string(Estimator e) { return e == Estimator::svd ? "svd" : "ransac"; }
inline Estimator estimator_from_string(const std::string& s) {
  if (s == "svd") return Estimator::svd;
  if (s == "ransac") return Estimator::ransac;
  throw ParameterError("unknown estimator '" + s + "'");
}

struct RegisterOptions {
  Estimator estimator = Estimator::svd;
  std::size_t iterations = 2;
  double tau = 0.5;
  RansacOptions ransac;
};

struct RegistrationResult {
  RigidTransform transform;
  HardCorrespondence correspondences{Correspondences(0, 0), {}};
  std::vector<RigidTransform> per_iteration;
  std::size_t iterations_run = 0;
  bool degraded = false;
  std::string message;
  Eigen::MatrixXd last_soft;  // soft correspondence of the last network pass
};

inline RigidTransform estimate(const PointCloud& X, const PointCloud& Y, const Correspondences& C,
                               const RegisterOptions& opt) {
  return opt.estimator == Estimator::svd ? weighted_svd(X, Y, C) : ransac_estimate(X, Y, C, opt.ransac);
}

/// Runs the network on the current source and target, converts to hard matches, estimates an
/// increment, moves the source, and repeats. A degenerate increment stops the loop and keeps the
/// composition so far.
inline RegistrationResult register_clouds(const PointCloud& X, const PointCloud& Y, const net::RgmWeights& weights,
                                          const RegisterOptions& opt) {
  if (opt.iterations < 1) throw ParameterError("register: iterations must be >= 1");
  RegistrationResult res;
  res.correspondences = {Correspondences(X.size(), Y.size()), {}};
  PointCloud current = X;
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    Eigen::MatrixXd soft = net::soft_correspondence(weights, current, Y);
    HardCorrespondence hard = soft_to_hard(soft, X.size(), Y.size(), opt.tau);
    RigidTransform inc;
    try {
      inc = estimate(current, Y, hard.matches, opt);
    } catch (const DegenerateError& e) {
      res.degraded = true;
      res.message = "iteration " + std::to_string(it) + ": " + e.what();
      if (it == 0) {
        res.correspondences = std::move(hard);
        res.last_soft = std::move(soft);
      }
      break;
    }
    res.per_iteration.push_back(inc);
    res.transform = compose(inc, res.transform);
    res.correspondences = std::move(hard);
    res.last_soft = std::move(soft);
    current = apply_transform(inc, current);
    ++res.iterations_run;
  }
  return res;
}

}  // namespace rgm::solve
