#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rgm/error.hpp"

namespace rgm {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Rng = std::mt19937_64;

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

/// Ordered set of 3D points. Never empty, every coordinate finite.
class PointCloud {
 public:
  PointCloud() = delete;
  explicit PointCloud(Points points) : points_(std::move(points)) {
    if (points_.rows() < 1) throw ParameterError("PointCloud: need at least one point");
    if (!points_.allFinite()) throw NumericError("PointCloud: non-finite coordinate");
  }
  explicit PointCloud(const std::vector<Vec3>& pts) : PointCloud(to_points(pts)) {}

  std::size_t size() const { return static_cast<std::size_t>(points_.rows()); }
  Vec3 operator[](std::size_t i) const { return points_.row(static_cast<Eigen::Index>(i)).transpose(); }
  const Points& points() const { return points_; }

  PointCloud subset(const std::vector<std::size_t>& idx) const {
    Points out(static_cast<Eigen::Index>(idx.size()), 3);
    for (std::size_t k = 0; k < idx.size(); ++k)
      out.row(static_cast<Eigen::Index>(k)) = points_.row(static_cast<Eigen::Index>(idx[k]));
    return PointCloud(std::move(out));
  }

 private:
  static Points to_points(const std::vector<Vec3>& pts) {
    Points p(static_cast<Eigen::Index>(pts.size()), 3);
    for (std::size_t i = 0; i < pts.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
    return p;
  }

  Points points_;
};

/// Element of SE(3): x -> R x + t.
class RigidTransform {
 public:
  static constexpr double kTolerance = 1e-9;

  RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}
  RigidTransform(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    if (!rotation_.allFinite() || !translation_.allFinite())
      throw NumericError("RigidTransform: non-finite entry");
    if ((rotation_.transpose() * rotation_ - Mat3::Identity()).cwiseAbs().maxCoeff() > kTolerance)
      throw ParameterError("RigidTransform: rotation is not orthonormal");
    if (std::abs(rotation_.determinant() - 1.0) > kTolerance)
      throw ParameterError("RigidTransform: rotation determinant is not +1");
  }

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 operator()(const Vec3& x) const { return rotation_ * x + translation_; }

  /// 9 rotation entries (row-major) followed by the 3 translation entries.
  std::array<double, 12> to_array() const {
    std::array<double, 12> a{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a[static_cast<std::size_t>(3 * r + c)] = rotation_(r, c);
    for (int k = 0; k < 3; ++k) a[static_cast<std::size_t>(9 + k)] = translation_(k);
    return a;
  }
  static RigidTransform from_array(const std::array<double, 12>& a) {
    Mat3 R;
    Vec3 t;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) R(r, c) = a[static_cast<std::size_t>(3 * r + c)];
    for (int k = 0; k < 3; ++k) t(k) = a[static_cast<std::size_t>(9 + k)];
    return {R, t};
  }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

inline PointCloud apply_transform(const RigidTransform& T, const PointCloud& X) {
  Points out = X.points() * T.rotation().transpose();
  out.rowwise() += T.translation().transpose();
  return PointCloud(std::move(out));
}

/// compose(T2, T1)(x) == T2(T1(x)).
inline RigidTransform compose(const RigidTransform& T2, const RigidTransform& T1) {
  return {T2.rotation() * T1.rotation(), T2.rotation() * T1.translation() + T2.translation()};
}

inline RigidTransform invert(const RigidTransform& T) {
  Mat3 Rt = T.rotation().transpose();
  return {Rt, -(Rt * T.translation())};
}

// Euler angles use the intrinsic Z-Y-X convention: R = Rz(z) * Ry(y) * Rx(x).
inline Mat3 euler_zyx_to_matrix(double z_rad, double y_rad, double x_rad) {
  return (Eigen::AngleAxisd(z_rad, Vec3::UnitZ()) * Eigen::AngleAxisd(y_rad, Vec3::UnitY()) *
          Eigen::AngleAxisd(x_rad, Vec3::UnitX()))
      .toRotationMatrix();
}

/// Returns (z, y, x) in radians with y in [-pi/2, pi/2].
inline Vec3 matrix_to_euler_zyx(const Mat3& R) {
  double sy = std::clamp(-R(2, 0), -1.0, 1.0);
  double y = std::asin(sy);
  double z, x;
  if (std::abs(sy) < 1.0 - 1e-12) {
    z = std::atan2(R(1, 0), R(0, 0));
    x = std::atan2(R(2, 1), R(2, 2));
  } else {
    // gimbal lock: fold everything into z
    x = 0.0;
    z = std::atan2(-R(0, 1), R(1, 1));
  }
  return {z, y, x};
}

/// Euler angles (Z-Y-X) each uniform in [0, rot_range_deg]; translation components uniform in
/// [-trans_range, trans_range].
inline RigidTransform random_transform(double rot_range_deg, double trans_range, Rng& rng) {
  if (!(rot_range_deg >= 0.0 && rot_range_deg <= 180.0))
    throw ParameterError("random_transform: rot_range_deg must lie in [0, 180]");
  if (!(trans_range >= 0.0)) throw ParameterError("random_transform: trans_range must be >= 0");
  double az = deg2rad(uniform01(rng) * rot_range_deg);
  double ay = deg2rad(uniform01(rng) * rot_range_deg);
  double ax = deg2rad(uniform01(rng) * rot_range_deg);
  Vec3 t;
  for (int k = 0; k < 3; ++k) t(k) = (2.0 * uniform01(rng) - 1.0) * trans_range;
  return {euler_zyx_to_matrix(az, ay, ax), t};
}

// ---------------------------------------------------------------------------
// Nearest neighbours

namespace detail {

struct Neighbor {
  double d2;
  std::size_t index;
  bool operator<(const Neighbor& o) const { return d2 < o.d2 || (d2 == o.d2 && index < o.index); }
};

inline double sq_dist(const Points& P, Eigen::Index a, const Vec3& q) {
  double dx = P(a, 0) - q(0), dy = P(a, 1) - q(1), dz = P(a, 2) - q(2);
  return dx * dx + dy * dy + dz * dz;
}

inline std::vector<std::size_t> take_k(std::vector<Neighbor>& c, std::size_t K) {
  std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(K), c.end());
  std::vector<std::size_t> out(K);
  for (std::size_t k = 0; k < K; ++k) out[k] = c[k].index;
  return out;
}

// Uniform grid over the bounding box, roughly two points per cell.
class Grid {
 public:
  explicit Grid(const Points& P) : P_(P) {
    lo_ = P.colwise().minCoeff().transpose();
    Vec3 hi = P.colwise().maxCoeff().transpose();
    Vec3 ext = (hi - lo_).cwiseMax(1e-12);
    double vol = ext.prod();
    double n = static_cast<double>(P.rows());
    cell_ = std::max(std::cbrt(vol * 2.0 / n), ext.maxCoeff() / 256.0);
    for (int k = 0; k < 3; ++k) dims_[k] = std::max<long>(1, static_cast<long>(std::floor(ext(k) / cell_)) + 1);
    start_.assign(static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]) + 1, 0);
    std::vector<long> cell_of(static_cast<std::size_t>(P.rows()));
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
      cell_of[static_cast<std::size_t>(i)] = linear(cell_coords(P.row(i).transpose()));
      ++start_[static_cast<std::size_t>(cell_of[static_cast<std::size_t>(i)]) + 1];
    }
    for (std::size_t c = 1; c < start_.size(); ++c) start_[c] += start_[c - 1];
    items_.resize(static_cast<std::size_t>(P.rows()));
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (Eigen::Index i = 0; i < P.rows(); ++i)
      items_[fill[static_cast<std::size_t>(cell_of[static_cast<std::size_t>(i)])]++] = static_cast<std::size_t>(i);
  }

  std::vector<std::size_t> query(std::size_t qi, std::size_t K) const {
    Vec3 q = P_.row(static_cast<Eigen::Index>(qi)).transpose();
    std::array<long, 3> c = cell_coords(q);
    long max_ring = std::max({dims_[0], dims_[1], dims_[2]});
    std::vector<Neighbor> cand;
    for (long r = 0; r <= max_ring; ++r) {
      for (long x = c[0] - r; x <= c[0] + r; ++x)
        for (long y = c[1] - r; y <= c[1] + r; ++y)
          for (long z = c[2] - r; z <= c[2] + r; ++z) {
            if (std::max({std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])}) != r) continue;
            if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] || z >= dims_[2]) continue;
            long lc = linear({x, y, z});
            for (std::size_t s = start_[static_cast<std::size_t>(lc)]; s < start_[static_cast<std::size_t>(lc) + 1]; ++s) {
              std::size_t j = items_[s];
              if (j == qi) continue;
              cand.push_back({sq_dist(P_, static_cast<Eigen::Index>(j), q), j});
            }
          }
      if (cand.size() >= K) {
        std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(K - 1), cand.end());
        double kth = cand[K - 1].d2;
        double reach = static_cast<double>(r) * cell_;
        // every unvisited point is at least `reach` away
        if (kth < reach * reach) break;
      }
    }
    return take_k(cand, K);
  }

 private:
  std::array<long, 3> cell_coords(const Vec3& p) const {
    std::array<long, 3> c{};
    for (int k = 0; k < 3; ++k)
      c[static_cast<std::size_t>(k)] =
          std::clamp<long>(static_cast<long>(std::floor((p(k) - lo_(k)) / cell_)), 0, dims_[k] - 1);
    return c;
  }
  long linear(const std::array<long, 3>& c) const { return (c[0] * dims_[1] + c[1]) * dims_[2] + c[2]; }

  const Points& P_;
  Vec3 lo_;
  double cell_ = 1.0;
  std::array<long, 3> dims_{};
  std::vector<std::size_t> start_;
  std::vector<std::size_t> items_;
};

}  // namespace detail

inline constexpr std::size_t kExhaustiveKnnLimit = 512;

/// Exhaustive K-nearest-neighbour search: ascending distance, ties by lower index, query excluded.
inline std::vector<std::size_t> knn_exhaustive(const PointCloud& cloud, std::size_t query_index, std::size_t K) {
  const std::size_t N = cloud.size();
  if (K >= N) throw ParameterError("knn: K must be smaller than the number of points");
  if (query_index >= N) throw ParameterError("knn: query index out of range");
  const Points& P = cloud.points();
  Vec3 q = cloud[query_index];
  std::vector<detail::Neighbor> cand;
  cand.reserve(N - 1);
  for (std::size_t j = 0; j < N; ++j)
    if (j != query_index) cand.push_back({detail::sq_dist(P, static_cast<Eigen::Index>(j), q), j});
  return detail::take_k(cand, K);
}

inline std::vector<std::size_t> knn(const PointCloud& cloud, std::size_t query_index, std::size_t K) {
  if (cloud.size() < kExhaustiveKnnLimit) return knn_exhaustive(cloud, query_index, K);
  if (K >= cloud.size()) throw ParameterError("knn: K must be smaller than the number of points");
  if (query_index >= cloud.size()) throw ParameterError("knn: query index out of range");
  return detail::Grid(cloud.points()).query(query_index, K);
}

/// knn for every point; builds the grid once.
inline std::vector<std::vector<std::size_t>> knn_all(const PointCloud& cloud, std::size_t K) {
  const std::size_t N = cloud.size();
  if (K >= N) throw ParameterError("knn: K must be smaller than the number of points");
  std::vector<std::vector<std::size_t>> out(N);
  if (N < kExhaustiveKnnLimit) {
    for (std::size_t i = 0; i < N; ++i) out[i] = knn_exhaustive(cloud, i, K);
  } else {
    detail::Grid grid(cloud.points());
    for (std::size_t i = 0; i < N; ++i) out[i] = grid.query(i, K);
  }
  return out;
}

/// Index of the point in `cloud` closest to q (ties by lower index) and the squared distance.
inline std::pair<std::size_t, double> nearest(const Points& cloud, const Vec3& q) {
  std::size_t best = 0;
  double bd = detail::sq_dist(cloud, 0, q);
  for (Eigen::Index j = 1; j < cloud.rows(); ++j) {
    double d = detail::sq_dist(cloud, j, q);
    if (d < bd) {
      bd = d;
      best = static_cast<std::size_t>(j);
    }
  }
  return {best, bd};
}

}  // namespace rgm
