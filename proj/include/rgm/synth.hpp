#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rgm/correspondence.hpp"
#include "rgm/error.hpp"
#include "rgm/geom.hpp"

namespace rgm::synth {

enum class Shape { sphere, box, cylinder, torus, two_box, helix };
enum class Mode { clean, noise, partial, partial_noise };

inline const std::vector<Shape>& all_shapes() {
  static const std::vector<Shape> s{Shape::sphere, Shape::box, Shape::cylinder, Shape::torus, Shape::two_box, Shape::helix};
  return s;
}

inline std::string to_string(Shape s) {
  switch (s) {
    case Shape::sphere: return "sphere";
    case Shape::box: return "box";
    case Shape::cylinder: return "cylinder";
    case Shape::torus: return "torus";
    case Shape::two_box: return "two_box";
    case Shape::helix: return "helix";
  }
  return "?";
}

inline Shape shape_from_string(const std::string& s) {
  for (Shape k : all_shapes())
    if (to_string(k) == s) return k;
  throw ParameterError("unknown shape_id '" + s + "'");
}

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::clean: return "clean";
    case Mode::noise: return "noise";
    case Mode::partial: return "partial";
    case Mode::partial_noise: return "partial_noise";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  for (Mode m : {Mode::clean, Mode::noise, Mode::partial, Mode::partial_noise})
    if (to_string(m) == s) return m;
  throw ParameterError("unknown mode '" + s + "'");
}

inline bool is_partial(Mode m) { return m == Mode::partial || m == Mode::partial_noise; }
inline bool is_noisy(Mode m) { return m == Mode::noise || m == Mode::partial_noise; }

struct ProtocolSettings {
  Mode mode = Mode::clean;
  std::size_t n_points = 1024;
  double rot_range_deg = 45.0;
  double trans_range = 0.5;
  double keep_fraction = 0.7;
  double noise_sigma = 0.01;  // standard deviation
  double noise_clip = 0.05;
  double max_corr_dist = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ParameterError("keep_fraction must lie in (0, 1]");
    if (!(noise_clip >= 0.0)) throw ParameterError("noise_clip must be >= 0");
    if (!(noise_sigma >= 0.0)) throw ParameterError("noise_sigma must be >= 0");
    if (!(max_corr_dist > 0.0)) throw ParameterError("max_corr_dist must be > 0");
    if (n_points < 8) throw ParameterError("n_points must be >= 8");
    if (!(rot_range_deg >= 0.0 && rot_range_deg <= 180.0)) throw ParameterError("rot_range_deg must lie in [0, 180]");
    if (!(trans_range >= 0.0)) throw ParameterError("trans_range must be >= 0");
  }
};

/// Protocol defaults per mode: partial modes keep 70%, noise modes add clipped Gaussian noise.
inline ProtocolSettings default_settings(Mode mode) {
  ProtocolSettings s;
  s.mode = mode;
  return s;
}

struct RegistrationSample {
  PointCloud source;
  PointCloud target;
  RigidTransform gt_transform;
  Correspondences gt_correspondence;
  ProtocolSettings settings;
  Shape shape = Shape::sphere;
};

// ---------------------------------------------------------------------------
// Procedural surfaces. Each one is generated about its analytic area centroid;
// the cloud is then scaled so the farthest point sits on the unit sphere.

namespace detail {

inline Vec3 random_unit(Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (;;) {
    Vec3 v(g(rng), g(rng), g(rng));
    double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

struct Box {
  Vec3 center;
  Vec3 half;
  double area() const { return 8.0 * (half(0) * half(1) + half(1) * half(2) + half(0) * half(2)); }
  Vec3 sample(Rng& rng) const {
    double axy = half(0) * half(1), ayz = half(1) * half(2), axz = half(0) * half(2);
    double u = uniform01(rng) * (axy + ayz + axz);
    double s = uniform01(rng) < 0.5 ? -1.0 : 1.0;
    double a = 2.0 * uniform01(rng) - 1.0, b = 2.0 * uniform01(rng) - 1.0;
    Vec3 p;
    if (u < axy)
      p = Vec3(a * half(0), b * half(1), s * half(2));
    else if (u < axy + ayz)
      p = Vec3(s * half(0), a * half(1), b * half(2));
    else
      p = Vec3(a * half(0), s * half(1), b * half(2));
    return center + p;
  }
};

inline Vec3 random_half_extents(Rng& rng, double lo, double hi) {
  return Vec3(lo + (hi - lo) * uniform01(rng), lo + (hi - lo) * uniform01(rng), lo + (hi - lo) * uniform01(rng));
}

inline std::vector<Vec3> raw_shape(Shape shape, std::size_t n, Rng& rng) {
  constexpr double pi = std::numbers::pi;
  std::vector<Vec3> pts;
  pts.reserve(n);
  switch (shape) {
    case Shape::sphere:
      for (std::size_t i = 0; i < n; ++i) pts.push_back(random_unit(rng));
      break;
    case Shape::box: {
      Box b{Vec3::Zero(), random_half_extents(rng, 0.25, 0.6)};
      for (std::size_t i = 0; i < n; ++i) pts.push_back(b.sample(rng));
      break;
    }
    case Shape::cylinder: {
      double r = 0.3 + 0.3 * uniform01(rng);
      double h = 0.8 + 0.8 * uniform01(rng);
      double side = 2.0 * pi * r * h, caps = 2.0 * pi * r * r;
      for (std::size_t i = 0; i < n; ++i) {
        double phi = 2.0 * pi * uniform01(rng);
        if (uniform01(rng) * (side + caps) < side) {
          pts.emplace_back(r * std::cos(phi), r * std::sin(phi), h * (uniform01(rng) - 0.5));
        } else {
          double rr = r * std::sqrt(uniform01(rng));
          double z = uniform01(rng) < 0.5 ? -0.5 * h : 0.5 * h;
          pts.emplace_back(rr * std::cos(phi), rr * std::sin(phi), z);
        }
      }
      break;
    }
    case Shape::torus: {
      double R = 0.6 + 0.2 * uniform01(rng);
      double r = 0.15 + 0.15 * uniform01(rng);
      while (pts.size() < n) {
        double u = 2.0 * pi * uniform01(rng), v = 2.0 * pi * uniform01(rng);
        // area element is proportional to R + r cos v
        if (uniform01(rng) * (R + r) > R + r * std::cos(v)) continue;
        pts.emplace_back((R + r * std::cos(v)) * std::cos(u), (R + r * std::cos(v)) * std::sin(u), r * std::sin(v));
      }
      break;
    }
    case Shape::two_box: {
      Box a{Vec3::Zero(), random_half_extents(rng, 0.2, 0.5)};
      Vec3 off(0.3 + 0.4 * uniform01(rng), 0.2 + 0.4 * uniform01(rng), 0.1 * (2.0 * uniform01(rng) - 1.0));
      Box b{off, random_half_extents(rng, 0.1, 0.3)};
      double wa = a.area(), wb = b.area();
      Vec3 centroid = (wa * a.center + wb * b.center) / (wa + wb);
      a.center -= centroid;
      b.center -= centroid;
      for (std::size_t i = 0; i < n; ++i) pts.push_back(uniform01(rng) * (wa + wb) < wa ? a.sample(rng) : b.sample(rng));
      break;
    }
    case Shape::helix: {
      double rho = 0.4 + 0.2 * uniform01(rng);
      double height = 1.0 + 0.6 * uniform01(rng);
      double tube = 0.06 + 0.06 * uniform01(rng);
      const double turns = 2.0;
      for (std::size_t i = 0; i < n; ++i) {
        double s = uniform01(rng), phi = 2.0 * pi * uniform01(rng);
        double th = 2.0 * pi * turns * s;
        Vec3 c(rho * std::cos(th), rho * std::sin(th), height * (s - 0.5));
        Vec3 tangent(-rho * std::sin(th) * 2.0 * pi * turns, rho * std::cos(th) * 2.0 * pi * turns, height);
        tangent.normalize();
        Vec3 normal(std::cos(th), std::sin(th), 0.0);
        Vec3 binormal = tangent.cross(normal);
        pts.push_back(c + tube * (std::cos(phi) * normal + std::sin(phi) * binormal));
      }
      break;
    }
  }
  return pts;
}

}  // namespace detail

inline PointCloud sample_shape(Shape shape, std::size_t n_points, Rng& rng) {
  if (n_points < 8) throw ParameterError("sample_shape: n_points must be >= 8");
  std::vector<Vec3> pts = detail::raw_shape(shape, n_points, rng);
  double max_norm = 0.0;
  for (const Vec3& p : pts) max_norm = std::max(max_norm, p.norm());
  for (Vec3& p : pts) p /= max_norm;
  return PointCloud(pts);
}

inline std::size_t crop_count(std::size_t n, double keep_fraction) {
  // tolerance absorbs products like 0.7 * 10 = 7.000000000000001
  return static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-9));
}

/// Keeps the ceil(keep_fraction * N) points with the largest signed distance along `normal`,
/// in their original order.
inline PointCloud crop_by_plane(const PointCloud& X, double keep_fraction, const Vec3& normal) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ParameterError("crop_by_plane: keep_fraction must lie in (0, 1]");
  const std::size_t n = X.size();
  const std::size_t keep = crop_count(n, keep_fraction);
  if (keep < 4) throw DegenerateError("crop_by_plane: fewer than 4 points retained");
  if (keep == n) return X;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> sd(n);
  for (std::size_t i = 0; i < n; ++i) sd[i] = X[i].dot(normal);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sd[a] > sd[b]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return X.subset(order);
}

inline PointCloud crop_by_plane(const PointCloud& X, double keep_fraction, Rng& rng) {
  Vec3 normal = detail::random_unit(rng);
  return crop_by_plane(X, keep_fraction, normal);
}

inline PointCloud add_gaussian_noise(const PointCloud& X, double sigma, double clip, Rng& rng) {
  if (!(sigma >= 0.0) || !(clip >= 0.0)) throw ParameterError("add_gaussian_noise: sigma and clip must be >= 0");
  if (sigma == 0.0) return X;
  std::normal_distribution<double> g(0.0, sigma);
  Points P = X.points();
  for (Eigen::Index i = 0; i < P.rows(); ++i)
    for (int k = 0; k < 3; ++k) P(i, k) += std::clamp(g(rng), -clip, clip);
  return PointCloud(std::move(P));
}

/// Two rounds of mutual-nearest-neighbour matching restricted to pairs closer than max_dist.
/// Pairs found in the first round are removed before the second.
inline Correspondences rebuild_correspondences(const PointCloud& X_aligned, const PointCloud& Y, double max_dist) {
  const std::size_t N = X_aligned.size(), M = Y.size();
  const Points& P = X_aligned.points();
  const Points& Q = Y.points();
  Eigen::MatrixXd D(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(M));
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < M; ++j)
      D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          (P.row(static_cast<Eigen::Index>(i)) - Q.row(static_cast<Eigen::Index>(j))).squaredNorm();
  std::vector<char> x_free(N, 1), y_free(M, 1);
  std::vector<IndexPair> pairs;
  const double max_d2 = max_dist * max_dist;
  for (int round = 0; round < 2; ++round) {
    std::vector<std::size_t> nn_x(N, M), nn_y(M, N);
    for (std::size_t i = 0; i < N; ++i) {
      if (!x_free[i]) continue;
      for (std::size_t j = 0; j < M; ++j) {
        if (!y_free[j]) continue;
        double d = D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (nn_x[i] == M || d < D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(nn_x[i]))) nn_x[i] = j;
        if (nn_y[j] == N || d < D(static_cast<Eigen::Index>(nn_y[j]), static_cast<Eigen::Index>(j))) nn_y[j] = i;
      }
    }
    std::vector<IndexPair> found;
    for (std::size_t i = 0; i < N; ++i) {
      if (!x_free[i] || nn_x[i] == M) continue;
      std::size_t j = nn_x[i];
      if (nn_y[j] == i && D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) < max_d2) found.emplace_back(i, j);
    }
    for (auto [i, j] : found) {
      x_free[i] = 0;
      y_free[j] = 0;
      pairs.emplace_back(i, j);
    }
  }
  return Correspondences(N, M, std::move(pairs));
}

/// One registration problem: X from the shape, Y = T_gt(X) (independently cropped / noised
/// when the mode asks for it) with its point order shuffled.
inline RegistrationSample make_pair(Shape shape, const ProtocolSettings& settings, Rng& rng) {
  settings.validate();
  PointCloud base = sample_shape(shape, settings.n_points, rng);
  RigidTransform T = random_transform(settings.rot_range_deg, settings.trans_range, rng);
  PointCloud X = base;
  PointCloud Y0 = base;
  if (is_partial(settings.mode)) {
    X = crop_by_plane(base, settings.keep_fraction, rng);
    Y0 = crop_by_plane(base, settings.keep_fraction, rng);
  }
  Y0 = apply_transform(T, Y0);
  if (is_noisy(settings.mode)) {
    X = add_gaussian_noise(X, settings.noise_sigma, settings.noise_clip, rng);
    Y0 = add_gaussian_noise(Y0, settings.noise_sigma, settings.noise_clip, rng);
  }
  std::vector<std::size_t> perm(Y0.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  PointCloud Y = Y0.subset(perm);

  if (settings.mode == Mode::clean) {
    std::vector<IndexPair> pairs;
    for (std::size_t k = 0; k < perm.size(); ++k) pairs.emplace_back(perm[k], k);
    Correspondences gt(X.size(), Y.size(), std::move(pairs));
    return {X, Y, T, gt, settings, shape};
  }
  Correspondences gt = rebuild_correspondences(apply_transform(T, X), Y, settings.max_corr_dist);
  return {X, Y, T, gt, settings, shape};
}

}  // namespace rgm::synth
