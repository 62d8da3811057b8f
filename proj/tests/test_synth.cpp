#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "rgm/synth.hpp"
#include "oracles.hpp"

using namespace rgm;
using namespace rgm::oracle;
using namespace rgm::synth;

namespace {


PointCloud cloud_from(const std::vector<Vec3>& pts) { return PointCloud(pts); }

}  // namespace

TEST(SampleShape, SphereOnUnitSurface) {
  Rng rng(1);
  PointCloud X = sample_shape(Shape::sphere, 256, rng);
  for (std::size_t i = 0; i < X.size(); ++i) EXPECT_NEAR(X[i].norm(), 1.0, 1e-9);
}

TEST(SampleShape, EveryShapeHasUnitMaxNorm) {
  for (Shape s : all_shapes()) {
    Rng rng(2);
    PointCloud X = sample_shape(s, 300, rng);
    ASSERT_EQ(X.size(), 300u);
    double mx = 0;
    for (std::size_t i = 0; i < X.size(); ++i) mx = std::max(mx, X[i].norm());
    EXPECT_NEAR(mx, 1.0, 1e-12) << to_string(s);
  }
}

TEST(SampleShape, DeterministicAndValidated) {
  Rng a(3), b(3);
  EXPECT_EQ(sample_shape(Shape::torus, 100, a).points(), sample_shape(Shape::torus, 100, b).points());
  EXPECT_THROW(sample_shape(Shape::box, 7, a), ParameterError);
  EXPECT_THROW(shape_from_string("teapot"), ParameterError);
}

TEST(Crop, KeepAllIsIdentity) {
  Rng rng(4);
  PointCloud X = sample_shape(Shape::box, 50, rng);
  EXPECT_EQ(crop_by_plane(X, 1.0, rng).points(), X.points());
}

TEST(Crop, RetainsCeilOfFraction) {
  EXPECT_EQ(crop_count(1024, 0.7), 717u);
  EXPECT_EQ(crop_count(10, 0.7), 7u);
  EXPECT_EQ(crop_count(128, 0.7), 90u);
  Rng rng(5);
  for (std::size_t n : {1024u, 128u, 33u}) {
    PointCloud X = sample_shape(Shape::cylinder, n, rng);
    EXPECT_EQ(crop_by_plane(X, 0.7, rng).size(), crop_count(n, 0.7));
  }
}

TEST(Crop, ForcedNormalKeepsTopHalf) {
  std::vector<Vec3> pts;
  for (int x = 0; x < 4; ++x)
    for (int y = 0; y < 4; ++y)
      for (int z = 0; z < 4; ++z) pts.emplace_back(x - 1.5, y - 1.5, z - 1.5);
  PointCloud X = cloud_from(pts);
  PointCloud top = crop_by_plane(X, 0.5, Vec3(0, 0, 1));
  ASSERT_EQ(top.size(), 32u);
  std::size_t k = 0;
  for (std::size_t i = 0; i < X.size(); ++i)
    if (X[i](2) > 0) {
      EXPECT_EQ(top[k++], X[i]);
    }
  EXPECT_EQ(k, 32u);
}

TEST(Crop, TooFewPointsIsDegenerate) {
  Rng rng(6);
  PointCloud X = sample_shape(Shape::sphere, 8, rng);
  EXPECT_THROW(crop_by_plane(X, 0.3, rng), DegenerateError);
  EXPECT_THROW(crop_by_plane(X, 0.0, rng), ParameterError);
}

TEST(Noise, ZeroSigmaUnchanged) {
  Rng rng(7);
  PointCloud X = sample_shape(Shape::helix, 40, rng);
  EXPECT_EQ(add_gaussian_noise(X, 0.0, 0.05, rng).points(), X.points());
}

TEST(Noise, ClippedAndCalibrated) {
  Rng rng(8);
  Points P = Points::Zero(33334, 3);
  PointCloud Z(P);
  PointCloud N = add_gaussian_noise(Z, 0.01, 0.05, rng);
  const Points& Q = N.points();
  EXPECT_LE(Q.cwiseAbs().maxCoeff(), 0.05);
  double n = static_cast<double>(Q.size());
  double mean = Q.sum() / n;
  double var = (Q.array() - mean).square().sum() / (n - 1);
  EXPECT_GE(std::sqrt(var), 0.0095);
  EXPECT_LE(std::sqrt(var), 0.0105);
}

TEST(Noise, ClipBinds) {
  Rng rng(9);
  PointCloud N = add_gaussian_noise(PointCloud(Points::Zero(1000, 3)), 1.0, 0.05, rng);
  EXPECT_LE(N.points().cwiseAbs().maxCoeff(), 0.05);
  EXPECT_DOUBLE_EQ(N.points().cwiseAbs().maxCoeff(), 0.05);
}

TEST(Rebuild, IdenticalCloudsGiveIdentity) {
  Rng rng(10);
  PointCloud X = sample_shape(Shape::two_box, 64, rng);
  Correspondences C = rebuild_correspondences(X, X, 0.1);
  ASSERT_EQ(C.size(), 64u);
  for (auto [i, j] : C.pairs()) EXPECT_EQ(i, j);
}

TEST(Rebuild, FarPairRejected) {
  PointCloud X = cloud_from({Vec3(0, 0, 0)});
  PointCloud Y = cloud_from({Vec3(0.2, 0, 0)});
  EXPECT_TRUE(rebuild_correspondences(X, Y, 0.1).empty());
}

TEST(Rebuild, SecondRoundRecoversDisplacedPair) {
  // x1-y1 are mutual; x0's nearest is y0 but y0 prefers x1, so x0-y0 appears only in round two
  PointCloud X = cloud_from({Vec3(0, 0, 0), Vec3(0.06, 0, 0)});
  PointCloud Y = cloud_from({Vec3(0.05, 0, 0), Vec3(0.065, 0, 0)});
  Correspondences C = rebuild_correspondences(X, Y, 0.1);
  EXPECT_EQ(C.pairs(), (std::vector<IndexPair>{{0, 0}, {1, 1}}));
  auto oracle = mutual_nn_oracle(X, Y, 0.1);
  EXPECT_EQ(std::set<IndexPair>(C.pairs().begin(), C.pairs().end()), oracle);
}

TEST(Rebuild, MatchesOracleOnSmallInstances) {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    std::size_t n = 1 + rng() % 50, m = 1 + rng() % 50;
    Points P(static_cast<Eigen::Index>(n), 3), Q(static_cast<Eigen::Index>(m), 3);
    double spread = 0.05 + 0.3 * uniform01(rng);
    for (Eigen::Index i = 0; i < P.rows(); ++i)
      for (int k = 0; k < 3; ++k) P(i, k) = spread * uniform01(rng);
    for (Eigen::Index j = 0; j < Q.rows(); ++j)
      for (int k = 0; k < 3; ++k) Q(j, k) = spread * uniform01(rng);
    PointCloud X(P), Y(Q);
    Correspondences C = rebuild_correspondences(X, Y, 0.1);
    EXPECT_EQ(std::set<IndexPair>(C.pairs().begin(), C.pairs().end()), mutual_nn_oracle(X, Y, 0.1));
  }
}

TEST(MakePair, CleanIsPermutation) {
  Rng rng(12);
  ProtocolSettings s = default_settings(Mode::clean);
  s.n_points = 100;
  RegistrationSample r = make_pair(Shape::box, s, rng);
  ASSERT_EQ(r.source.size(), r.target.size());
  ASSERT_EQ(r.gt_correspondence.size(), 100u);
  Eigen::MatrixXd D = r.gt_correspondence.dense();
  EXPECT_TRUE((D.rowwise().sum().array() == 1.0).all());
  EXPECT_TRUE((D.colwise().sum().array() == 1.0).all());
  for (auto [i, j] : r.gt_correspondence.pairs())
    EXPECT_LT((r.gt_transform(r.source[i]) - r.target[j]).norm(), 1e-12);
}

TEST(MakePair, PartialHasOutliers) {
  Rng rng(13);
  ProtocolSettings s = default_settings(Mode::partial);
  s.n_points = 200;
  for (int trial = 0; trial < 5; ++trial) {
    RegistrationSample r = make_pair(Shape::sphere, s, rng);
    EXPECT_EQ(r.source.size(), 140u);
    EXPECT_EQ(r.target.size(), 140u);
    EXPECT_LT(r.gt_correspondence.size(), 140u);
  }
}

TEST(MakePair, MarkedPairsWithinRangeForEveryMode) {
  Rng rng(14);
  for (Mode m : {Mode::clean, Mode::noise, Mode::partial, Mode::partial_noise}) {
    for (Shape sh : all_shapes()) {
      ProtocolSettings s = default_settings(m);
      s.n_points = 96;
      RegistrationSample r = make_pair(sh, s, rng);
      Eigen::MatrixXd D = r.gt_correspondence.dense();
      EXPECT_LE(D.rowwise().sum().maxCoeff(), 1.0);
      EXPECT_LE(D.colwise().sum().maxCoeff(), 1.0);
      for (auto [i, j] : r.gt_correspondence.pairs())
        EXPECT_LT((r.gt_transform(r.source[i]) - r.target[j]).norm(), s.max_corr_dist);
    }
  }
}

TEST(MakePair, SameSeedBitIdentical) {
  ProtocolSettings s = default_settings(Mode::partial_noise);
  s.n_points = 80;
  Rng a(15), b(15);
  RegistrationSample x = make_pair(Shape::torus, s, a), y = make_pair(Shape::torus, s, b);
  EXPECT_EQ(x.source.points(), y.source.points());
  EXPECT_EQ(x.target.points(), y.target.points());
  EXPECT_EQ(x.gt_transform.to_array(), y.gt_transform.to_array());
  EXPECT_EQ(x.gt_correspondence.pairs(), y.gt_correspondence.pairs());
}

TEST(ProtocolSettings, RejectsInvalid) {
  ProtocolSettings s;
  s.keep_fraction = 0.0;
  EXPECT_THROW(s.validate(), ParameterError);
  s = {};
  s.noise_clip = -1;
  EXPECT_THROW(s.validate(), ParameterError);
  s = {};
  s.max_corr_dist = 0;
  EXPECT_THROW(s.validate(), ParameterError);
}
