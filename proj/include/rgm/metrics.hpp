#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "rgm/correspondence.hpp"
#include "rgm/error.hpp"
#include "rgm/geom.hpp"
#include "rgm/io.hpp"

namespace rgm::metrics {

inline constexpr double kCcdClip = 0.1;
inline constexpr double kRecallRotDeg = 1.0;
inline constexpr double kRecallTrans = 0.1;
inline constexpr double kRmseTau = 0.2;
inline constexpr double kInlierTau = 0.1;
inline constexpr double kFmrThresh = 0.05;

inline const char* const kConvention =
    "mie_r: geodesic angle of R_gt^T R_pre (deg); mie_t: |t_pre - t_gt|_2; "
    "mae_r: mean |angle| of intrinsic Z-Y-X Euler angles of R_gt^T R_pre (deg); mae_t: mean |t_pre - t_gt| per axis";

struct TransformErrors {
  double mae_r = 0, mae_t = 0, mie_r = 0, mie_t = 0;
};

/// Rotation angle in degrees, in [0, 180]. atan2 keeps precision near 0 and 180.
inline double rotation_angle_deg(const Mat3& R) {
  Vec3 axis(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  double s = 0.5 * axis.norm();
  double c = 0.5 * (R.trace() - 1.0);
  return rad2deg(std::atan2(s, c));
}

inline TransformErrors transform_errors(const RigidTransform& pre, const RigidTransform& gt) {
  Mat3 rel = gt.rotation().transpose() * pre.rotation();
  Vec3 e = matrix_to_euler_zyx(rel);
  Vec3 dt = pre.translation() - gt.translation();
  TransformErrors out;
  out.mie_r = rotation_angle_deg(rel);
  out.mie_t = dt.norm();
  out.mae_r = rad2deg(e.cwiseAbs().sum() / 3.0);
  out.mae_t = dt.cwiseAbs().sum() / 3.0;
  return out;
}

namespace detail {

inline double clipped_side(const Points& A, const Points& B, double d) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < B.rows(); ++j) best = std::min(best, (A.row(i) - B.row(j)).squaredNorm());
    total += std::min(best, d);
  }
  return total;
}

}  // namespace detail

/// Clipped two-sided chamfer distance as an unnormalized sum.
inline double ccd(const PointCloud& Xhat, const PointCloud& Y, double d = kCcdClip) {
  if (!(d > 0.0)) throw ParameterError("ccd: d must be > 0");
  return detail::clipped_side(Xhat.points(), Y.points(), d) + detail::clipped_side(Y.points(), Xhat.points(), d);
}

/// Same terms, each side divided by its point count.
inline double ccd_normalized(const PointCloud& Xhat, const PointCloud& Y, double d = kCcdClip) {
  if (!(d > 0.0)) throw ParameterError("ccd: d must be > 0");
  return detail::clipped_side(Xhat.points(), Y.points(), d) / static_cast<double>(Xhat.size()) +
         detail::clipped_side(Y.points(), Xhat.points(), d) / static_cast<double>(Y.size());
}

inline bool success(double mae_r, double mae_t) { return mae_r < kRecallRotDeg && mae_t < kRecallTrans; }

struct PointPairs {
  std::vector<Vec3> src, dst;
  std::size_t size() const { return src.size(); }
};

inline PointPairs gather(const PointCloud& X, const PointCloud& Y, const Correspondences& C) {
  PointPairs p;
  for (auto [i, j] : C.pairs()) {
    p.src.push_back(X[i]);
    p.dst.push_back(Y[j]);
  }
  return p;
}

struct RmseResult {
  double rmse = 0;
  bool rr_hit = false;
};

inline RmseResult rmse_and_rr(const RigidTransform& pre, const PointPairs& gt_pairs, double tau1 = kRmseTau) {
  if (gt_pairs.size() == 0) throw ParameterError("rmse_and_rr: empty ground-truth pair set");
  double acc = 0.0;
  for (std::size_t k = 0; k < gt_pairs.size(); ++k) acc += (pre(gt_pairs.src[k]) - gt_pairs.dst[k]).squaredNorm();
  RmseResult r;
  r.rmse = std::sqrt(acc / static_cast<double>(gt_pairs.size()));
  r.rr_hit = r.rmse < tau1;
  return r;
}

struct InlierResult {
  double inlier_ratio = 0;
  bool fmr_hit = false;
};

inline InlierResult inlier_ratio_fmr(const PointPairs& pred_pairs, const RigidTransform& gt, double tau2 = kInlierTau,
                                     double fmr_thresh = kFmrThresh) {
  InlierResult r;
  if (pred_pairs.size() == 0) return r;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < pred_pairs.size(); ++k)
    if ((gt(pred_pairs.src[k]) - pred_pairs.dst[k]).norm() < tau2) ++hits;
  r.inlier_ratio = static_cast<double>(hits) / static_cast<double>(pred_pairs.size());
  r.fmr_hit = r.inlier_ratio > fmr_thresh;
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
  double mae_r = 0, mae_t = 0, mie_r = 0, mie_t = 0;
  double ccd = 0, ccd_normalized = 0;
  bool success = false;
  double rmse = 0;
  bool rr_hit = false;
  double inlier_ratio = 0;
  bool fmr_hit = false;
};

/// All metrics for one sample. X is the untransformed source; gt_corr indexes X rows and Y rows.
inline MetricReport evaluate_sample(const RigidTransform& pre, const RigidTransform& gt, const PointCloud& X,
                                    const PointCloud& Y, const Correspondences& gt_corr,
                                    const Correspondences& pred_corr) {
  MetricReport m;
  auto te = transform_errors(pre, gt);
  m.mae_r = te.mae_r;
  m.mae_t = te.mae_t;
  m.mie_r = te.mie_r;
  m.mie_t = te.mie_t;
  PointCloud Xhat = apply_transform(pre, X);
  m.ccd = ccd(Xhat, Y);
  m.ccd_normalized = ccd_normalized(Xhat, Y);
  m.success = success(m.mae_r, m.mae_t);
  if (gt_corr.size() > 0) {
    auto r = rmse_and_rr(pre, gather(X, Y, gt_corr));
    m.rmse = r.rmse;
    m.rr_hit = r.rr_hit;
  } else {
    m.rmse = std::numeric_limits<double>::infinity();
    m.rr_hit = false;
  }
  auto ir = inlier_ratio_fmr(gather(X, Y, pred_corr), gt);
  m.inlier_ratio = ir.inlier_ratio;
  m.fmr_hit = ir.fmr_hit;
  return m;
}

struct SampleRecord {
  std::string id;
  MetricReport metrics;
  std::size_t correspondences = 0;
  std::size_t iterations_run = 0;
  bool degraded = false;
  std::string error;  // non-empty when the sample failed outright
};

struct Aggregate {
  std::size_t samples = 0, failed = 0;
  double mae_r = 0, mae_t = 0, mie_r = 0, mie_t = 0, ccd = 0, ccd_normalized = 0, rmse = 0, inlier_ratio = 0;
  double recall_pct = 0, rr_pct = 0, fmr_pct = 0;
};

/// Means over samples that produced metrics; percentages count failed samples as misses.
inline Aggregate aggregate(const std::vector<SampleRecord>& records) {
  Aggregate a;
  a.samples = records.size();
  std::size_t ok = 0, rec = 0, rr = 0, fmr = 0, finite_rmse = 0;
  for (const auto& r : records) {
    if (!r.error.empty()) {
      ++a.failed;
      continue;
    }
    ++ok;
    const MetricReport& m = r.metrics;
    a.mae_r += m.mae_r;
    a.mae_t += m.mae_t;
    a.mie_r += m.mie_r;
    a.mie_t += m.mie_t;
    a.ccd += m.ccd;
    a.ccd_normalized += m.ccd_normalized;
    if (std::isfinite(m.rmse)) {
      a.rmse += m.rmse;
      ++finite_rmse;
    }
    a.inlier_ratio += m.inlier_ratio;
    rec += m.success;
    rr += m.rr_hit;
    fmr += m.fmr_hit;
  }
  if (ok > 0) {
    double n = static_cast<double>(ok);
    a.mae_r /= n;
    a.mae_t /= n;
    a.mie_r /= n;
    a.mie_t /= n;
    a.ccd /= n;
    a.ccd_normalized /= n;
    a.inlier_ratio /= n;
  }
  if (finite_rmse > 0) a.rmse /= static_cast<double>(finite_rmse);
  if (a.samples > 0) {
    double n = static_cast<double>(a.samples);
    a.recall_pct = 100.0 * static_cast<double>(rec) / n;
    a.rr_pct = 100.0 * static_cast<double>(rr) / n;
    a.fmr_pct = 100.0 * static_cast<double>(fmr) / n;
  }
  return a;
}

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json to_json(const MetricReport& m) {
  return {{"mae_r", m.mae_r},
          {"mae_t", m.mae_t},
          {"mie_r", m.mie_r},
          {"mie_t", m.mie_t},
          {"ccd", m.ccd},
          {"ccd_normalized", m.ccd_normalized},
          {"success", m.success},
          {"rmse", finite_or_null(m.rmse)},
          {"rr_hit", m.rr_hit},
          {"inlier_ratio", m.inlier_ratio},
          {"fmr_hit", m.fmr_hit}};
}

inline nlohmann::json to_json(const Aggregate& a) {
  return {{"samples", a.samples},       {"failed", a.failed},
          {"mae_r", a.mae_r},           {"mae_t", a.mae_t},
          {"mie_r", a.mie_r},           {"mie_t", a.mie_t},
          {"ccd", a.ccd},               {"ccd_normalized", a.ccd_normalized},
          {"rmse", a.rmse},             {"inlier_ratio", a.inlier_ratio},
          {"recall_pct", a.recall_pct}, {"rr_pct", a.rr_pct},
          {"fmr_pct", a.fmr_pct}};
}

inline nlohmann::json report_json(const std::vector<SampleRecord>& records, const nlohmann::json& context) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json s = {{"id", r.id},
                        {"correspondences", r.correspondences},
                        {"iterations_run", r.iterations_run},
                        {"degraded", r.degraded}};
    if (r.error.empty())
      s["metrics"] = to_json(r.metrics);
    else
      s["error"] = r.error;
    samples.push_back(std::move(s));
  }
  return {{"context", context},
          {"convention", kConvention},
          {"thresholds",
           {{"recall_mae_r_deg", kRecallRotDeg},
            {"recall_mae_t", kRecallTrans},
            {"ccd_d", kCcdClip},
            {"rr_tau1", kRmseTau},
            {"ir_tau2", kInlierTau},
            {"fmr_thresh", kFmrThresh}}},
          {"summary", to_json(aggregate(records))},
          {"samples", samples}};
}

/// Flat per-sample table for plotting.
inline std::string report_csv(const std::vector<SampleRecord>& records) {
  std::string s =
      "id,mae_r,mae_t,mie_r,mie_t,ccd,ccd_normalized,success,rmse,rr_hit,inlier_ratio,fmr_hit,correspondences,"
      "degraded,error\n";
  auto f = [](double v) { return io::format_double(v); };
  for (const auto& r : records) {
    const MetricReport& m = r.metrics;
    s += r.id + ",";
    if (r.error.empty()) {
      s += f(m.mae_r) + "," + f(m.mae_t) + "," + f(m.mie_r) + "," + f(m.mie_t) + "," + f(m.ccd) + "," +
           f(m.ccd_normalized) + "," + (m.success ? "1" : "0") + "," + (std::isfinite(m.rmse) ? f(m.rmse) : "") + "," +
           (m.rr_hit ? "1" : "0") + "," + f(m.inlier_ratio) + "," + (m.fmr_hit ? "1" : "0");
    } else {
      s += ",,,,,,,,,,";
    }
    s += "," + std::to_string(r.correspondences) + "," + (r.degraded ? "1" : "0") + ",";
    std::string err = r.error;
    for (char& c : err)
      if (c == ',' || c == '\n') c = ';';
    s += err + "\n";
  }
  return s;
}

}  // namespace rgm::metrics
