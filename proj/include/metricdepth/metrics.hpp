#pragma once

// Evaluation metrics: per-frame depth errors and accuracies, trajectory
// errors (ATE after rigid alignment, RTE/RRE on relative motion) and
// ICP-registered point cloud RMSE.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/SVD>

#include "metricdepth/error.hpp"
#include "metricdepth/geometry.hpp"
#include "metricdepth/imaging.hpp"

namespace metricdepth {

struct DepthMetrics {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rmse = 0.0;  // mm
  double rmse_log = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::size_t n_pixels = 0;
  std::size_t n_frames = 0;
};

struct DepthClamp {
  double min = 1e-3;  // mm
  double max = 150.0;
};

/// Single-frame depth errors over pixels valid in both maps, pred clamped.
inline DepthMetrics depth_metrics(const DepthMap& pred, const DepthMap& gt,
                                  const DepthClamp& clamp = {}) {
  if (pred.width() != gt.width() || pred.height() != gt.height()) {
    throw Error(ErrorCode::ShapeMismatch, "pred/gt depth shape");
  }
  if (!(clamp.min > 0) || !(clamp.max > clamp.min)) {
    throw Error(ErrorCode::InvalidArgument, "depth clamp range");
  }
  double abs_rel = 0, sq_rel = 0, sq = 0, sq_log = 0;
  std::size_t d1 = 0, d2 = 0, d3 = 0, n = 0;
  for (std::size_t i = 0; i < gt.depth.size(); ++i) {
    if (!gt.mask.data[i] || !pred.mask.data[i]) continue;
    const double g = gt.depth.data[i];
    const double p = std::clamp(pred.depth.data[i], clamp.min, clamp.max);
    const double diff = p - g;
    abs_rel += std::abs(diff) / g;
    sq_rel += diff * diff / g;
    sq += diff * diff;
    const double dl = std::log(p) - std::log(g);
    sq_log += dl * dl;
    const double ratio = std::max(p / g, g / p);
    d1 += ratio < 1.25;
    d2 += ratio < 1.25 * 1.25;
    d3 += ratio < 1.25 * 1.25 * 1.25;
    ++n;
  }
  if (n == 0) throw Error(ErrorCode::EmptyMask, "no jointly valid depth pixel");
  const double dn = double(n);
  DepthMetrics m;
  m.abs_rel = abs_rel / dn;
  m.sq_rel = sq_rel / dn;
  m.rmse = std::sqrt(sq / dn);
  m.rmse_log = std::sqrt(sq_log / dn);
  m.delta1 = double(d1) / dn;
  m.delta2 = double(d2) / dn;
  m.delta3 = double(d3) / dn;
  m.n_pixels = n;
  m.n_frames = 1;
  return m;
}

/// Average of per-frame metrics; pixel counts are summed.
inline DepthMetrics aggregate(const std::vector<DepthMetrics>& frames) {
  DepthMetrics a;
  if (frames.empty()) return a;
  for (const auto& f : frames) {
    a.abs_rel += f.abs_rel;
    a.sq_rel += f.sq_rel;
    a.rmse += f.rmse;
    a.rmse_log += f.rmse_log;
    a.delta1 += f.delta1;
    a.delta2 += f.delta2;
    a.delta3 += f.delta3;
    a.n_pixels += f.n_pixels;
  }
  const double n = double(frames.size());
  a.abs_rel /= n;
  a.sq_rel /= n;
  a.rmse /= n;
  a.rmse_log /= n;
  a.delta1 /= n;
  a.delta2 /= n;
  a.delta3 /= n;
  a.n_frames = frames.size();
  return a;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  double rmse = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd s;
  if (v.empty()) return s;
  double sum = 0, sq = 0;
  for (double x : v) {
    sum += x;
    sq += x * x;
  }
  const double n = double(v.size());
  s.mean = sum / n;
  double var = 0;
  for (double x : v) var += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(var / n);
  s.rmse = std::sqrt(sq / n);
  return s;
}

struct RigidAlignment {
  PoseSE3 transform;  // maps source points onto target points
  double scale = 1.0;
  bool degenerate = false;
};

/// Least-squares rigid (optionally similarity) alignment of point sets.
/// Fewer than three non-collinear points fall back to translation only.
inline RigidAlignment align_points(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                   bool with_scale = false) {
  if (src.size() != dst.size() || src.empty()) {
    throw Error(ErrorCode::LengthMismatch, "alignment needs equally sized, non-empty sets");
  }
  const double n = double(src.size());
  Vec3 ms = Vec3::Zero(), md = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    ms += src[i];
    md += dst[i];
  }
  ms /= n;
  md /= n;
  Mat3 cov = Mat3::Zero();
  double var_s = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 a = src[i] - ms, b = dst[i] - md;
    cov += b * a.transpose();
    var_s += a.squaredNorm();
  }
  cov /= n;
  var_s /= n;

  RigidAlignment out;
  if (src.size() < 3) {
    out.degenerate = true;
    out.transform = PoseSE3::translation(md - ms);
    return out;
  }
  Eigen::JacobiSVD<Eigen::Matrix<double, Eigen::Dynamic, 3>> spread(
      [&] {
        Eigen::Matrix<double, Eigen::Dynamic, 3> m(src.size(), 3);
        for (std::size_t i = 0; i < src.size(); ++i) {
          m.row(Eigen::Index(i)) = (src[i] - ms).transpose();
        }
        return m;
      }());
  const auto sv = spread.singularValues();
  if (sv(0) <= 0 || sv(1) <= 1e-9 * sv(0)) {
    out.degenerate = true;
    out.transform = PoseSE3::translation(md - ms);
    return out;
  }
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 s = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) s(2, 2) = -1;
  const Mat3 r = svd.matrixU() * s * svd.matrixV().transpose();
  if (with_scale && var_s > 0) out.scale = (svd.singularValues().asDiagonal() * s).trace() / var_s;
  out.transform = PoseSE3(r, md - out.scale * r * ms);
  return out;
}

struct TrajectoryMetrics {
  double ate_rmse = 0.0, ate_mean = 0.0, ate_std = 0.0;  // mm
  double ate_unaligned_rmse = 0.0;
  double rte_mean = 0.0, rte_std = 0.0;  // mm
  double rre_mean = 0.0, rre_std = 0.0;  // degrees
  bool degenerate_alignment = false;
  double alignment_scale = 1.0;
  PoseSE3 alignment;
  std::size_t n_poses = 0;
};

struct TrajectoryOptions {
  int delta = 1;
  bool with_scale = false;
};

inline TrajectoryMetrics trajectory_metrics(const std::vector<PoseSE3>& est,
                                            const std::vector<PoseSE3>& gt,
                                            const TrajectoryOptions& opt = {}) {
  if (est.size() != gt.size()) {
    throw Error(ErrorCode::LengthMismatch, std::to_string(est.size()) + " estimated vs " +
                                               std::to_string(gt.size()) + " reference poses");
  }
  if (est.size() < 2) throw Error(ErrorCode::LengthMismatch, "need at least two poses");
  if (opt.delta < 1) throw Error(ErrorCode::InvalidArgument, "delta must be >= 1");
  TrajectoryMetrics m;
  m.n_poses = est.size();
  std::vector<Vec3> pe, pg;
  for (std::size_t i = 0; i < est.size(); ++i) {
    pe.push_back(est[i].translation());
    pg.push_back(gt[i].translation());
  }
  const RigidAlignment al = align_points(pe, pg, opt.with_scale);
  m.degenerate_alignment = al.degenerate;
  m.alignment = al.transform;
  m.alignment_scale = al.scale;
  std::vector<double> ate, raw;
  for (std::size_t i = 0; i < pe.size(); ++i) {
    const Vec3 aligned = al.transform.rotation() * (al.scale * pe[i]) + al.transform.translation();
    ate.push_back((aligned - pg[i]).norm());
    raw.push_back((pe[i] - pg[i]).norm());
  }
  const MeanStd a = mean_std(ate);
  m.ate_rmse = a.rmse;
  m.ate_mean = a.mean;
  m.ate_std = a.std;
  m.ate_unaligned_rmse = mean_std(raw).rmse;

  std::vector<double> rte, rre;
  const std::size_t d = std::size_t(opt.delta);
  for (std::size_t i = 0; i + d < est.size(); ++i) {
    const PoseSE3 rel_gt = gt[i].inverse() * gt[i + d];
    const PoseSE3 rel_est = est[i].inverse() * est[i + d];
    const PoseSE3 e = rel_gt.inverse() * rel_est;
    rte.push_back(e.translation().norm());
    rre.push_back(rad2deg(e.angle()));
  }
  const MeanStd t = mean_std(rte), r = mean_std(rre);
  m.rte_mean = t.mean;
  m.rte_std = t.std;
  m.rre_mean = r.mean;
  m.rre_std = r.std;
  return m;
}

struct CloudMetrics {
  double rmse = 0.0;  // mm
  std::size_t matched_points = 0;
  PoseSE3 registration;  // maps the estimated cloud into the reference frame
  int iterations = 0;
};

struct IcpConfig {
  double max_corr_dist = 3.0;  // mm
  int icp_iters = 50;
};

/// Uniform grid over a point set for fixed-radius nearest-neighbour queries.
class PointGrid {
 public:
  PointGrid(const std::vector<Vec3>& pts, double cell) : pts_(pts), cell_(cell) {
    for (std::size_t i = 0; i < pts.size(); ++i) cells_[key(cell_of(pts[i]))].push_back(i);
  }

  /// Nearest point within `radius`; ties resolve to the lowest index. Cells
  /// are scanned in rings of growing Chebyshev distance until no closer point
  /// can remain.
  std::pair<std::size_t, double> nearest(const Vec3& q, double radius) const {
    const auto c = cell_of(q);
    std::size_t best = npos;
    double best_d2 = radius * radius;
    const int rings = int(std::floor(radius / cell_)) + 1;
    for (int r = 0; r <= rings; ++r) {
      for (int dz = -r; dz <= r; ++dz)
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
            const auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
            if (it == cells_.end()) continue;
            for (std::size_t j : it->second) {
              const double d2 = (pts_[j] - q).squaredNorm();
              if (d2 < best_d2 || (d2 == best_d2 && j < best)) {
                best = j;
                best_d2 = d2;
              }
            }
          }
      // Points in later rings are at least r * cell away.
      if (best != npos && best_d2 < (r * cell_) * (r * cell_)) break;
    }
    return {best, best_d2};
  }

  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

 private:
  std::array<std::int64_t, 3> cell_of(const Vec3& p) const {
    return {std::int64_t(std::floor(p.x() / cell_)), std::int64_t(std::floor(p.y() / cell_)),
            std::int64_t(std::floor(p.z() / cell_))};
  }
  static std::uint64_t key(const std::array<std::int64_t, 3>& c) {
    return (std::uint64_t(c[0] & 0x1fffff) << 42) | (std::uint64_t(c[1] & 0x1fffff) << 21) |
           std::uint64_t(c[2] & 0x1fffff);
  }

  const std::vector<Vec3>& pts_;
  double cell_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

struct Correspondence {
  std::size_t src = 0;
  std::size_t dst = 0;
  double d2 = 0.0;
};

/// Gated nearest-neighbour pairs, at most one source point per target point
/// (the closest; ties to the lowest source index), ordered by source index.
inline std::vector<Correspondence> match_points(const std::vector<Vec3>& src,
                                                const PoseSE3& t, const PointGrid& grid,
                                                std::size_t n_dst, double max_dist) {
  std::vector<std::size_t> owner(n_dst, PointGrid::npos);
  std::vector<double> owner_d2(n_dst, 0.0);
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto [j, d2] = grid.nearest(t * src[i], max_dist);
    if (j == PointGrid::npos) continue;
    if (owner[j] == PointGrid::npos || d2 < owner_d2[j]) {
      owner[j] = i;
      owner_d2[j] = d2;
    }
  }
  std::vector<Correspondence> out;
  for (std::size_t j = 0; j < n_dst; ++j) {
    if (owner[j] != PointGrid::npos) out.push_back({owner[j], j, owner_d2[j]});
  }
  std::sort(out.begin(), out.end(),
            [](const Correspondence& a, const Correspondence& b) { return a.src < b.src; });
  return out;
}

/// Point-to-point ICP from identity, then RMSE over the final matched pairs.
inline CloudMetrics cloud_rmse(const std::vector<Vec3>& est, const std::vector<Vec3>& gt,
                               const IcpConfig& cfg = {}) {
  if (est.size() < 100 || gt.size() < 100) {
    throw Error(ErrorCode::InvalidArgument, "clouds need at least 100 points each");
  }
  if (!(cfg.max_corr_dist > 0) || cfg.icp_iters < 0) {
    throw Error(ErrorCode::InvalidArgument, "invalid ICP configuration");
  }
  const PointGrid grid(gt, cfg.max_corr_dist / 4.0);
  CloudMetrics m;
  PoseSE3 t;
  std::vector<Correspondence> prev;
  for (int it = 0; it < cfg.icp_iters; ++it) {
    auto corr = match_points(est, t, grid, gt.size(), cfg.max_corr_dist);
    if (corr.size() < 3) break;
    const bool same = corr.size() == prev.size() &&
                      std::equal(corr.begin(), corr.end(), prev.begin(),
                                 [](const Correspondence& a, const Correspondence& b) {
                                   return a.src == b.src && a.dst == b.dst;
                                 });
    if (same) break;  // the update would reproduce the current transform
    const bool exact = std::all_of(corr.begin(), corr.end(), [&](const Correspondence& c) {
      return t * est[c.src] == gt[c.dst];
    });
    if (exact) break;
    std::vector<Vec3> a, b;
    a.reserve(corr.size());
    b.reserve(corr.size());
    for (const auto& c : corr) {
      a.push_back(est[c.src]);
      b.push_back(gt[c.dst]);
    }
    t = align_points(a, b).transform;
    prev = std::move(corr);
    m.iterations = it + 1;
  }
  const auto final_corr = match_points(est, t, grid, gt.size(), cfg.max_corr_dist);
  const std::size_t min_size = std::min(est.size(), gt.size());
  if (final_corr.size() * 10 < min_size) {
    throw Error(ErrorCode::IcpDiverged, std::to_string(final_corr.size()) + " of " +
                                            std::to_string(min_size) + " points matched");
  }
  double sq = 0;
  for (const auto& c : final_corr) sq += (t * est[c.src] - gt[c.dst]).squaredNorm();
  m.rmse = std::sqrt(sq / double(final_corr.size()));
  m.matched_points = final_corr.size();
  m.registration = t;
  return m;
}

}  // namespace metricdepth
