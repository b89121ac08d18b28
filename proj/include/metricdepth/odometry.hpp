#pragma once

// Frame-to-frame pose estimation from geometric (depth) and photometric
// reprojection residuals. Levenberg-Marquardt damped Gauss-Newton on se(3)
// with Huber-robustified residuals over a coarse-to-fine pyramid.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "metricdepth/error.hpp"
#include "metricdepth/geometry.hpp"
#include "metricdepth/imaging.hpp"
#include "metricdepth/parallel.hpp"

namespace metricdepth {

/// Brightness-calibrated image with its relative depth.
struct Frame {
  ImageGray image;
  DepthMap depth;
  Intrinsics intrinsics;
  int index = 0;
  double timestamp = 0.0;
};

struct OdometryConfig {
  int pyramid_levels = 3;
  int max_iters_per_level = 30;
  double huber_delta_photo = 0.05;
  double huber_delta_geo = 0.1;
  double w_geo = 1.0;
  double w_photo = 1.0;
  double convergence_eps = 1e-7;
  int min_valid_pixels = 500;
  /// Fraction of the highest-gradient pixels used at the finest level (1 = all).
  double finest_gradient_fraction = 1.0;
  /// Geometric residuals above this multiple of huber_delta_geo are dropped
  /// (finest level only).
  double outlier_gate = 10.0;
  int max_rejected_steps = 5;

  void validate() const {
    if (pyramid_levels < 1 || max_iters_per_level < 1 || !(huber_delta_photo > 0) ||
        !(huber_delta_geo > 0) || !(w_geo >= 0) || !(w_photo >= 0) || !(w_geo + w_photo > 0) ||
        !(convergence_eps > 0) || min_valid_pixels < 1 || !(finest_gradient_fraction > 0) ||
        finest_gradient_fraction > 1 || !(outlier_gate > 0) || max_rejected_steps < 1) {
      throw Error(ErrorCode::InvalidArgument, "invalid odometry configuration");
    }
  }
};

struct OdometryDiagnostics {
  std::vector<int> iterations_per_level;  // coarsest first
  double final_cost = 0.0;
  std::size_t valid_pixels = 0;  // valid residual pixels at the finest level
  bool converged = false;
};

struct OdometryResult {
  PoseSE3 pose;  // maps points of frame i into frame j
  OdometryDiagnostics diagnostics;
};

struct Residual {
  double value = 0.0;
  bool valid = false;
};

using Jacobian6 = Eigen::Matrix<double, 1, 6>;

/// Both residuals at one pixel with their derivatives w.r.t. a left
/// perturbation exp(xi) * T.
struct ResidualTerms {
  Residual geo;
  Residual photo;
  Jacobian6 j_geo = Jacobian6::Zero();
  Jacobian6 j_photo = Jacobian6::Zero();
};

namespace detail {

inline ResidualTerms evaluate_terms(const ImageGray& img_j, const DepthMap& depth_j,
                                    const Intrinsics& k, const PoseSE3& t, const PixelCoord& p,
                                    double depth, double intensity, bool want_jacobian) {
  ResidualTerms out;
  const Point3 x = t * backproject(p, depth, k);
  if (x.z() <= 1e-9) return out;
  const PixelCoord q = project(x, k);
  const GradientSample si = bilinear_sample_gradient(img_j, q);
  const GradientSample sd = bilinear_sample_gradient(depth_j, q);
  if (!si.valid && !sd.valid) return out;

  Eigen::Matrix<double, 2, 6> jpix;
  if (want_jacobian) {
    const double iz = 1.0 / x.z();
    Eigen::Matrix<double, 2, 3> jproj;
    jproj << k.fx * iz, 0, -k.fx * x.x() * iz * iz, 0, k.fy * iz, -k.fy * x.y() * iz * iz;
    Eigen::Matrix<double, 3, 6> jpt;
    jpt.leftCols<3>() = -hat(x);
    jpt.rightCols<3>().setIdentity();
    jpix = jproj * jpt;
  }
  if (si.valid) {
    out.photo = {si.value - intensity, true};
    if (want_jacobian) out.j_photo = si.du * jpix.row(0) + si.dv * jpix.row(1);
  }
  if (sd.valid) {
    out.geo = {sd.value - x.z(), true};
    if (want_jacobian) {
      Jacobian6 jz;
      jz << x.y(), -x.x(), 0, 0, 0, 1;
      out.j_geo = sd.du * jpix.row(0) + sd.dv * jpix.row(1) - jz;
    }
  }
  return out;
}

inline double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

inline double huber_weight(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 1.0 : delta / a;
}

struct Level {
  ImageGray image_i, image_j;
  DepthMap depth_i, depth_j;
  Intrinsics k;
  std::vector<int> pixels;  // linear indices of selected pixels in frame i
};

struct Accumulator {
  Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
  Eigen::Matrix<double, 6, 1> b = Eigen::Matrix<double, 6, 1>::Zero();
  double cost = 0.0;
  std::size_t valid = 0;

  void add(const Accumulator& o) {
    h += o.h;
    b += o.b;
    cost += o.cost;
    valid += o.valid;
  }
};

inline constexpr std::size_t kPixelBlock = 2048;

/// Per-pixel cost and a code of which raw residuals were sampled
/// (bit 0 geometric, bit 1 photometric).
struct PixelCosts {
  std::vector<double> cost;
  std::vector<std::uint8_t> code;
};

/// Sums of both cost vectors over pixels with identical, non-zero codes, so a
/// pixel entering or leaving the view does not make the comparison jump.
inline std::pair<double, double> common_costs(const PixelCosts& a, const PixelCosts& b) {
  double sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < a.cost.size(); ++i) {
    if (a.code[i] == 0 || a.code[i] != b.code[i]) continue;
    sa += a.cost[i];
    sb += b.cost[i];
  }
  return {sa, sb};
}

inline Accumulator accumulate(const Level& lv, const PoseSE3& t, const OdometryConfig& cfg,
                              bool gate, bool want_jacobian, PixelCosts* pixel = nullptr) {
  const std::size_t n = lv.pixels.size();
  std::vector<Accumulator> parts(block_count(n, kPixelBlock));
  const double dg = cfg.huber_delta_geo, dp = cfg.huber_delta_photo;
  const double gate_abs = cfg.outlier_gate * dg;
  // Missing or gated residuals pay a constant truncation cost so that moving
  // pixels out of view is never free.
  const double geo_penalty = cfg.w_geo * huber(gate_abs, dg);
  const double photo_penalty = cfg.w_photo * huber(cfg.outlier_gate * dp, dp);
  if (pixel) {
    pixel->cost.assign(n, 0.0);
    pixel->code.assign(n, 0);
  }
  parallel_for_blocks(n, kPixelBlock, [&](std::size_t b0, std::size_t b1, std::size_t blk) {
    Accumulator& acc = parts[blk];
    for (std::size_t s = b0; s < b1; ++s) {
      const int idx = lv.pixels[s];
      const int x = idx % lv.k.width, y = idx / lv.k.width;
      const ResidualTerms r =
          evaluate_terms(lv.image_j, lv.depth_j, lv.k, t,
                         {double(x), double(y)}, lv.depth_i(x, y), lv.image_i(x, y), want_jacobian);
      // A gated geometric residual marks the pixel as occluded for both terms.
      const bool occluded = gate && r.geo.valid && std::abs(r.geo.value) > gate_abs;
      const bool geo_ok = r.geo.valid && !occluded;
      const bool photo_ok = r.photo.valid && !occluded;
      const double cost_before = acc.cost;
      if (cfg.w_geo > 0) {
        if (geo_ok) {
          acc.cost += cfg.w_geo * huber(r.geo.value, dg);
          if (want_jacobian) {
            const double w = cfg.w_geo * huber_weight(r.geo.value, dg);
            acc.h.selfadjointView<Eigen::Upper>().rankUpdate(r.j_geo.transpose(), w);
            acc.b += w * r.geo.value * r.j_geo.transpose();
          }
        } else {
          acc.cost += geo_penalty;
        }
      }
      if (cfg.w_photo > 0) {
        if (photo_ok) {
          acc.cost += cfg.w_photo * huber(r.photo.value, dp);
          if (want_jacobian) {
            const double w = cfg.w_photo * huber_weight(r.photo.value, dp);
            acc.h.selfadjointView<Eigen::Upper>().rankUpdate(r.j_photo.transpose(), w);
            acc.b += w * r.photo.value * r.j_photo.transpose();
          }
        } else {
          acc.cost += photo_penalty;
        }
      }
      if ((cfg.w_geo > 0 && geo_ok) || (cfg.w_photo > 0 && photo_ok)) ++acc.valid;
      if (pixel) {
        pixel->cost[s] = acc.cost - cost_before;
        pixel->code[s] = std::uint8_t((r.geo.valid ? 1 : 0) | (r.photo.valid ? 2 : 0));
      }
    }
  });
  Accumulator total;
  for (const auto& p : parts) total.add(p);
  total.h.triangularView<Eigen::StrictlyLower>() = total.h.transpose();
  return total;
}

inline std::vector<int> select_pixels(const ImageGray& img, const DepthMap& depth,
                                      double fraction) {
  std::vector<int> px;
  px.reserve(depth.valid_count());
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      if (depth.valid(x, y)) px.push_back(y * depth.width() + x);
    }
  }
  if (fraction >= 1.0 || px.size() < 2) return px;
  auto grad = [&](int idx) {
    const int x = idx % img.width, y = idx / img.width;
    const double gx = img(std::min(x + 1, img.width - 1), y) - img(std::max(x - 1, 0), y);
    const double gy = img(x, std::min(y + 1, img.height - 1)) - img(x, std::max(y - 1, 0));
    return gx * gx + gy * gy;
  };
  std::vector<std::pair<double, int>> g;
  g.reserve(px.size());
  for (int idx : px) g.emplace_back(-grad(idx), idx);
  const std::size_t keep = std::max<std::size_t>(1, std::size_t(fraction * double(px.size())));
  std::nth_element(g.begin(), g.begin() + (keep - 1), g.end());
  g.resize(keep);
  px.clear();
  for (const auto& e : g) px.push_back(e.second);
  std::sort(px.begin(), px.end());
  return px;
}

}  // namespace detail

/// Residual terms and Jacobians at pixel p of frame i (exposed for testing).
inline ResidualTerms residual_terms(const Frame& fi, const Frame& fj, const PoseSE3& t,
                                    const PixelCoord& p) {
  const Sample d = bilinear_sample(fi.depth, p);
  const Sample i = bilinear_sample(fi.image, p);
  if (!d.valid || !i.valid) return {};
  return detail::evaluate_terms(fj.image, fj.depth, fi.intrinsics, t, p,
                                d.value, i.value, true);
}

/// E_geo = D_j(W(p, T)) - |T pi^-1(p, D_i(p))|_z.
inline Residual geo_residual(const Frame& fi, const Frame& fj, const PoseSE3& t,
                             const PixelCoord& p) {
  return residual_terms(fi, fj, t, p).geo;
}

/// E_photo = I_j(W(p, T)) - I_i(p).
inline Residual photo_residual(const Frame& fi, const Frame& fj, const PoseSE3& t,
                               const PixelCoord& p) {
  return residual_terms(fi, fj, t, p).photo;
}

/// Estimates the rigid motion mapping frame-i points into frame j.
inline OdometryResult estimate_pose(const Frame& fi, const Frame& fj,
                                    const PoseSE3& init = PoseSE3::identity(),
                                    const OdometryConfig& cfg = {}) {
  cfg.validate();
  const Intrinsics& k0 = fi.intrinsics;
  if (fj.intrinsics.width != k0.width || fj.intrinsics.height != k0.height ||
      !fi.image.same_shape(fi.depth.depth) || !fj.image.same_shape(fj.depth.depth) ||
      fi.image.width != k0.width || fi.image.height != k0.height ||
      !fi.image.same_shape(fj.image)) {
    throw Error(ErrorCode::ShapeMismatch, "frames do not share intrinsics/shape");
  }

  std::vector<detail::Level> levels(1);
  levels[0] = {fi.image, fj.image, fi.depth, fj.depth, k0, {}};
  for (int l = 1; l < cfg.pyramid_levels; ++l) {
    const auto& prev = levels.back();
    if (prev.k.width < 16 || prev.k.height < 16) break;
    levels.push_back({downsample(prev.image_i), downsample(prev.image_j),
                      downsample(prev.depth_i), downsample(prev.depth_j), prev.k.downsampled(),
                      {}});
  }
  for (std::size_t l = 0; l < levels.size(); ++l) {
    levels[l].pixels = detail::select_pixels(levels[l].image_i, levels[l].depth_i,
                                             l == 0 ? cfg.finest_gradient_fraction : 1.0);
  }

  OdometryResult res;
  PoseSE3 t = init;
  for (int l = int(levels.size()) - 1; l >= 0; --l) {
    const auto& lv = levels[l];
    const bool finest = l == 0;
    const bool gate = finest;
    double lambda = 1e-4;
    int iters = 0, rejected = 0;
    bool converged = false;
    detail::PixelCosts cur_px, next_px;
    detail::Accumulator acc = detail::accumulate(lv, t, cfg, gate, true, &cur_px);
    if (!finest && acc.valid < 12) {
      res.diagnostics.iterations_per_level.push_back(0);
      continue;
    }
    while (iters < cfg.max_iters_per_level) {
      ++iters;
      Eigen::Matrix<double, 6, 6> a = acc.h;
      a.diagonal() += lambda * acc.h.diagonal().cwiseMax(1e-12);
      const Twist step = a.ldlt().solve(-acc.b);
      if (!step.allFinite()) throw Error(ErrorCode::Diverged, "non-finite Gauss-Newton step");
      if (step.norm() < cfg.convergence_eps) {
        converged = true;
        break;
      }
      const PoseSE3 trial = se3_exp(step) * t;
      const detail::Accumulator next = detail::accumulate(lv, trial, cfg, gate, true, &next_px);
      if (!std::isfinite(next.cost)) throw Error(ErrorCode::Diverged, "non-finite cost");
      const auto [cur_cost, next_cost] = detail::common_costs(cur_px, next_px);
      if (next_cost <= cur_cost) {
        t = trial;
        acc = next;
        std::swap(cur_px, next_px);
        lambda = std::max(lambda * 0.1, 1e-8);
        rejected = 0;
      } else {
        lambda *= 10.0;
        // Repeated rejections mean the cost is at its numerical floor.
        if (++rejected >= cfg.max_rejected_steps) {
          converged = true;
          break;
        }
      }
    }
    res.diagnostics.iterations_per_level.push_back(iters);
    if (finest) {
      if (acc.valid < std::size_t(cfg.min_valid_pixels)) {
        throw Error(ErrorCode::InsufficientOverlap,
                    "only " + std::to_string(acc.valid) + " valid residuals");
      }
      res.diagnostics.final_cost = acc.cost;
      res.diagnostics.valid_pixels = acc.valid;
      res.diagnostics.converged = converged;
    }
  }
  res.pose = t;
  return res;
}

/// Robust finest-level cost of `t` as minimized by estimate_pose.
inline double pose_cost(const Frame& fi, const Frame& fj, const PoseSE3& t,
                        const OdometryConfig& cfg = {}) {
  cfg.validate();
  detail::Level lv{fi.image, fj.image, fi.depth, fj.depth, fi.intrinsics, {}};
  lv.pixels = detail::select_pixels(lv.image_i, lv.depth_i, cfg.finest_gradient_fraction);
  return detail::accumulate(lv, t, cfg, true, false).cost;
}

/// Finest-level costs of two poses over the pixels sampled identically by both.
inline std::pair<double, double> compare_poses(const Frame& fi, const Frame& fj,
                                               const PoseSE3& a, const PoseSE3& b,
                                               const OdometryConfig& cfg = {}) {
  cfg.validate();
  detail::Level lv{fi.image, fj.image, fi.depth, fj.depth, fi.intrinsics, {}};
  lv.pixels = detail::select_pixels(lv.image_i, lv.depth_i, cfg.finest_gradient_fraction);
  detail::PixelCosts pa, pb;
  detail::accumulate(lv, a, cfg, true, false, &pa);
  detail::accumulate(lv, b, cfg, true, false, &pb);
  return detail::common_costs(pa, pb);
}

}  // namespace metricdepth
