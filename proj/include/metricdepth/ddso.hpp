#pragma once

// Depth-driven sliding optimization: per-pair scale samples from kinematic
// and image-space translation norms, a logarithmic moving average over a
// sliding window, and metric ensemble depth.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "metricdepth/error.hpp"
#include "metricdepth/geometry.hpp"
#include "metricdepth/imaging.hpp"
#include "metricdepth/kinematics.hpp"
#include "metricdepth/odometry.hpp"

namespace metricdepth {

struct ScaleSample {
  int frame_index = 0;  // later frame of the pair
  double r = 0.0;       // mm per relative-depth unit
  double kin_norm = 0.0;
  double img_norm = 0.0;
  bool valid = false;
};

enum class FilterStatus {
  Ok,
  InsufficientSamples,  // fewer than ceil((n-1)/2) valid samples in the nominal window
  PartialWindow,        // series start reached before n-1 valid samples were found
};

inline std::string to_string(FilterStatus s) {
  switch (s) {
    case FilterStatus::Ok: return "ok";
    case FilterStatus::InsufficientSamples: return "insufficient_samples";
    case FilterStatus::PartialWindow: return "partial_window";
  }
  return "unknown";
}

struct ScaleSeries {
  std::vector<ScaleSample> samples;
  std::vector<double> filtered;  // 0 where status != Ok
  std::vector<FilterStatus> status;
  int window_n = 10;

  bool filtered_valid(std::size_t i) const {
    return i < status.size() && status[i] == FilterStatus::Ok;
  }
};

struct ScaleThresholds {
  double min_img_norm = 1e-3;  // relative units
  double min_kin_norm = 1e-3;  // mm
};

/// r = |t_kin| / |t_img|; invalid on degenerate (near-zero) motion.
inline ScaleSample scale_sample(const PoseSE3& kin_rel, const PoseSE3& img_rel,
                                const ScaleThresholds& th = {}, int frame_index = 0) {
  if (!(th.min_img_norm > 0) || !(th.min_kin_norm > 0)) {
    throw Error(ErrorCode::InvalidArgument, "scale thresholds must be > 0");
  }
  ScaleSample s;
  s.frame_index = frame_index;
  s.kin_norm = kin_rel.translation().norm();
  s.img_norm = img_rel.translation().norm();
  s.valid = std::isfinite(s.kin_norm) && std::isfinite(s.img_norm) &&
            s.img_norm >= th.min_img_norm && s.kin_norm >= th.min_kin_norm;
  s.r = s.valid ? s.kin_norm / s.img_norm : 0.0;
  return s;
}

/// Logarithmic moving average: r~_i = 10^(mean of log10 r) over the n-1 most
/// recent valid samples ending at i. Invalid samples are skipped and the
/// window extends backward to replace them.
inline ScaleSeries lma_filter(ScaleSeries series, int n) {
  if (n < 2) throw Error(ErrorCode::InvalidArgument, "window n must be >= 2");
  series.window_n = n;
  const std::size_t m = series.samples.size();
  const std::size_t need = std::size_t(n - 1);
  const std::size_t min_nominal = (need + 1) / 2;
  series.filtered.assign(m, 0.0);
  series.status.assign(m, FilterStatus::PartialWindow);
  std::size_t any_valid = 0;
  for (const auto& s : series.samples) any_valid += s.valid;
  if (any_valid < need) {
    throw Error(ErrorCode::InsufficientSamples,
                "series has " + std::to_string(any_valid) + " valid samples, window needs " +
                    std::to_string(need));
  }
  std::vector<double> window;
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t nominal = 0;
    for (std::size_t k = 0; k < need && k <= i; ++k) nominal += series.samples[i - k].valid;
    if (nominal < min_nominal) {
      series.status[i] = FilterStatus::InsufficientSamples;
      continue;
    }
    window.clear();
    for (std::size_t k = 0; k <= i && window.size() < need; ++k) {
      const auto& s = series.samples[i - k];
      if (s.valid) window.push_back(s.r);
    }
    if (window.size() < need) continue;
    // Sorted and relative to the smallest sample: order-independent, exact on
    // constant windows and never outside [min, max].
    std::sort(window.begin(), window.end());
    const double lo = window.front(), hi = window.back();
    double sum = 0.0;
    for (double r : window) sum += std::log10(r / lo);
    series.filtered[i] = std::clamp(lo * std::pow(10.0, sum / double(window.size())), lo, hi);
    series.status[i] = FilterStatus::Ok;
  }
  return series;
}

/// Filtered scale for every frame of a sequence with frame_count frames.
/// Sample k (pair k -> k+1) serves frame k+1. Frames before the first valid
/// filtered value take that value when `backfill` is set; later gaps take the
/// most recent valid value.
inline std::vector<std::optional<double>> per_frame_scale(const ScaleSeries& series,
                                                          std::size_t frame_count,
                                                          bool backfill = true) {
  std::vector<std::optional<double>> out(frame_count);
  std::optional<double> first, last;
  for (std::size_t k = 0; k < series.samples.size(); ++k) {
    if (series.filtered_valid(k)) {
      first = series.filtered[k];
      break;
    }
  }
  for (std::size_t f = 0; f < frame_count; ++f) {
    if (f >= 1 && f - 1 < series.samples.size() && series.filtered_valid(f - 1)) {
      last = series.filtered[f - 1];
      out[f] = last;
    } else if (last) {
      out[f] = last;
    } else if (backfill) {
      out[f] = first;
    }
  }
  return out;
}

/// D_ensem = r~ * D_unsup, metric units.
inline DepthMap ensemble_depth(const DepthMap& relative, double r_filtered) {
  if (!(r_filtered > 0) || !std::isfinite(r_filtered)) {
    throw Error(ErrorCode::InvalidArgument, "scale must be finite and > 0");
  }
  if (relative.units != DepthUnits::Relative) {
    throw Error(ErrorCode::UnitMismatch, "ensemble input must be relative depth");
  }
  DepthMap out = relative;
  out.units = DepthUnits::Millimetres;
  for (std::size_t i = 0; i < out.depth.size(); ++i) {
    if (out.mask.data[i]) out.depth.data[i] *= r_filtered;
  }
  return out;
}

struct DdsoConfig {
  int window_n = 10;
  OdometryConfig odometry;
  ScaleThresholds thresholds;
  double max_dt = 0.05;  // s, image/kinematics association tolerance
  bool interpolate_kinematics = false;
  /// Samples whose image-space rotation exceeds this angle are dropped (0 = off).
  double max_rotation_deg = 0.0;

  void validate() const {
    if (window_n < 2) throw Error(ErrorCode::InvalidArgument, "window_n must be >= 2");
    if (!(max_dt > 0)) throw Error(ErrorCode::InvalidArgument, "max_dt must be > 0");
    if (!(max_rotation_deg >= 0)) throw Error(ErrorCode::InvalidArgument, "max_rotation_deg");
    odometry.validate();
  }
};

struct PairError {
  int frame_index = 0;  // later frame of the pair
  std::string stage;
  std::string message;
};

struct DdsoResult {
  ScaleSeries series;
  std::vector<PoseSE3> image_poses;  // pair k: maps frame-k points into frame k+1
  std::vector<bool> pose_valid;
  std::vector<OdometryDiagnostics> diagnostics;
  std::vector<PairError> errors;
  bool filter_ok = true;
};

/// Relative image-space motion for every consecutive pair.
inline void estimate_image_poses(const std::vector<Frame>& frames, const OdometryConfig& cfg,
                                 DdsoResult& out) {
  const std::size_t pairs = frames.size() < 2 ? 0 : frames.size() - 1;
  out.image_poses.assign(pairs, PoseSE3());
  out.pose_valid.assign(pairs, false);
  out.diagnostics.assign(pairs, {});
  for (std::size_t k = 0; k < pairs; ++k) {
    try {
      const auto r = estimate_pose(frames[k], frames[k + 1], PoseSE3::identity(), cfg);
      out.image_poses[k] = r.pose;
      out.diagnostics[k] = r.diagnostics;
      out.pose_valid[k] = true;
    } catch (const Error& e) {
      out.errors.push_back({frames[k + 1].index, "odometry", e.what()});
    }
  }
}

/// Batch DDSO over a frame sequence paired with a kinematics trajectory.
inline DdsoResult run_ddso(const std::vector<Frame>& frames, const KinematicsTrajectory& kin,
                           const DdsoConfig& cfg = {}) {
  cfg.validate();
  if (frames.size() < 2) throw Error(ErrorCode::InvalidArgument, "need at least two frames");
  DdsoResult out;
  estimate_image_poses(frames, cfg.odometry, out);

  std::vector<double> stamps;
  for (const auto& f : frames) stamps.push_back(f.timestamp);
  const TimestampAlignment align = align_by_timestamp(kin, stamps, cfg.max_dt);
  for (std::size_t i : align.unmatched) {
    out.errors.push_back({frames[i].index, "alignment",
                          std::string(to_string(ErrorCode::NoMatchWithinTolerance))});
  }

  out.series.window_n = cfg.window_n;
  for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
    ScaleSample s;
    s.frame_index = frames[k + 1].index;
    const bool matched = align.index[k] && align.index[k + 1];
    if (out.pose_valid[k] && (matched || cfg.interpolate_kinematics)) {
      PoseSE3 kin_rel;
      if (cfg.interpolate_kinematics) {
        kin_rel = interpolate_pose(kin, frames[k].timestamp).inverse() *
                  interpolate_pose(kin, frames[k + 1].timestamp);
      } else {
        kin_rel = relative_pose(kin, *align.index[k], *align.index[k + 1]);
      }
      s = scale_sample(kin_rel, out.image_poses[k], cfg.thresholds, frames[k + 1].index);
      if (cfg.max_rotation_deg > 0 && rad2deg(out.image_poses[k].angle()) > cfg.max_rotation_deg) {
        s.valid = false;
        s.r = 0.0;
      }
    }
    out.series.samples.push_back(s);
  }
  try {
    out.series = lma_filter(out.series, cfg.window_n);
  } catch (const Error& e) {
    out.filter_ok = false;
    out.series.filtered.assign(out.series.samples.size(), 0.0);
    out.series.status.assign(out.series.samples.size(), FilterStatus::InsufficientSamples);
    out.errors.push_back({frames.back().index, "lma_filter", e.what()});
  }
  return out;
}

/// CSV with header "frame_index,r_raw,r_filtered,valid"; `valid` is the raw
/// sample flag and r_filtered is 0 where the filter has no value.
inline void write_scale_csv(std::ostream& out, const ScaleSeries& series) {
  out << "frame_index,r_raw,r_filtered,valid\n";
  char buf[128];
  for (std::size_t k = 0; k < series.samples.size(); ++k) {
    const auto& s = series.samples[k];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%d\n", s.frame_index, s.r,
                  k < series.filtered.size() ? series.filtered[k] : 0.0,
                  s.valid ? 1 : 0);
    out << buf;
  }
}

}  // namespace metricdepth
