#pragma once

// End-to-end orchestration: calibration -> odometry -> scale recovery ->
// ensemble export -> fusion -> metrics, plus the synthetic dataset writer
// that produces inputs in the same layout.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "metricdepth/config.hpp"
#include "metricdepth/ddso.hpp"
#include "metricdepth/distill.hpp"
#include "metricdepth/fusion.hpp"
#include "metricdepth/io.hpp"
#include "metricdepth/kinematics.hpp"
#include "metricdepth/metrics.hpp"
#include "metricdepth/synthdata.hpp"

namespace metricdepth {

// ---------------------------------------------------------------- dataset

struct DatasetOptions {
  int cloud_stride = 1;  // pixel stride of the reference cloud (frame 0)
};

/// Writes a rendered sequence as images/*.png (16 bit), depth_rel/*.pfm,
/// depth_gt/*.pfm, flow/*.pfm (brightness enabled only), groundtruth.tum,
/// kinematics.tum, gt_cloud.ply, manifest.json and pipeline.json.
inline void write_dataset(const synth::SyntheticSequence& seq, const std::string& dir,
                          const DatasetOptions& opt = {}) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  const bool with_flow = seq.spec.brightness.enabled;
  std::error_code ec;
  for (const char* sub : {"images", "depth_rel", "depth_gt"}) fs::create_directories(root / sub, ec);
  if (with_flow) fs::create_directories(root / "flow", ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir + ": " + ec.message());

  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const auto& f = seq.frames[i];
    const int idx = int(i);
    io::write_image_png((root / "images" / io::frame_name(idx, ".png")).string(), f.observed);
    io::write_depth_pfm((root / "depth_rel" / io::frame_name(idx, ".pfm")).string(), f.depth_rel);
    io::write_depth_pfm((root / "depth_gt" / io::frame_name(idx, ".pfm")).string(), f.depth_mm);
    if (with_flow) io::write_pfm((root / "flow" / io::frame_name(idx, ".pfm")).string(), f.flow);
  }
  save_trajectory((root / "groundtruth.tum").string(), seq.ground_truth);
  save_trajectory((root / "kinematics.tum").string(), seq.kinematics);

  // Reference surface samples in the first camera frame.
  const auto& f0 = seq.frames.front();
  const Intrinsics& k = seq.spec.intrinsics;
  std::vector<io::CloudPoint> cloud;
  for (int y = 0; y < k.height; y += opt.cloud_stride) {
    for (int x = 0; x < k.width; x += opt.cloud_stride) {
      if (!f0.depth_mm.valid(x, y)) continue;
      cloud.push_back({backproject({double(x), double(y)}, f0.depth_mm(x, y), k), Vec3::Zero(),
                       f0.image(x, y), 1.0});
    }
  }
  io::write_ply((root / "gt_cloud.ply").string(), cloud);

  Json manifest;
  manifest["frame_count"] = seq.frames.size();
  manifest["intrinsics"] = to_json(k);
  manifest["true_scale"] = seq.spec.true_scale;
  manifest["frame_interval"] = seq.spec.frame_interval;
  manifest["image_bit_depth"] = 16;
  manifest["depth_format"] = "pfm";
  manifest["depth_png_mm_per_unit"] = io::kDepthPngMmPerUnit;
  manifest["depth_units"] = {{"depth_rel", "relative"}, {"depth_gt", "mm"}};
  manifest["flow"] = with_flow;
  manifest["scene"] = to_json(seq.spec);
  io::write_text((root / "manifest.json").string(), manifest.dump(2) + "\n");

  PipelineConfig cfg;
  cfg.inputs.images = "images";
  cfg.inputs.depth = "depth_rel";
  cfg.inputs.flow = with_flow ? "flow" : "";
  cfg.inputs.kinematics = "kinematics.tum";
  cfg.inputs.ground_truth = "groundtruth.tum";
  cfg.inputs.gt_depth = "depth_gt";
  cfg.inputs.gt_cloud = "gt_cloud.ply";
  cfg.inputs.frame_interval = seq.spec.frame_interval;
  cfg.intrinsics = k;
  cfg.quality.reference_scale = seq.spec.true_scale;
  cfg.seed = seq.spec.seed;
  io::write_text((root / "pipeline.json").string(), to_json(cfg).dump(2) + "\n");
}

// ---------------------------------------------------------------- pipeline

struct PipelineOutcome {
  int exit_code = 0;  // 0 ok, 3 degraded
  Json report;
};

namespace detail {

inline Json depth_json(const DepthMetrics& m) {
  return {{"abs_rel", m.abs_rel}, {"sq_rel", m.sq_rel},   {"rmse", m.rmse},
          {"rmse_log", m.rmse_log}, {"delta1", m.delta1}, {"delta2", m.delta2},
          {"delta3", m.delta3},   {"n_pixels", m.n_pixels}, {"n_frames", m.n_frames}};
}

inline Json trajectory_json(const TrajectoryMetrics& m) {
  return {{"ate_rmse", m.ate_rmse},
          {"ate_mean", m.ate_mean},
          {"ate_std", m.ate_std},
          {"ate_unaligned_rmse", m.ate_unaligned_rmse},
          {"rte_mean", m.rte_mean},
          {"rte_std", m.rte_std},
          {"rre_mean_deg", m.rre_mean},
          {"rre_std_deg", m.rre_std},
          {"degenerate_alignment", m.degenerate_alignment},
          {"alignment_scale", m.alignment_scale},
          {"n_poses", m.n_poses}};
}

inline Json cloud_json(const CloudMetrics& m) {
  return {{"rmse", m.rmse}, {"matched_points", m.matched_points}, {"iterations", m.iterations}};
}

struct PosePairs {
  std::vector<double> timestamps;
  std::vector<PoseSE3> est, ref;
};

/// Pairs estimated poses with reference poses by nearest timestamp; both
/// trajectories are re-anchored at their first matched pose.
inline PosePairs pair_trajectories(const KinematicsTrajectory& est,
                                   const KinematicsTrajectory& ref, double max_dt) {
  std::vector<double> stamps;
  for (const auto& e : est.entries) stamps.push_back(e.timestamp);
  const TimestampAlignment al = align_by_timestamp(ref, stamps, max_dt);
  PosePairs out;
  for (std::size_t i = 0; i < est.size(); ++i) {
    if (!al.index[i]) continue;
    out.timestamps.push_back(stamps[i]);
    out.est.push_back(est.pose(i));
    out.ref.push_back(ref.pose(*al.index[i]));
  }
  if (out.est.size() < 2) {
    throw Error(ErrorCode::NoMatchWithinTolerance, "fewer than two matched poses");
  }
  const PoseSE3 e0 = out.est.front().inverse(), g0 = out.ref.front().inverse();
  for (auto& p : out.est) p = e0 * p;
  for (auto& p : out.ref) p = g0 * p;
  return out;
}

inline TrajectoryMetrics evaluate_against(const KinematicsTrajectory& est,
                                          const KinematicsTrajectory& ref, double max_dt,
                                          const TrajectoryOptions& opt) {
  const PosePairs p = pair_trajectories(est, ref, max_dt);
  return trajectory_metrics(p.est, p.ref, opt);
}

inline std::vector<std::string> require_files(const std::string& dir, const std::string& ext,
                                              const std::string& what) {
  auto files = io::list_files(dir, ext);
  if (files.empty()) throw Error(ErrorCode::IoError, "no " + ext + " files in " + what + " " + dir);
  return files;
}

}  // namespace detail

/// Runs every stage and writes scales.csv, poses_est.tum, poses_fused.tum,
/// ensemble/, cloud.ply and report.json into the output directory. Stage
/// failures are collected into the report; input I/O errors propagate.
inline PipelineOutcome run_pipeline(const PipelineConfig& cfg, std::ostream* summary = nullptr,
                                    std::ostream* diag = nullptr) {
  namespace fs = std::filesystem;
  cfg.validate();
  auto say = [&](const std::string& s) {
    if (summary) *summary << s << "\n";
  };
  auto warn = [&](const std::string& s) {
    if (diag) *diag << s << "\n";
  };
  const fs::path out_dir = cfg.resolve(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + out_dir.string());

  Json errors = Json::array();
  auto record = [&](const std::string& stage, int frame, const std::string& msg) {
    errors.push_back({{"stage", stage}, {"frame_index", frame}, {"message", msg}});
    warn(stage + " (frame " + std::to_string(frame) + "): " + msg);
  };
  Json stages;
  bool degraded = false;

  // -- load
  const auto image_files = detail::require_files(cfg.resolve(cfg.inputs.images), ".png", "images");
  const auto depth_files = detail::require_files(cfg.resolve(cfg.inputs.depth), ".pfm", "depth");
  if (image_files.size() != depth_files.size()) {
    throw Error(ErrorCode::LengthMismatch, std::to_string(image_files.size()) + " images vs " +
                                               std::to_string(depth_files.size()) + " depths");
  }
  const std::size_t n = image_files.size();
  std::vector<Frame> frames(n);
  for (std::size_t i = 0; i < n; ++i) {
    frames[i].image = io::read_image_png(image_files[i]);
    frames[i].depth = io::read_depth_pfm(depth_files[i], DepthUnits::Relative);
    frames[i].intrinsics = cfg.intrinsics;
    frames[i].index = int(i);
    frames[i].timestamp = cfg.inputs.first_timestamp + double(i) * cfg.inputs.frame_interval;
    if (frames[i].image.width != cfg.intrinsics.width ||
        frames[i].image.height != cfg.intrinsics.height ||
        !frames[i].image.same_shape(frames[i].depth.depth)) {
      throw Error(ErrorCode::ShapeMismatch, "frame " + std::to_string(i) +
                                                " does not match the configured intrinsics");
    }
  }

  // -- calibration
  if (!cfg.inputs.flow.empty()) {
    const auto flow_files = detail::require_files(cfg.resolve(cfg.inputs.flow), ".pfm", "flow");
    if (flow_files.size() != n) throw Error(ErrorCode::LengthMismatch, "flow count");
    for (std::size_t i = 0; i < n; ++i) {
      frames[i].image = apply_appearance_flow(frames[i].image, io::read_pfm(flow_files[i]));
    }
    stages["calibration"] = {{"status", "ok"}, {"flows", n}};
  } else {
    stages["calibration"] = {{"status", "skipped"}};
  }

  // -- odometry and scale
  const bool have_kin = !cfg.inputs.kinematics.empty() &&
                        fs::exists(cfg.resolve(cfg.inputs.kinematics));
  DdsoResult ddso;
  if (n < 2) throw Error(ErrorCode::InvalidArgument, "need at least two frames");
  if (have_kin) {
    const KinematicsTrajectory kin = load_trajectory(cfg.resolve(cfg.inputs.kinematics));
    ddso = run_ddso(frames, kin, cfg.ddso);
  } else {
    estimate_image_poses(frames, cfg.ddso.odometry, ddso);
    for (std::size_t k = 0; k + 1 < n; ++k) {
      ddso.series.samples.push_back({frames[k + 1].index, 0.0, 0.0, 0.0, false});
    }
    ddso.series.filtered.assign(n - 1, 0.0);
    ddso.series.status.assign(n - 1, FilterStatus::InsufficientSamples);
    ddso.filter_ok = false;
  }
  for (const auto& e : ddso.errors) record(e.stage == "lma_filter" ? "scale" : e.stage, e.frame_index, e.message);

  std::size_t failed_pairs = 0;
  double mean_valid = 0.0;
  for (std::size_t k = 0; k < ddso.pose_valid.size(); ++k) {
    if (!ddso.pose_valid[k]) ++failed_pairs;
    mean_valid += double(ddso.diagnostics[k].valid_pixels);
  }
  mean_valid /= double(std::max<std::size_t>(1, ddso.pose_valid.size()));
  const bool odo_ok =
      double(failed_pairs) <= cfg.quality.max_failed_pair_fraction * double(n - 1);
  stages["odometry"] = {{"status", odo_ok ? "ok" : "degraded"},
                        {"pairs", n - 1},
                        {"failed_pairs", failed_pairs},
                        {"mean_valid_pixels", mean_valid}};
  degraded |= !odo_ok;

  std::vector<std::optional<double>> frame_scale(n);
  if (have_kin) {
    frame_scale = per_frame_scale(ddso.series, n, cfg.backfill);
    std::size_t valid_samples = 0, filtered_valid = 0;
    for (std::size_t k = 0; k < ddso.series.samples.size(); ++k) {
      valid_samples += ddso.series.samples[k].valid;
      filtered_valid += ddso.series.filtered_valid(k);
    }
    Json scale = {{"status", ddso.filter_ok && filtered_valid > 0 ? "ok" : "degraded"},
                  {"window_n", cfg.ddso.window_n},
                  {"valid_samples", valid_samples},
                  {"filtered_valid", filtered_valid}};
    if (!ddso.filter_ok || filtered_valid == 0) degraded = true;
    if (cfg.quality.reference_scale && filtered_valid > 0) {
      const double s = *cfg.quality.reference_scale;
      double sum = 0.0, worst = 0.0;
      for (std::size_t k = 0; k < ddso.series.samples.size(); ++k) {
        if (!ddso.series.filtered_valid(k)) continue;
        const double e = std::abs(ddso.series.filtered[k] - s) / s * 100.0;
        sum += e;
        worst = std::max(worst, e);
      }
      const double mean = sum / double(filtered_valid);
      scale["reference_scale"] = s;
      scale["scale_error_pct"] = mean;
      scale["scale_error_pct_max"] = worst;
      if (mean > cfg.quality.max_scale_error_pct) {
        scale["status"] = "degraded";
        degraded = true;
      }
    }
    stages["scale"] = scale;
  } else {
    stages["scale"] = {{"status", "skipped"}, {"reason", "no kinematics file"}};
    degraded = true;
    warn("scale: skipped, no kinematics file");
  }
  {
    std::ofstream csv(out_dir / "scales.csv");
    if (!csv) throw Error(ErrorCode::IoError, "cannot write scales.csv");
    write_scale_csv(csv, ddso.series);
  }
  bool all_scaled = have_kin;
  for (const auto& s : frame_scale) all_scaled &= s.has_value();

  // Estimated trajectory: chain of inverse image poses, translations scaled
  // by the later frame's filtered scale (relative units without kinematics).
  KinematicsTrajectory est;
  std::vector<PoseSE3> metric_motion(n - 1);
  {
    PoseSE3 p = PoseSE3::identity();
    est.entries.push_back({frames[0].timestamp, p, 0});
    for (std::size_t k = 0; k + 1 < n; ++k) {
      PoseSE3 m = ddso.pose_valid[k] ? ddso.image_poses[k].inverse() : PoseSE3::identity();
      if (all_scaled) m = PoseSE3(m.rotation(), m.translation() * *frame_scale[k + 1]);
      metric_motion[k] = m;
      p = p * m;
      est.entries.push_back({frames[k + 1].timestamp, p, int(k + 1)});
    }
    save_trajectory((out_dir / "poses_est.tum").string(), est, all_scaled ? "mm" : "relative");
  }

  // -- ensemble export
  std::vector<DepthMap> ensem;
  if (all_scaled) {
    std::vector<DistillFrame> df;
    for (const auto& f : frames) df.push_back({f.image, f.depth, f.index});
    try {
      const auto m = export_training_set(df, frame_scale, (out_dir / "ensemble").string());
      for (const auto& p : m.pairs) ensem.push_back(p.ensem_depth);
      stages["ensemble"] = {{"status", "ok"}, {"pairs", m.pairs.size()}};
    } catch (const Error& e) {
      if (e.code() == ErrorCode::IoError) throw;
      record("ensemble", -1, e.what());
      stages["ensemble"] = {{"status", "failed"}};
      degraded = true;
    }
  } else {
    stages["ensemble"] = {{"status", "skipped"}, {"reason", "no metric scale"}};
  }

  // -- fusion
  KinematicsTrajectory fused_traj;
  if (cfg.fusion_enabled && !ensem.empty()) {
    SurfelMap map;
    std::size_t failed = 0;
    PoseSE3 prev = PoseSE3::identity();
    for (std::size_t i = 0; i < n; ++i) {
      const PoseSE3 hint = i == 0 ? PoseSE3::identity() : prev * metric_motion[i - 1];
      try {
        const FusionResult r = integrate_frame(map, frames[i].image, ensem[i], cfg.intrinsics,
                                               hint, cfg.fusion);
        prev = r.pose;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::RegistrationFailed) throw;
        record("fusion", frames[i].index, e.what());
        ++failed;
        prev = hint;
      }
      fused_traj.entries.push_back({frames[i].timestamp, prev, frames[i].index});
    }
    save_trajectory((out_dir / "poses_fused.tum").string(), fused_traj);
    const bool ok = double(failed) <= cfg.quality.max_failed_fusion_fraction * double(n);
    Json fusion = {{"status", ok ? "ok" : "degraded"},
                   {"integrated", n - failed},
                   {"failed", failed},
                   {"surfels", map.size()}};
    degraded |= !ok;
    try {
      const auto cloud = export_cloud(map, cfg.cloud_min_confidence);
      io::write_ply((out_dir / "cloud.ply").string(), cloud);
      fusion["cloud_points"] = cloud.size();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyMap) throw;
      record("fusion", -1, e.what());
      fusion["status"] = "degraded";
      degraded = true;
    }
    stages["fusion"] = fusion;
  } else {
    stages["fusion"] = {{"status", "skipped"},
                        {"reason", cfg.fusion_enabled ? "no metric depth" : "disabled"}};
  }

  // -- metrics
  Json metrics = {{"status", "ok"}};
  auto guarded = [&](const std::string& what, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::IoError) throw;
      record("metrics", -1, what + ": " + e.what());
      metrics["status"] = "degraded";
      degraded = true;
    }
  };
  if (!cfg.inputs.ground_truth.empty()) {
    guarded("trajectory", [&] {
      const auto gt = load_trajectory(cfg.resolve(cfg.inputs.ground_truth));
      metrics["trajectory"] =
          detail::trajectory_json(detail::evaluate_against(est, gt, cfg.ddso.max_dt, cfg.trajectory));
      if (!fused_traj.empty()) {
        metrics["trajectory_fused"] = detail::trajectory_json(
            detail::evaluate_against(fused_traj, gt, cfg.ddso.max_dt, cfg.trajectory));
      }
    });
  }
  if (!cfg.inputs.gt_depth.empty() && !ensem.empty()) {
    guarded("depth", [&] {
      const auto files = detail::require_files(cfg.resolve(cfg.inputs.gt_depth), ".pfm", "gt_depth");
      if (files.size() != ensem.size()) throw Error(ErrorCode::LengthMismatch, "gt depth count");
      std::vector<DepthMetrics> per;
      for (std::size_t i = 0; i < files.size(); ++i) {
        per.push_back(depth_metrics(ensem[i], io::read_depth_pfm(files[i], DepthUnits::Millimetres),
                                    cfg.depth_clamp));
      }
      metrics["depth"] = detail::depth_json(aggregate(per));
    });
  }
  if (!cfg.inputs.gt_cloud.empty() && fs::exists(out_dir / "cloud.ply")) {
    guarded("cloud", [&] {
      const auto est_cloud = io::read_ply_positions((out_dir / "cloud.ply").string());
      const auto gt_cloud = io::read_ply_positions(cfg.resolve(cfg.inputs.gt_cloud));
      metrics["cloud"] = detail::cloud_json(cloud_rmse(est_cloud, gt_cloud, cfg.icp));
    });
  }
  stages["metrics"] = metrics;

  PipelineOutcome out;
  out.exit_code = degraded ? 3 : 0;
  Json& rep = out.report;
  rep["status"] = degraded ? "degraded" : "ok";
  rep["exit_code"] = out.exit_code;
  rep["frames"] = n;
  if (stages["scale"].contains("scale_error_pct")) {
    rep["scale_error_pct"] = stages["scale"]["scale_error_pct"];
  }
  rep["stages"] = stages;
  rep["errors"] = errors;
  rep["config"] = to_json(cfg, false);
  io::write_text((out_dir / "report.json").string(), rep.dump(2) + "\n");

  std::ostringstream s;
  s << "frames: " << n << ", failed pairs: " << failed_pairs;
  say(s.str());
  if (rep.contains("scale_error_pct")) {
    say("scale error: " + std::to_string(rep["scale_error_pct"].get<double>()) + " %");
  }
  if (metrics.contains("trajectory")) {
    say("ATE rmse: " + std::to_string(metrics["trajectory"]["ate_rmse"].get<double>()) + " mm");
  }
  if (metrics.contains("cloud")) {
    say("cloud rmse: " + std::to_string(metrics["cloud"]["rmse"].get<double>()) + " mm");
  }
  say(std::string("status: ") + (degraded ? "degraded" : "ok"));
  return out;
}

}  // namespace metricdepth
