// metricdepth: synthetic data generation, the metric-depth pipeline and
// evaluation tools.
//
// Exit codes: 0 success, 2 usage/config error, 3 quality-threshold failure,
// 4 I/O error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "metricdepth/config.hpp"
#include "metricdepth/io.hpp"
#include "metricdepth/metrics.hpp"
#include "metricdepth/parallel.hpp"
#include "metricdepth/pipeline.hpp"
#include "metricdepth/synthdata.hpp"

namespace md = metricdepth;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitQuality = 3;
constexpr int kExitIo = 4;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void write_lines(const std::string& path, const std::vector<md::Json>& lines) {
  std::string text;
  for (const auto& l : lines) text += l.dump() + "\n";
  md::io::write_text(path, text);
}

int cmd_synth(const std::string& spec_path, const std::string& out, int cloud_stride) {
  md::synth::SceneSpec spec;
  try {
    spec = md::load_scene_spec(spec_path);
  } catch (const md::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  const auto seq = md::synth::render_sequence(spec);
  md::write_dataset(seq, out, {cloud_stride});
  std::cout << "wrote " << seq.frames.size() << " frames to " << out << " (true scale "
            << fmt(spec.true_scale) << " mm/unit)\n";
  return kExitOk;
}

int cmd_pipeline(const std::string& config_path, const std::string& out) {
  md::PipelineConfig cfg;
  try {
    cfg = md::load_pipeline_config(config_path);
  } catch (const md::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (!out.empty()) {
    cfg.output_dir = std::filesystem::absolute(out).string();
  }
  const auto outcome = md::run_pipeline(cfg, &std::cout, &std::cerr);
  return outcome.exit_code == 0 ? kExitOk : kExitQuality;
}

int cmd_eval_depth(const std::string& pred_dir, const std::string& gt_dir, const std::string& out,
                   const md::DepthClamp& clamp) {
  const auto pred = md::io::list_files(pred_dir, ".pfm");
  const auto gt = md::io::list_files(gt_dir, ".pfm");
  if (pred.size() != gt.size() || pred.empty()) {
    throw md::Error(md::ErrorCode::LengthMismatch,
                    std::to_string(pred.size()) + " predictions vs " + std::to_string(gt.size()) +
                        " references");
  }
  std::vector<md::DepthMetrics> per;
  std::vector<md::Json> lines;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = md::io::read_depth_pfm(pred[i], md::DepthUnits::Millimetres);
    const auto g = md::io::read_depth_pfm(gt[i], md::DepthUnits::Millimetres);
    per.push_back(md::depth_metrics(p, g, clamp));
    md::Json j = md::detail::depth_json(per.back());
    j["frame"] = std::filesystem::path(pred[i]).filename().string();
    lines.push_back(j);
  }
  const auto agg = md::aggregate(per);
  md::Json a = md::detail::depth_json(agg);
  a["frame"] = "aggregate";
  lines.push_back(a);
  write_lines(out, lines);
  std::cout << "frames " << agg.n_frames << "  abs_rel " << fmt(agg.abs_rel) << "  sq_rel "
            << fmt(agg.sq_rel) << "  rmse " << fmt(agg.rmse) << " mm  rmse_log "
            << fmt(agg.rmse_log) << "  d1 " << fmt(agg.delta1) << "  d2 " << fmt(agg.delta2)
            << "  d3 " << fmt(agg.delta3) << "\n";
  return kExitOk;
}

int cmd_eval_traj(const std::string& est_path, const std::string& gt_path, const std::string& out,
                  const md::TrajectoryOptions& opt, double max_dt) {
  const auto est = md::load_trajectory(est_path);
  const auto gt = md::load_trajectory(gt_path);
  const auto pairs = md::detail::pair_trajectories(est, gt, max_dt);
  const auto m = md::trajectory_metrics(pairs.est, pairs.ref, opt);
  std::vector<md::Json> lines;
  for (std::size_t i = 0; i < pairs.est.size(); ++i) {
    const md::Vec3 aligned = m.alignment.rotation() * (m.alignment_scale * pairs.est[i].translation()) +
                             m.alignment.translation();
    lines.push_back({{"timestamp", pairs.timestamps[i]},
                     {"ate", (aligned - pairs.ref[i].translation()).norm()}});
  }
  md::Json a = md::detail::trajectory_json(m);
  a["timestamp"] = "aggregate";
  lines.push_back(a);
  write_lines(out, lines);
  std::cout << "poses " << m.n_poses << "  ATE " << fmt(m.ate_rmse) << " mm  RTE "
            << fmt(m.rte_mean) << " mm  RRE " << fmt(m.rre_mean) << " deg\n";
  return kExitOk;
}

int cmd_eval_cloud(const std::string& est_path, const std::string& gt_path, const std::string& out,
                   const md::IcpConfig& icp) {
  const auto est = md::io::read_ply_positions(est_path);
  const auto gt = md::io::read_ply_positions(gt_path);
  const auto m = md::cloud_rmse(est, gt, icp);
  write_lines(out, {md::detail::cloud_json(m)});
  std::cout << "cloud rmse " << fmt(m.rmse) << " mm over " << m.matched_points << " pairs\n";
  return kExitOk;
}

int exit_code_for(const md::Error& e) {
  switch (e.code()) {
    case md::ErrorCode::IoError: return kExitIo;
    default: return kExitUsage;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Metric depth and trajectory recovery from monocular images and robot kinematics"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = hardware concurrency)")
      ->check(CLI::NonNegativeNumber);

  std::string spec_path, synth_out;
  int cloud_stride = 1;
  auto* synth = app.add_subcommand("synth", "render a synthetic dataset from a scene spec");
  synth->add_option("spec", spec_path, "scene spec JSON")->required();
  synth->add_option("-o,--out", synth_out, "output directory")->required();
  synth->add_option("--cloud-stride", cloud_stride, "pixel stride of gt_cloud.ply")
      ->check(CLI::PositiveNumber);

  std::string config_path, pipeline_out;
  auto* pipeline = app.add_subcommand("pipeline", "run the full pipeline");
  pipeline->add_option("config", config_path, "pipeline config JSON")->required();
  pipeline->add_option("-o,--out", pipeline_out, "output directory (overrides the config)");

  std::string pred_dir, gt_dir, depth_out;
  md::DepthClamp clamp;
  auto* eval_depth = app.add_subcommand("eval-depth", "depth error and accuracy metrics");
  eval_depth->add_option("--pred", pred_dir, "predicted metric depth directory (*.pfm)")->required();
  eval_depth->add_option("--gt", gt_dir, "reference depth directory (*.pfm)")->required();
  eval_depth->add_option("-o,--out", depth_out, "JSON lines report")->required();
  eval_depth->add_option("--min-depth", clamp.min, "prediction clamp minimum (mm)");
  eval_depth->add_option("--max-depth", clamp.max, "prediction clamp maximum (mm)");

  std::string est_traj, gt_traj, traj_out;
  md::TrajectoryOptions topt;
  double max_dt = 0.05;
  auto* eval_traj = app.add_subcommand("eval-traj", "ATE / RTE / RRE between TUM trajectories");
  eval_traj->add_option("--est", est_traj, "estimated TUM trajectory")->required();
  eval_traj->add_option("--gt", gt_traj, "reference TUM trajectory")->required();
  eval_traj->add_option("-o,--out", traj_out, "JSON lines report")->required();
  eval_traj->add_option("--delta", topt.delta, "frame offset of relative errors")
      ->check(CLI::PositiveNumber);
  eval_traj->add_flag("--with-scale", topt.with_scale, "Sim(3) alignment");
  eval_traj->add_option("--max-dt", max_dt, "timestamp association tolerance (s)");

  std::string est_cloud, gt_cloud, cloud_out;
  md::IcpConfig icp;
  auto* eval_cloud = app.add_subcommand("eval-cloud", "ICP-registered cloud RMSE");
  eval_cloud->add_option("--est", est_cloud, "estimated cloud (PLY)")->required();
  eval_cloud->add_option("--gt", gt_cloud, "reference cloud (PLY)")->required();
  eval_cloud->add_option("-o,--out", cloud_out, "JSON lines report")->required();
  eval_cloud->add_option("--max-corr-dist", icp.max_corr_dist, "correspondence gate (mm)");
  eval_cloud->add_option("--iters", icp.icp_iters, "ICP iterations");

  bool scene = false;
  auto* print_config = app.add_subcommand("print-config", "print the default configuration");
  print_config->add_flag("--scene", scene, "print the default scene spec instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }
  md::set_num_threads(threads > 0 ? threads : int(std::thread::hardware_concurrency()));

  try {
    if (*synth) return cmd_synth(spec_path, synth_out, cloud_stride);
    if (*pipeline) return cmd_pipeline(config_path, pipeline_out);
    if (*eval_depth) return cmd_eval_depth(pred_dir, gt_dir, depth_out, clamp);
    if (*eval_traj) return cmd_eval_traj(est_traj, gt_traj, traj_out, topt, max_dt);
    if (*eval_cloud) return cmd_eval_cloud(est_cloud, gt_cloud, cloud_out, icp);
    if (*print_config) {
      std::cout << (scene ? md::to_json(md::synth::SceneSpec{}) : md::to_json(md::PipelineConfig{}))
                       .dump(2)
                << "\n";
      return kExitOk;
    }
  } catch (const md::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    // Evaluation commands treat unreadable inputs as usage errors.
    if (*eval_depth || *eval_traj || *eval_cloud) return kExitUsage;
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}
