#pragma once

// JSON (de)serialization of scene specs and pipeline configuration. Parsing
// starts from the defaults and rejects unknown keys.

#include <filesystem>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "metricdepth/ddso.hpp"
#include "metricdepth/error.hpp"
#include "metricdepth/fusion.hpp"
#include "metricdepth/geometry.hpp"
#include "metricdepth/metrics.hpp"
#include "metricdepth/odometry.hpp"
#include "metricdepth/synthdata.hpp"

namespace metricdepth {

using Json = nlohmann::ordered_json;

namespace detail {

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::ParseError, where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok |= key == a;
    if (!ok) throw Error(ErrorCode::ParseError, "unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::ParseError, where + "." + key + " has the wrong type");
  }
}

inline Json vec_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

inline void read_vec(const Json& j, const char* key, Vec3& out, const std::string& where) {
  if (!j.contains(key)) return;
  std::vector<double> v;
  read(j, key, v, where);
  if (v.size() != 3) throw Error(ErrorCode::ParseError, where + "." + key + " needs 3 numbers");
  out = Vec3(v[0], v[1], v[2]);
}

inline Json pose_json(const PoseSE3& p) {
  const auto& q = p.rotation();
  return {{"t", vec_json(p.translation())}, {"q", Json::array({q.x(), q.y(), q.z(), q.w()})}};
}

inline PoseSE3 pose_from_json(const Json& j, const std::string& where) {
  check_keys(j, {"t", "q"}, where);
  Vec3 t = Vec3::Zero();
  read_vec(j, "t", t, where);
  std::vector<double> q{0, 0, 0, 1};
  read(j, "q", q, where);
  if (q.size() != 4) throw Error(ErrorCode::ParseError, where + ".q needs 4 numbers");
  const Eigen::Quaterniond quat(q[3], q[0], q[1], q[2]);
  if (std::abs(quat.norm() - 1.0) > 1e-3) throw Error(ErrorCode::NonUnitQuaternion, where);
  return {quat, t};
}

}  // namespace detail

// ---------------------------------------------------------------- intrinsics

inline Json to_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx},
          {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline Intrinsics intrinsics_from_json(const Json& j, Intrinsics k = {}) {
  const std::string w = "intrinsics";
  detail::check_keys(j, {"fx", "fy", "cx", "cy", "width", "height"}, w);
  detail::read(j, "fx", k.fx, w);
  detail::read(j, "fy", k.fy, w);
  detail::read(j, "cx", k.cx, w);
  detail::read(j, "cy", k.cy, w);
  detail::read(j, "width", k.width, w);
  detail::read(j, "height", k.height, w);
  if (!k.valid()) throw Error(ErrorCode::InvalidArgument, "intrinsics must be positive");
  return k;
}

// ---------------------------------------------------------------- odometry

inline Json to_json(const OdometryConfig& c) {
  return {{"pyramid_levels", c.pyramid_levels},
          {"max_iters_per_level", c.max_iters_per_level},
          {"huber_delta_photo", c.huber_delta_photo},
          {"huber_delta_geo", c.huber_delta_geo},
          {"w_geo", c.w_geo},
          {"w_photo", c.w_photo},
          {"convergence_eps", c.convergence_eps},
          {"min_valid_pixels", c.min_valid_pixels},
          {"finest_gradient_fraction", c.finest_gradient_fraction},
          {"outlier_gate", c.outlier_gate},
          {"max_rejected_steps", c.max_rejected_steps}};
}

inline OdometryConfig odometry_from_json(const Json& j, OdometryConfig c = {},
                                         const std::string& w = "odometry") {
  detail::check_keys(j,
                     {"pyramid_levels", "max_iters_per_level", "huber_delta_photo",
                      "huber_delta_geo", "w_geo", "w_photo", "convergence_eps",
                      "min_valid_pixels", "finest_gradient_fraction", "outlier_gate",
                      "max_rejected_steps"},
                     w);
  detail::read(j, "pyramid_levels", c.pyramid_levels, w);
  detail::read(j, "max_iters_per_level", c.max_iters_per_level, w);
  detail::read(j, "huber_delta_photo", c.huber_delta_photo, w);
  detail::read(j, "huber_delta_geo", c.huber_delta_geo, w);
  detail::read(j, "w_geo", c.w_geo, w);
  detail::read(j, "w_photo", c.w_photo, w);
  detail::read(j, "convergence_eps", c.convergence_eps, w);
  detail::read(j, "min_valid_pixels", c.min_valid_pixels, w);
  detail::read(j, "finest_gradient_fraction", c.finest_gradient_fraction, w);
  detail::read(j, "outlier_gate", c.outlier_gate, w);
  detail::read(j, "max_rejected_steps", c.max_rejected_steps, w);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- scene spec

inline Json to_json(const synth::Surface& s) {
  using T = synth::SurfaceType;
  switch (s.type) {
    case T::Plane: return {{"type", "plane"}, {"distance", s.distance}};
    case T::SphereCap:
      return {{"type", "sphere_cap"}, {"center", detail::vec_json(s.center)}, {"radius", s.radius}};
    case T::Heightfield:
      return {{"type", "heightfield"},
              {"base", s.distance},
              {"amplitude", s.amplitude},
              {"frequency", s.frequency}};
  }
  return {};
}

inline synth::Surface surface_from_json(const Json& j) {
  const std::string w = "surface";
  std::string type = "heightfield";
  detail::check_keys(j, {"type", "distance", "center", "radius", "base", "amplitude", "frequency"},
                     w);
  detail::read(j, "type", type, w);
  if (type == "plane") {
    double d = 40.0;
    detail::read(j, "distance", d, w);
    if (!(d > 0)) throw Error(ErrorCode::InvalidArgument, "plane distance must be > 0");
    return synth::Surface::plane(d);
  }
  if (type == "sphere_cap" || type == "sphere") {
    Vec3 c(0, 0, 60);
    double r = 30.0;
    detail::read_vec(j, "center", c, w);
    detail::read(j, "radius", r, w);
    if (!(r > 0)) throw Error(ErrorCode::InvalidArgument, "sphere radius must be > 0");
    return synth::Surface::sphere_cap(c, r);
  }
  if (type == "heightfield") {
    double base = 40.0, a = 3.0, f = 0.05;
    detail::read(j, "base", base, w);
    detail::read(j, "amplitude", a, w);
    detail::read(j, "frequency", f, w);
    if (!(base > 0) || !(a >= 0) || !(f >= 0)) {
      throw Error(ErrorCode::InvalidArgument, "heightfield parameters");
    }
    return synth::Surface::heightfield(base, a, f);
  }
  throw Error(ErrorCode::ParseError, "unknown surface type '" + type + "'");
}

inline Json to_json(const synth::SceneSpec& s) {
  Json stationary = Json::array();
  for (const auto& [first, len] : s.trajectory.stationary) stationary.push_back({first, len});
  Json poses = Json::array();
  for (const auto& p : s.trajectory.explicit_poses) poses.push_back(detail::pose_json(p));
  return {
      {"surface", to_json(s.surface)},
      {"texture",
       {{"seed", s.texture.seed},
        {"octaves", s.texture.octaves},
        {"base_frequency", s.texture.base_frequency},
        {"contrast", s.texture.contrast}}},
      {"trajectory",
       {{"start", detail::pose_json(s.trajectory.start)},
        {"velocity", detail::vec_json(s.trajectory.velocity)},
        {"angular_velocity_deg", detail::vec_json(s.trajectory.angular_velocity_deg)},
        {"wobble", detail::vec_json(s.trajectory.wobble)},
        {"wobble_period", s.trajectory.wobble_period},
        {"stationary", stationary},
        {"explicit_poses", poses}}},
      {"intrinsics", to_json(s.intrinsics)},
      {"frame_count", s.frame_count},
      {"true_scale", s.true_scale},
      {"frame_interval", s.frame_interval},
      {"brightness",
       {{"enabled", s.brightness.enabled},
        {"seed", s.brightness.seed},
        {"amplitude", s.brightness.amplitude}}},
      {"lever_arm", detail::vec_json(s.lever_arm)},
      {"kinematics_noise_sigma", s.kinematics_noise_sigma},
      {"seed", s.seed}};
}

inline synth::SceneSpec scene_from_json(const Json& j) {
  synth::SceneSpec s;
  const std::string w = "scene";
  detail::check_keys(j,
                     {"surface", "texture", "trajectory", "intrinsics", "frame_count",
                      "true_scale", "frame_interval", "brightness", "lever_arm",
                      "kinematics_noise_sigma", "seed"},
                     w);
  if (j.contains("surface")) s.surface = surface_from_json(j["surface"]);
  if (j.contains("texture")) {
    const Json& t = j["texture"];
    detail::check_keys(t, {"seed", "octaves", "base_frequency", "contrast"}, "texture");
    detail::read(t, "seed", s.texture.seed, "texture");
    detail::read(t, "octaves", s.texture.octaves, "texture");
    detail::read(t, "base_frequency", s.texture.base_frequency, "texture");
    detail::read(t, "contrast", s.texture.contrast, "texture");
    if (s.texture.octaves < 1 || !(s.texture.base_frequency > 0)) {
      throw Error(ErrorCode::InvalidArgument, "texture parameters");
    }
  }
  if (j.contains("trajectory")) {
    const Json& t = j["trajectory"];
    const std::string tw = "trajectory";
    detail::check_keys(t,
                       {"start", "velocity", "angular_velocity_deg", "wobble", "wobble_period",
                        "stationary", "explicit_poses"},
                       tw);
    auto& tr = s.trajectory;
    if (t.contains("start")) tr.start = detail::pose_from_json(t["start"], "trajectory.start");
    detail::read_vec(t, "velocity", tr.velocity, tw);
    detail::read_vec(t, "angular_velocity_deg", tr.angular_velocity_deg, tw);
    detail::read_vec(t, "wobble", tr.wobble, tw);
    detail::read(t, "wobble_period", tr.wobble_period, tw);
    if (!(tr.wobble_period > 0)) throw Error(ErrorCode::InvalidArgument, "wobble_period");
    if (t.contains("stationary")) {
      std::vector<std::vector<int>> st;
      detail::read(t, "stationary", st, tw);
      for (const auto& r : st) {
        if (r.size() != 2 || r[1] < 0) {
          throw Error(ErrorCode::ParseError, "stationary entries are [first, length]");
        }
        tr.stationary.emplace_back(r[0], r[1]);
      }
    }
    if (t.contains("explicit_poses")) {
      for (const auto& p : t["explicit_poses"]) {
        tr.explicit_poses.push_back(detail::pose_from_json(p, "trajectory.explicit_poses"));
      }
    }
  }
  if (j.contains("intrinsics")) s.intrinsics = intrinsics_from_json(j["intrinsics"]);
  detail::read(j, "frame_count", s.frame_count, w);
  detail::read(j, "true_scale", s.true_scale, w);
  detail::read(j, "frame_interval", s.frame_interval, w);
  if (j.contains("brightness")) {
    const Json& b = j["brightness"];
    detail::check_keys(b, {"enabled", "seed", "amplitude"}, "brightness");
    detail::read(b, "enabled", s.brightness.enabled, "brightness");
    detail::read(b, "seed", s.brightness.seed, "brightness");
    detail::read(b, "amplitude", s.brightness.amplitude, "brightness");
  }
  detail::read_vec(j, "lever_arm", s.lever_arm, w);
  detail::read(j, "kinematics_noise_sigma", s.kinematics_noise_sigma, w);
  detail::read(j, "seed", s.seed, w);
  if (!s.trajectory.explicit_poses.empty() &&
      s.trajectory.explicit_poses.size() < std::size_t(s.frame_count)) {
    throw Error(ErrorCode::InvalidArgument, "explicit_poses shorter than frame_count");
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------- pipeline

struct PipelineInputs {
  std::string images = "images";  // *.png, sorted by name
  std::string depth = "depth_rel";  // relative depth *.pfm
  std::string flow;                 // optional appearance flow *.pfm
  std::string kinematics;           // optional TUM file, mm
  std::string ground_truth;         // optional TUM file, mm
  std::string gt_depth;             // optional metric depth *.pfm
  std::string gt_cloud;             // optional PLY
  double first_timestamp = 0.0;
  double frame_interval = 0.04;  // s
};

struct QualityThresholds {
  std::optional<double> reference_scale;  // known s*, enables scale_error_pct
  double max_scale_error_pct = 2.0;
  double max_failed_pair_fraction = 0.1;
  double max_failed_fusion_fraction = 0.2;
};

struct PipelineConfig {
  PipelineInputs inputs;
  Intrinsics intrinsics{250.0, 250.0, 159.5, 127.5, 320, 256};
  DdsoConfig ddso;
  bool backfill = true;
  bool fusion_enabled = true;
  FusionConfig fusion;
  double cloud_min_confidence = 0.0;
  DepthClamp depth_clamp;
  IcpConfig icp;
  TrajectoryOptions trajectory;
  QualityThresholds quality;
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  /// Directory that relative input/output paths are resolved against.
  std::string base_dir = ".";

  std::string resolve(const std::string& p) const {
    if (p.empty()) return p;
    const std::filesystem::path path(p);
    return path.is_absolute() ? p : (std::filesystem::path(base_dir) / path).string();
  }

  void validate() const {
    if (!intrinsics.valid()) throw Error(ErrorCode::InvalidArgument, "intrinsics must be positive");
    ddso.validate();
    fusion.validate();
    if (inputs.images.empty() || inputs.depth.empty()) {
      throw Error(ErrorCode::InvalidArgument, "inputs.images and inputs.depth are required");
    }
    if (!(inputs.frame_interval > 0)) throw Error(ErrorCode::InvalidArgument, "frame_interval");
    if (!(depth_clamp.min > 0) || !(depth_clamp.max > depth_clamp.min)) {
      throw Error(ErrorCode::InvalidArgument, "depth clamp");
    }
    if (!(icp.max_corr_dist > 0) || icp.icp_iters < 1) throw Error(ErrorCode::InvalidArgument, "icp");
    if (trajectory.delta < 1) throw Error(ErrorCode::InvalidArgument, "rte delta");
    if (quality.reference_scale && !(*quality.reference_scale > 0)) {
      throw Error(ErrorCode::InvalidArgument, "reference_scale must be > 0");
    }
  }
};

/// Serialized configuration; output_dir is left out when `with_output` is false.
inline Json to_json(const PipelineConfig& c, bool with_output = true) {
  Json j;
  j["inputs"] = {{"images", c.inputs.images},
                 {"depth", c.inputs.depth},
                 {"flow", c.inputs.flow},
                 {"kinematics", c.inputs.kinematics},
                 {"ground_truth", c.inputs.ground_truth},
                 {"gt_depth", c.inputs.gt_depth},
                 {"gt_cloud", c.inputs.gt_cloud},
                 {"first_timestamp", c.inputs.first_timestamp},
                 {"frame_interval", c.inputs.frame_interval}};
  j["intrinsics"] = to_json(c.intrinsics);
  j["ddso"] = {{"window_n", c.ddso.window_n},
               {"max_dt", c.ddso.max_dt},
               {"interpolate_kinematics", c.ddso.interpolate_kinematics},
               {"max_rotation_deg", c.ddso.max_rotation_deg},
               {"min_img_norm", c.ddso.thresholds.min_img_norm},
               {"min_kin_norm", c.ddso.thresholds.min_kin_norm},
               {"backfill", c.backfill}};
  j["odometry"] = to_json(c.ddso.odometry);
  j["fusion"] = {{"enabled", c.fusion_enabled},
                 {"stride", c.fusion.stride},
                 {"conf_threshold", c.fusion.conf_threshold},
                 {"stability_window", c.fusion.stability_window},
                 {"dist_gate", c.fusion.dist_gate},
                 {"normal_gate_deg", c.fusion.normal_gate_deg},
                 {"register_frames", c.fusion.register_frames},
                 {"min_confidence", c.cloud_min_confidence},
                 {"odometry", to_json(c.fusion.odometry)}};
  j["metrics"] = {{"depth_clamp_min", c.depth_clamp.min},
                  {"depth_clamp_max", c.depth_clamp.max},
                  {"icp_max_corr_dist", c.icp.max_corr_dist},
                  {"icp_iters", c.icp.icp_iters},
                  {"rte_delta", c.trajectory.delta},
                  {"ate_with_scale", c.trajectory.with_scale}};
  j["quality"] = {{"reference_scale", c.quality.reference_scale
                                          ? Json(*c.quality.reference_scale)
                                          : Json(nullptr)},
                  {"max_scale_error_pct", c.quality.max_scale_error_pct},
                  {"max_failed_pair_fraction", c.quality.max_failed_pair_fraction},
                  {"max_failed_fusion_fraction", c.quality.max_failed_fusion_fraction}};
  if (with_output) j["output_dir"] = c.output_dir;
  j["seed"] = c.seed;
  return j;
}

inline PipelineConfig pipeline_config_from_json(const Json& j, const std::string& base_dir = ".") {
  PipelineConfig c;
  c.base_dir = base_dir;
  detail::check_keys(j,
                     {"inputs", "intrinsics", "ddso", "odometry", "fusion", "metrics", "quality",
                      "output_dir", "seed"},
                     "config");
  if (j.contains("inputs")) {
    const Json& in = j["inputs"];
    const std::string w = "inputs";
    detail::check_keys(in,
                       {"images", "depth", "flow", "kinematics", "ground_truth", "gt_depth",
                        "gt_cloud", "first_timestamp", "frame_interval"},
                       w);
    detail::read(in, "images", c.inputs.images, w);
    detail::read(in, "depth", c.inputs.depth, w);
    detail::read(in, "flow", c.inputs.flow, w);
    detail::read(in, "kinematics", c.inputs.kinematics, w);
    detail::read(in, "ground_truth", c.inputs.ground_truth, w);
    detail::read(in, "gt_depth", c.inputs.gt_depth, w);
    detail::read(in, "gt_cloud", c.inputs.gt_cloud, w);
    detail::read(in, "first_timestamp", c.inputs.first_timestamp, w);
    detail::read(in, "frame_interval", c.inputs.frame_interval, w);
  }
  if (j.contains("intrinsics")) c.intrinsics = intrinsics_from_json(j["intrinsics"]);
  if (j.contains("ddso")) {
    const Json& d = j["ddso"];
    const std::string w = "ddso";
    detail::check_keys(d,
                       {"window_n", "max_dt", "interpolate_kinematics", "max_rotation_deg",
                        "min_img_norm", "min_kin_norm", "backfill"},
                       w);
    detail::read(d, "window_n", c.ddso.window_n, w);
    detail::read(d, "max_dt", c.ddso.max_dt, w);
    detail::read(d, "interpolate_kinematics", c.ddso.interpolate_kinematics, w);
    detail::read(d, "max_rotation_deg", c.ddso.max_rotation_deg, w);
    detail::read(d, "min_img_norm", c.ddso.thresholds.min_img_norm, w);
    detail::read(d, "min_kin_norm", c.ddso.thresholds.min_kin_norm, w);
    detail::read(d, "backfill", c.backfill, w);
  }
  if (j.contains("odometry")) c.ddso.odometry = odometry_from_json(j["odometry"]);
  if (j.contains("fusion")) {
    const Json& f = j["fusion"];
    const std::string w = "fusion";
    detail::check_keys(f,
                       {"enabled", "stride", "conf_threshold", "stability_window", "dist_gate",
                        "normal_gate_deg", "register_frames", "min_confidence", "odometry"},
                       w);
    detail::read(f, "enabled", c.fusion_enabled, w);
    detail::read(f, "stride", c.fusion.stride, w);
    detail::read(f, "conf_threshold", c.fusion.conf_threshold, w);
    detail::read(f, "stability_window", c.fusion.stability_window, w);
    detail::read(f, "dist_gate", c.fusion.dist_gate, w);
    detail::read(f, "normal_gate_deg", c.fusion.normal_gate_deg, w);
    detail::read(f, "register_frames", c.fusion.register_frames, w);
    detail::read(f, "min_confidence", c.cloud_min_confidence, w);
    if (f.contains("odometry")) {
      c.fusion.odometry = odometry_from_json(f["odometry"], c.fusion.odometry, "fusion.odometry");
    }
  }
  if (j.contains("metrics")) {
    const Json& m = j["metrics"];
    const std::string w = "metrics";
    detail::check_keys(m,
                       {"depth_clamp_min", "depth_clamp_max", "icp_max_corr_dist", "icp_iters",
                        "rte_delta", "ate_with_scale"},
                       w);
    detail::read(m, "depth_clamp_min", c.depth_clamp.min, w);
    detail::read(m, "depth_clamp_max", c.depth_clamp.max, w);
    detail::read(m, "icp_max_corr_dist", c.icp.max_corr_dist, w);
    detail::read(m, "icp_iters", c.icp.icp_iters, w);
    detail::read(m, "rte_delta", c.trajectory.delta, w);
    detail::read(m, "ate_with_scale", c.trajectory.with_scale, w);
  }
  if (j.contains("quality")) {
    const Json& q = j["quality"];
    const std::string w = "quality";
    detail::check_keys(q,
                       {"reference_scale", "max_scale_error_pct", "max_failed_pair_fraction",
                        "max_failed_fusion_fraction"},
                       w);
    if (q.contains("reference_scale") && !q["reference_scale"].is_null()) {
      double s = 0;
      detail::read(q, "reference_scale", s, w);
      c.quality.reference_scale = s;
    }
    detail::read(q, "max_scale_error_pct", c.quality.max_scale_error_pct, w);
    detail::read(q, "max_failed_pair_fraction", c.quality.max_failed_pair_fraction, w);
    detail::read(q, "max_failed_fusion_fraction", c.quality.max_failed_fusion_fraction, w);
  }
  detail::read(j, "output_dir", c.output_dir, "config");
  detail::read(j, "seed", c.seed, "config");
  c.validate();
  return c;
}

/// Parses a JSON document; syntax errors become ParseError.
inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::ParseError, what + ": " + e.what());
  }
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  const Json j = parse_json(io::read_text(path), path);
  const std::string dir = std::filesystem::path(path).parent_path().string();
  return pipeline_config_from_json(j, dir.empty() ? "." : dir);
}

inline synth::SceneSpec load_scene_spec(const std::string& path) {
  return scene_from_json(parse_json(io::read_text(path), path));
}

}  // namespace metricdepth
