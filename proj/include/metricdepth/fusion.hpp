#pragma once

// Frame-to-model surfel fusion: point-splat rendering of the global model,
// registration of each metric RGB-D frame against it, projective data
// association, weighted-average merging and stale-surfel removal.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "metricdepth/error.hpp"
#include "metricdepth/geometry.hpp"
#include "metricdepth/imaging.hpp"
#include "metricdepth/io.hpp"
#include "metricdepth/odometry.hpp"

namespace metricdepth {

struct Surfel {
  Vec3 position = Vec3::Zero();  // mm, world frame
  Vec3 normal = Vec3::UnitZ();
  double radius = 1.0;  // mm
  double confidence = 1.0;
  double intensity = 0.0;
  int last_seen = 0;
};

/// World frame = first integrated camera frame.
struct SurfelMap {
  std::vector<Surfel> surfels;
  int frames_integrated = 0;

  bool empty() const { return surfels.empty(); }
  std::size_t size() const { return surfels.size(); }
};

struct FusionConfig {
  int stride = 2;
  double conf_threshold = 1.5;
  int stability_window = 20;
  double dist_gate = 5.0;         // mm
  double normal_gate_deg = 30.0;  // degrees
  bool register_frames = true;
  OdometryConfig odometry = [] {
    OdometryConfig c;
    c.huber_delta_geo = 0.75;  // mm
    return c;
  }();

  void validate() const {
    if (stride < 1 || !(conf_threshold >= 0) || stability_window < 1 || !(dist_gate > 0) ||
        !(normal_gate_deg > 0) || normal_gate_deg > 180) {
      throw Error(ErrorCode::InvalidArgument, "invalid fusion configuration");
    }
    odometry.validate();
  }
};

struct FusionResult {
  PoseSE3 pose;  // camera to world
  std::size_t matched = 0;
  std::size_t spawned = 0;
  std::size_t removed = 0;
  bool refined = false;  // registration moved the pose away from the hint
};

/// Model rendered into a virtual camera.
struct ModelView {
  ImageGray image;
  DepthMap depth;
  std::vector<int> index;  // surfel per pixel, -1 if none
};

namespace detail {

/// Unit normals of a depth map in camera coordinates, facing the camera.
/// Central differences, one-sided at borders and holes, smoothed over 3x3;
/// pixels with no usable neighbours fall back to the reversed viewing ray.
inline std::vector<Vec3> depth_normals(const DepthMap& d, const Intrinsics& k) {
  const int w = d.width(), h = d.height();
  std::vector<Vec3> pts(std::size_t(w) * h, Vec3::Zero());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (d.valid(x, y)) pts[std::size_t(y) * w + x] = backproject({double(x), double(y)}, d(x, y), k);
    }
  }
  auto ok = [&](int x, int y) { return x >= 0 && y >= 0 && x < w && y < h && d.valid(x, y); };
  auto at = [&](int x, int y) -> const Vec3& { return pts[std::size_t(y) * w + x]; };
  auto diff = [&](int x, int y, int dx, int dy, Vec3& out) {
    const bool f = ok(x + dx, y + dy), b = ok(x - dx, y - dy);
    if (f && b) {
      out = at(x + dx, y + dy) - at(x - dx, y - dy);
    } else if (f) {
      out = at(x + dx, y + dy) - at(x, y);
    } else if (b) {
      out = at(x, y) - at(x - dx, y - dy);
    } else {
      return false;
    }
    return true;
  };
  std::vector<Vec3> raw(pts.size(), Vec3::Zero());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!d.valid(x, y)) continue;
      Vec3 du, dv;
      if (!diff(x, y, 1, 0, du) || !diff(x, y, 0, 1, dv)) continue;
      Vec3 n = du.cross(dv);
      if (n.norm() < 1e-15) continue;
      n.normalize();
      if (n.dot(at(x, y)) > 0) n = -n;
      raw[std::size_t(y) * w + x] = n;
    }
  }
  std::vector<Vec3> out(pts.size(), Vec3::Zero());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!d.valid(x, y)) continue;
      Vec3 s = Vec3::Zero();
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (ok(x + dx, y + dy)) s += raw[std::size_t(y + dy) * w + x + dx];
        }
      }
      const std::size_t i = std::size_t(y) * w + x;
      out[i] = s.norm() > 1e-12 ? Vec3(s.normalized()) : Vec3(-at(x, y).normalized());
    }
  }
  return out;
}

/// Depth at pixel p of the plane through `pos` with normal `n` (camera frame),
/// falling back to pos.z at grazing angles.
inline double plane_depth(const Vec3& pos, const Vec3& n, const PixelCoord& p,
                          const Intrinsics& k) {
  const Vec3 ray((p.u - k.cx) / k.fx, (p.v - k.cy) / k.fy, 1.0);
  const double den = n.dot(ray);
  if (std::abs(den) < 0.2 * ray.norm()) return pos.z();
  const double z = n.dot(pos) / den;
  return z > 0 ? z : pos.z();
}

}  // namespace detail

/// Point-splat render: each surfel lands in its nearest pixel (z-buffered),
/// with depth taken on its tangent plane along that pixel's ray. Hole
/// intensities are filled from valid 3x3 neighbours for pyramid building.
inline ModelView render_model(const SurfelMap& map, const PoseSE3& camera_to_world,
                              const Intrinsics& k) {
  ModelView v{ImageGray(k.width, k.height, 0.0), DepthMap(k.width, k.height, DepthUnits::Millimetres),
              std::vector<int>(std::size_t(k.width) * k.height, -1)};
  const PoseSE3 world_to_camera = camera_to_world.inverse();
  const Mat3 r = world_to_camera.rotation_matrix();
  std::vector<double> zbuf(v.index.size(), std::numeric_limits<double>::infinity());
  for (std::size_t s = 0; s < map.surfels.size(); ++s) {
    const Surfel& sf = map.surfels[s];
    const Vec3 pc = world_to_camera * sf.position;
    if (pc.z() <= 1e-6) continue;
    const Vec3 nc = r * sf.normal;
    if (nc.dot(pc) >= 0) continue;  // back-facing
    const PixelCoord px = project(pc, k);
    const long ux = std::lround(px.u), vy = std::lround(px.v);
    if (ux < 0 || vy < 0 || ux >= k.width || vy >= k.height) continue;
    const std::size_t i = std::size_t(vy) * k.width + std::size_t(ux);
    if (pc.z() < zbuf[i]) {
      zbuf[i] = pc.z();
      v.index[i] = int(s);
    }
  }
  double mean = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.index.size(); ++i) {
    if (v.index[i] < 0) continue;
    const Surfel& sf = map.surfels[std::size_t(v.index[i])];
    const int x = int(i % std::size_t(k.width)), y = int(i / std::size_t(k.width));
    v.depth.set(x, y, detail::plane_depth(world_to_camera * sf.position, r * sf.normal,
                                          {double(x), double(y)}, k));
    v.image.data[i] = sf.intensity;
    mean += sf.intensity;
    ++n;
  }
  mean = n ? mean / double(n) : 0.0;
  ImageGray filled = v.image;
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const std::size_t i = std::size_t(y) * k.width + x;
      if (v.index[i] >= 0) continue;
      double s = 0.0;
      int c = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= k.width || yy >= k.height) continue;
          const std::size_t j = std::size_t(yy) * k.width + xx;
          if (v.index[j] >= 0) {
            s += v.image.data[j];
            ++c;
          }
        }
      }
      filled.data[i] = c ? s / c : mean;
    }
  }
  v.image = std::move(filled);
  return v;
}

namespace detail {

inline Surfel make_surfel(const Vec3& pw, const Vec3& nw, const Vec3& pc, const Vec3& nc,
                          double intensity, int frame, const Intrinsics& k, int stride) {
  Surfel s;
  s.position = pw;
  s.normal = nw.normalized();
  const double f = 0.5 * (k.fx + k.fy);
  const double facing = std::max(std::abs(nc.dot(pc.normalized())), 0.2);
  s.radius = std::numbers::sqrt2 * 0.5 * double(stride) * pc.z() / f / facing;
  s.confidence = 1.0;
  s.intensity = intensity;
  s.last_seen = frame;
  return s;
}

}  // namespace detail

/// Integrates one metric frame. The first frame initializes the map at the
/// identity pose; later frames are registered against the model rendered at
/// pose_hint (camera to world). On failure the map is left untouched.
inline FusionResult integrate_frame(SurfelMap& map, const ImageGray& image, const DepthMap& depth,
                                    const Intrinsics& k, const PoseSE3& pose_hint,
                                    const FusionConfig& cfg = {}) {
  cfg.validate();
  if (depth.units != DepthUnits::Millimetres) {
    throw Error(ErrorCode::UnitMismatch, "fusion expects metric depth");
  }
  if (!image.same_shape(depth.depth) || image.width != k.width || image.height != k.height) {
    throw Error(ErrorCode::ShapeMismatch, "image/depth/intrinsics shape");
  }
  const int frame = map.frames_integrated;
  const bool first = frame == 0 && map.empty();
  FusionResult res;
  res.pose = first ? PoseSE3::identity() : pose_hint;

  if (!first && cfg.register_frames) {
    const ModelView model = render_model(map, pose_hint, k);
    if (model.depth.valid_count() == 0) {
      throw Error(ErrorCode::RegistrationFailed, "model not visible from pose hint");
    }
    const Frame fi{model.image, model.depth, k, -1, 0.0};
    const Frame fj{image, depth, k, frame, 0.0};
    try {
      const OdometryResult r = estimate_pose(fi, fj, PoseSE3::identity(), cfg.odometry);
      // Keep the hint unless registration actually lowers the cost.
      const auto [hint_cost, refined_cost] =
          compare_poses(fi, fj, PoseSE3::identity(), r.pose, cfg.odometry);
      if (refined_cost < hint_cost) {
        res.pose = pose_hint * r.pose.inverse();
        res.refined = true;
      }
    } catch (const Error& e) {
      throw Error(ErrorCode::RegistrationFailed, e.what());
    }
  }

  // Association against the model seen from the final pose.
  const ModelView index_view = first ? ModelView{} : render_model(map, res.pose, k);
  const std::vector<Vec3> normals = detail::depth_normals(depth, k);
  const Mat3 rot = res.pose.rotation_matrix();
  const double cos_gate = std::cos(deg2rad(cfg.normal_gate_deg));
  const double gate2 = cfg.dist_gate * cfg.dist_gate;

  struct Obs {
    Vec3 pw, nw, pc, nc;
    double intensity;
    int best = -1;
    double d2 = 0.0;
  };
  std::vector<Obs> obs;
  for (int y = 0; y < k.height; y += cfg.stride) {
    for (int x = 0; x < k.width; x += cfg.stride) {
      if (!depth.valid(x, y)) continue;
      Obs o;
      o.pc = backproject({double(x), double(y)}, depth(x, y), k);
      o.nc = normals[std::size_t(y) * k.width + x];
      o.pw = res.pose * o.pc;
      o.nw = rot * o.nc;
      o.intensity = image(x, y);
      if (!first) {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int xx = x + dx, yy = y + dy;
            if (xx < 0 || yy < 0 || xx >= k.width || yy >= k.height) continue;
            const int s = index_view.index[std::size_t(yy) * k.width + xx];
            if (s < 0) continue;
            const Surfel& sf = map.surfels[std::size_t(s)];
            const double d2 = (sf.position - o.pw).squaredNorm();
            if (d2 > gate2 || sf.normal.dot(o.nw) < cos_gate) continue;
            if (o.best < 0 || d2 < o.d2 || (d2 == o.d2 && s < o.best)) {
              o.best = s;
              o.d2 = d2;
            }
          }
        }
      }
      obs.push_back(o);
    }
  }

  // Each surfel takes its closest observation; losing candidates are dropped
  // instead of spawning duplicates.
  std::vector<int> owner(map.surfels.size(), -1);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (obs[i].best < 0) continue;
    int& o = owner[std::size_t(obs[i].best)];
    if (o < 0 || obs[i].d2 < obs[std::size_t(o)].d2) o = int(i);
  }
  for (std::size_t s = 0; s < owner.size(); ++s) {
    if (owner[s] < 0) continue;
    const Obs& o = obs[std::size_t(owner[s])];
    Surfel& sf = map.surfels[s];
    const double c = sf.confidence;
    sf.position = (c * sf.position + o.pw) / (c + 1.0);
    sf.normal = (c * sf.normal + o.nw).normalized();
    sf.intensity = (c * sf.intensity + o.intensity) / (c + 1.0);
    const Surfel fresh =
        detail::make_surfel(o.pw, o.nw, o.pc, o.nc, o.intensity, frame, k, cfg.stride);
    sf.radius = std::min(sf.radius, (c * sf.radius + fresh.radius) / (c + 1.0));
    sf.confidence = c + 1.0;
    sf.last_seen = frame;
    ++res.matched;
  }
  for (const Obs& o : obs) {
    if (o.best >= 0) continue;
    map.surfels.push_back(
        detail::make_surfel(o.pw, o.nw, o.pc, o.nc, o.intensity, frame, k, cfg.stride));
    ++res.spawned;
  }

  const std::size_t before = map.surfels.size();
  std::erase_if(map.surfels, [&](const Surfel& s) {
    return frame - s.last_seen >= cfg.stability_window && s.confidence < cfg.conf_threshold;
  });
  res.removed = before - map.surfels.size();
  map.frames_integrated = frame + 1;
  return res;
}

/// Surfels with confidence >= min_confidence in map order.
inline std::vector<io::CloudPoint> export_cloud(const SurfelMap& map, double min_confidence = 0.0) {
  if (map.empty()) throw Error(ErrorCode::EmptyMap, "surfel map is empty");
  std::vector<io::CloudPoint> out;
  for (const Surfel& s : map.surfels) {
    if (s.confidence >= min_confidence) {
      out.push_back({s.position, s.normal, s.intensity, s.confidence});
    }
  }
  if (out.empty()) throw Error(ErrorCode::EmptyMap, "no surfel above the confidence threshold");
  return out;
}

}  // namespace metricdepth
