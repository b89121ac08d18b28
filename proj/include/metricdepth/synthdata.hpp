#pragma once

// Synthetic scene generator. Ray-casts analytic surfaces through a pinhole
// camera to produce exact metric depth, procedurally textured images, ground
// truth poses, kinematics, relative depth and brightness perturbations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "metricdepth/error.hpp"
#include "metricdepth/geometry.hpp"
#include "metricdepth/imaging.hpp"
#include "metricdepth/kinematics.hpp"
#include "metricdepth/parallel.hpp"

namespace metricdepth::synth {

enum class SurfaceType { Plane, SphereCap, Heightfield };

/// Analytic surface in world coordinates (mm).
struct Surface {
  SurfaceType type = SurfaceType::Plane;
  double distance = 40.0;  // plane z = distance; heightfield base height
  Vec3 center = Vec3(0, 0, 60);
  double radius = 30.0;
  double amplitude = 3.0;   // heightfield
  double frequency = 0.05;  // heightfield, cycles per mm

  static Surface plane(double d) {
    Surface s;
    s.type = SurfaceType::Plane;
    s.distance = d;
    return s;
  }
  static Surface sphere_cap(const Vec3& c, double r) {
    Surface s;
    s.type = SurfaceType::SphereCap;
    s.center = c;
    s.radius = r;
    return s;
  }
  static Surface heightfield(double base, double amplitude, double frequency) {
    Surface s;
    s.type = SurfaceType::Heightfield;
    s.distance = base;
    s.amplitude = amplitude;
    s.frequency = frequency;
    return s;
  }

  double height(double x, double y) const {
    const double w = 2.0 * std::numbers::pi * frequency;
    return distance + amplitude * std::sin(w * x) * std::cos(w * y);
  }

  Vec3 height_gradient(double x, double y) const {
    const double w = 2.0 * std::numbers::pi * frequency;
    return {amplitude * w * std::cos(w * x) * std::cos(w * y),
            -amplitude * w * std::sin(w * x) * std::sin(w * y), 0.0};
  }

  /// Smallest s > 0 with origin + s * dir on the surface.
  std::optional<double> intersect(const Vec3& o, const Vec3& d) const {
    switch (type) {
      case SurfaceType::Plane: {
        if (std::abs(d.z()) < 1e-15) return std::nullopt;
        const double s = (distance - o.z()) / d.z();
        if (s > 0) return s;
        return std::nullopt;
      }
      case SurfaceType::SphereCap: {
        const Vec3 oc = o - center;
        const double a = d.squaredNorm(), b = oc.dot(d), c = oc.squaredNorm() - radius * radius;
        const double disc = b * b - a * c;
        if (disc < 0) return std::nullopt;
        const double sq = std::sqrt(disc);
        // Numerically stable roots.
        const double qv = b > 0 ? -(b + sq) : -(b - sq);
        double s0 = qv / a, s1 = qv != 0 ? c / qv : s0;
        if (s0 > s1) std::swap(s0, s1);
        if (s0 > 0) return s0;
        if (s1 > 0) return s1;
        return std::nullopt;
      }
      case SurfaceType::Heightfield: {
        const auto g = [&](double s) {
          const Vec3 p = o + s * d;
          return p.z() - height(p.x(), p.y());
        };
        if (d.z() <= 1e-12) return std::nullopt;
        const double lo = std::max(0.0, (distance - std::abs(amplitude) - o.z()) / d.z());
        const double hi = (distance + std::abs(amplitude) - o.z()) / d.z();
        if (!(hi > 0)) return std::nullopt;
        // Lipschitz-bounded marching: |dg/ds| <= d.z + |grad h| |d_xy| never
        // lets a step jump over the first crossing.
        const double w = 2.0 * std::numbers::pi * frequency;
        const double lip = d.z() + std::abs(amplitude) * w * std::numbers::sqrt2 *
                                       std::hypot(d.x(), d.y());
        double a = lo, ga = g(a);
        if (ga >= 0) return std::nullopt;  // camera inside/under the relief
        while (a < hi) {
          double b = std::min(hi, a + std::max(-ga / lip, 1e-4));
          const double gb = g(b);
          if (gb >= 0) {
            // Bisection to a tight bracket, then Newton polish.
            while (b - a > 1e-9 * std::max(1.0, b)) {
              const double m = 0.5 * (a + b);
              if (g(m) < 0) {
                a = m;
              } else {
                b = m;
              }
            }
            double s = 0.5 * (a + b);
            for (int it = 0; it < 4; ++it) {
              const Vec3 p = o + s * d;
              const Vec3 gr = height_gradient(p.x(), p.y());
              const double dg = d.z() - gr.x() * d.x() - gr.y() * d.y();
              if (std::abs(dg) < 1e-12) break;
              const double ns = s - g(s) / dg;
              if (ns < a || ns > b) break;
              s = ns;
            }
            return s;
          }
          a = b;
          ga = gb;
        }
        return std::nullopt;
      }
    }
    return std::nullopt;
  }

  /// Distance from a world point to the surface (first order for the heightfield).
  double distance_to(const Vec3& p) const {
    switch (type) {
      case SurfaceType::Plane: return std::abs(p.z() - distance);
      case SurfaceType::SphereCap: return std::abs((p - center).norm() - radius);
      case SurfaceType::Heightfield: {
        const Vec3 g = height_gradient(p.x(), p.y());
        return std::abs(p.z() - height(p.x(), p.y())) / std::sqrt(1.0 + g.squaredNorm());
      }
    }
    return 0.0;
  }
};

/// Multi-octave 3D value noise with quintic interpolation.
struct Texture {
  std::uint64_t seed = 1;
  int octaves = 3;
  double base_frequency = 0.12;  // lattice cells per mm
  double contrast = 0.6;         // intensity span around 0.5

  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  double lattice(std::int64_t x, std::int64_t y, std::int64_t z, int octave) const {
    std::uint64_t h = mix(seed + 0x632be59bd9b4e019ULL * std::uint64_t(octave + 1));
    h = mix(h ^ std::uint64_t(x));
    h = mix(h ^ std::uint64_t(y));
    h = mix(h ^ std::uint64_t(z));
    return double(h >> 11) * (1.0 / 9007199254740992.0);
  }

  static double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

  double noise(const Vec3& p, int octave) const {
    const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
    const auto ix = std::int64_t(fx), iy = std::int64_t(fy), iz = std::int64_t(fz);
    const double tx = fade(p.x() - fx), ty = fade(p.y() - fy), tz = fade(p.z() - fz);
    double c[2][2][2];
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int d = 0; d < 2; ++d) c[a][b][d] = lattice(ix + a, iy + b, iz + d, octave);
    const auto lerp = [](double a, double b, double t) { return a + t * (b - a); };
    const double x00 = lerp(c[0][0][0], c[1][0][0], tx), x10 = lerp(c[0][1][0], c[1][1][0], tx);
    const double x01 = lerp(c[0][0][1], c[1][0][1], tx), x11 = lerp(c[0][1][1], c[1][1][1], tx);
    return lerp(lerp(x00, x10, ty), lerp(x01, x11, ty), tz);
  }

  double intensity(const Vec3& world) const {
    double sum = 0, norm = 0, amp = 1, freq = base_frequency;
    for (int o = 0; o < octaves; ++o) {
      sum += amp * noise(world * freq, o);
      norm += amp;
      amp *= 0.5;
      freq *= 2.0;
    }
    const double n = sum / norm;  // in [0, 1]
    return std::clamp(0.5 + contrast * (n - 0.5) * 2.0, 0.0, 1.0);
  }
};

/// Parametric camera path: constant velocity and angular rate with a
/// sinusoidal wobble; frames inside stationary ranges do not advance.
struct TrajectorySpec {
  PoseSE3 start;                         // camera-to-world at frame 0
  Vec3 velocity = Vec3(0.6, 0.2, 0.05);  // mm per moving frame (world axes)
  Vec3 angular_velocity_deg = Vec3(0.05, -0.08, 0.1);  // deg per moving frame (camera axes)
  Vec3 wobble = Vec3(0.3, 0.3, 0.2);                   // mm
  double wobble_period = 17.0;                         // frames
  std::vector<std::pair<int, int>> stationary;         // (first frame, length)
  std::vector<PoseSE3> explicit_poses;                 // overrides the generator when non-empty

  PoseSE3 pose(int frame) const {
    if (!explicit_poses.empty()) return explicit_poses.at(std::size_t(frame));
    int moving = 0;
    for (int i = 1; i <= frame; ++i) {
      bool still = false;
      for (const auto& [first, len] : stationary) still |= i >= first && i < first + len;
      if (!still) ++moving;
    }
    const double m = moving;
    const double phase = 2.0 * std::numbers::pi * m / wobble_period;
    const Vec3 pos = start.translation() + velocity * m + wobble * std::sin(phase);
    Twist xi = Twist::Zero();
    xi.head<3>() = angular_velocity_deg * (std::numbers::pi / 180.0) * m;
    const Eigen::Quaterniond q = start.rotation() * se3_exp(xi).rotation();
    return {q, pos};
  }
};

struct BrightnessSpec {
  bool enabled = false;
  std::uint64_t seed = 7;
  double amplitude = 0.08;
};

struct SceneSpec {
  Surface surface = Surface::heightfield(40.0, 3.0, 0.05);
  Texture texture;
  TrajectorySpec trajectory;
  Intrinsics intrinsics{250.0, 250.0, 159.5, 127.5, 320, 256};
  int frame_count = 10;
  double true_scale = 7.5;  // mm per relative-depth unit
  double frame_interval = 0.04;  // seconds
  BrightnessSpec brightness;
  Vec3 lever_arm = Vec3::Zero();  // kinematics frame offset in camera coordinates (mm)
  double kinematics_noise_sigma = 0.0;  // mm, Gaussian on kinematics positions
  std::uint64_t seed = 42;

  void validate() const {
    if (!(true_scale > 0)) throw Error(ErrorCode::InvalidArgument, "true_scale must be > 0");
    if (frame_count < 2) throw Error(ErrorCode::InvalidArgument, "frame_count must be >= 2");
    if (!intrinsics.valid()) throw Error(ErrorCode::InvalidArgument, "invalid intrinsics");
    if (!(frame_interval > 0)) throw Error(ErrorCode::InvalidArgument, "frame_interval");
    if (!(kinematics_noise_sigma >= 0)) throw Error(ErrorCode::InvalidArgument, "noise sigma");
  }
};

struct SyntheticFrame {
  ImageGray image;        // clean render
  ImageGray observed;     // brightness-perturbed render (== image when disabled)
  FlowField flow;         // calibrating flow: observed + flow == image
  DepthMap depth_mm;      // ground-truth metric depth
  DepthMap depth_rel;     // depth_mm / true_scale
  PoseSE3 pose;           // camera-to-world, mm
  double timestamp = 0.0;
};

struct SyntheticSequence {
  SceneSpec spec;
  std::vector<SyntheticFrame> frames;
  KinematicsTrajectory ground_truth;  // camera poses
  KinematicsTrajectory kinematics;    // robot-reported poses

  const Intrinsics& intrinsics() const { return spec.intrinsics; }
};

struct RenderedView {
  ImageGray image;
  DepthMap depth;  // mm
};

/// Ray-casts one view from camera-to-world pose `pose`.
inline RenderedView render_view(const SceneSpec& spec, const PoseSE3& pose) {
  const Intrinsics& k = spec.intrinsics;
  RenderedView v{ImageGray(k.width, k.height, 0.0), DepthMap(k.width, k.height,
                                                             DepthUnits::Millimetres)};
  const Mat3 r = pose.rotation_matrix();
  const Vec3 o = pose.translation();
  parallel_for_blocks(std::size_t(k.height), 8, [&](std::size_t y0, std::size_t y1, std::size_t) {
    for (int y = int(y0); y < int(y1); ++y) {
      for (int x = 0; x < k.width; ++x) {
        const Vec3 dc((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
        const Vec3 dw = r * dc;
        const auto s = spec.surface.intersect(o, dw);
        if (!s) continue;
        v.depth.set(x, y, *s);  // z of o + s * dw in the camera frame is s
        v.image(x, y) = spec.texture.intensity(o + *s * dw);
      }
    }
  });
  return v;
}

/// Smooth additive brightness field for frame `i`.
inline FlowField brightness_field(const BrightnessSpec& b, const Intrinsics& k, int i) {
  std::mt19937_64 rng(b.seed * 1000003ULL + std::uint64_t(i));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double p1 = uni(rng) * 2 * std::numbers::pi, p2 = uni(rng) * 2 * std::numbers::pi;
  const double fu = 0.5 + uni(rng), fv = 0.5 + uni(rng);
  const double gx = uni(rng) - 0.5, gy = uni(rng) - 0.5;
  FlowField f(k.width, k.height);
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const double u = double(x) / k.width, v = double(y) / k.height;
      const double wave = std::sin(2 * std::numbers::pi * fu * u + p1) *
                          std::cos(2 * std::numbers::pi * fv * v + p2);
      f(x, y) = b.amplitude * (0.6 * wave + 0.4 * (gx * (u - 0.5) + gy * (v - 0.5)) * 2.0);
    }
  }
  return f;
}

/// Additive Gaussian noise on valid depths; sigma = 0 is the identity.
inline DepthMap inject_noise(const DepthMap& d, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0)) throw Error(ErrorCode::InvalidArgument, "sigma must be >= 0");
  if (sigma == 0) return d;
  DepthMap out = d;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (std::size_t i = 0; i < out.depth.size(); ++i) {
    if (!out.mask.data[i]) continue;
    const double v = out.depth.data[i] + n(rng);
    out.depth.data[i] = v > 0 ? v : 0.0;
    out.mask.data[i] = v > 0;
  }
  return out;
}

inline ImageGray inject_noise(const ImageGray& img, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0)) throw Error(ErrorCode::InvalidArgument, "sigma must be >= 0");
  if (sigma == 0) return img;
  ImageGray out = img;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (double& v : out.data) v = std::clamp(v + n(rng), 0.0, 1.0);
  return out;
}

/// Gaussian noise on trajectory positions.
inline KinematicsTrajectory inject_noise(const KinematicsTrajectory& traj, double sigma,
                                         std::uint64_t seed) {
  if (!(sigma >= 0)) throw Error(ErrorCode::InvalidArgument, "sigma must be >= 0");
  if (sigma == 0) return traj;
  KinematicsTrajectory out = traj;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& e : out.entries) {
    Vec3 t = e.pose.translation();
    for (int c = 0; c < 3; ++c) t[c] += n(rng);
    e.pose = PoseSE3(e.pose.rotation(), t);
  }
  return out;
}

/// Scales every step length c_{i+1} - c_i by (1 + eps_i), eps_i ~ U(-a, a):
/// a multiplicative error model on per-step translation norms.
inline KinematicsTrajectory perturb_step_lengths(const KinematicsTrajectory& traj,
                                                 double amplitude, std::uint64_t seed) {
  KinematicsTrajectory out = traj;
  if (traj.size() < 2 || amplitude == 0) return out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-amplitude, amplitude);
  Vec3 c = traj.entries[0].pose.translation();
  for (std::size_t i = 1; i < traj.size(); ++i) {
    const Vec3 step = traj.entries[i].pose.translation() - traj.entries[i - 1].pose.translation();
    c += (1.0 + uni(rng)) * step;
    out.entries[i].pose = PoseSE3(traj.entries[i].pose.rotation(), c);
  }
  return out;
}

/// Mean central-difference gradient magnitude over the image.
inline double gradient_energy(const ImageGray& img) {
  double sum = 0;
  std::size_t n = 0;
  for (int y = 1; y + 1 < img.height; ++y) {
    for (int x = 1; x + 1 < img.width; ++x) {
      const double gx = 0.5 * (img(x + 1, y) - img(x - 1, y));
      const double gy = 0.5 * (img(x, y + 1) - img(x, y - 1));
      sum += std::sqrt(gx * gx + gy * gy);
      ++n;
    }
  }
  return n ? sum / double(n) : 0.0;
}

inline constexpr double kMinGradientEnergy = 1e-3;

inline SyntheticSequence render_sequence(const SceneSpec& spec) {
  spec.validate();
  SyntheticSequence seq;
  seq.spec = spec;
  seq.frames.resize(std::size_t(spec.frame_count));
  const PoseSE3 lever = PoseSE3::translation(spec.lever_arm);
  for (int i = 0; i < spec.frame_count; ++i) {
    SyntheticFrame& f = seq.frames[std::size_t(i)];
    f.pose = spec.trajectory.pose(i);
    f.timestamp = i * spec.frame_interval;
    RenderedView v = render_view(spec, f.pose);
    if (v.depth.valid_count() == 0) {
      throw Error(ErrorCode::NoSurfaceVisible, "frame " + std::to_string(i));
    }
    if (i == 0 && gradient_energy(v.image) < kMinGradientEnergy) {
      throw Error(ErrorCode::InvalidArgument, "texture is too flat for photometric alignment");
    }
    f.image = std::move(v.image);
    f.depth_mm = std::move(v.depth);
    f.depth_rel = f.depth_mm;
    f.depth_rel.units = DepthUnits::Relative;
    for (std::size_t p = 0; p < f.depth_rel.depth.size(); ++p) {
      if (f.depth_rel.mask.data[p]) {
        f.depth_rel.depth.data[p] = f.depth_mm.depth.data[p] / spec.true_scale;
      }
    }
    if (spec.brightness.enabled) {
      const FlowField b = brightness_field(spec.brightness, spec.intrinsics, i);
      f.observed = ImageGray(f.image.width, f.image.height);
      f.flow = FlowField(f.image.width, f.image.height);
      for (std::size_t p = 0; p < f.image.size(); ++p) {
        f.observed.data[p] = std::clamp(f.image.data[p] + b.data[p], 0.0, 1.0);
        f.flow.data[p] = -b.data[p];
      }
    } else {
      f.observed = f.image;
      f.flow = FlowField(f.image.width, f.image.height, 0.0);
    }
    seq.ground_truth.entries.push_back({f.timestamp, f.pose, i});
    seq.kinematics.entries.push_back({f.timestamp, f.pose * lever, i});
  }
  seq.kinematics = inject_noise(seq.kinematics, spec.kinematics_noise_sigma, spec.seed ^ 0x5eedULL);
  return seq;
}

}  // namespace metricdepth::synth
