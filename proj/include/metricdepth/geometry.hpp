#pragma once

// Pinhole camera, rigid transforms and the pixel warp shared by view
// synthesis, odometry residuals and fusion.

#include <cmath>
#include <numbers>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "metricdepth/error.hpp"

namespace metricdepth {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
/// se(3) twist, rotation first: (wx, wy, wz, vx, vy, vz).
using Twist = Eigen::Matrix<double, 6, 1>;
/// Camera-frame point; same units as the enclosing pose translation.
using Point3 = Vec3;

/// Continuous pixel coordinate: u = column, v = row.
struct PixelCoord {
  double u = 0.0;
  double v = 0.0;
};

/// Coordinates this far outside the image still count as inside (round-off at the border).
inline constexpr double kBorderEps = 1e-6;

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  bool valid() const {
    return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 && cx < width && cy >= 0 &&
           cy < height;
  }

  /// Inside the pixel-centre rectangle, allowing kBorderEps of round-off.
  bool contains(const PixelCoord& p) const {
    return p.u >= -kBorderEps && p.v >= -kBorderEps && p.u <= width - 1 + kBorderEps &&
           p.v <= height - 1 + kBorderEps;
  }

  /// Intrinsics of a 2x2 box-downsampled image (pixel centres at integer coords).
  Intrinsics downsampled() const {
    return {fx * 0.5, fy * 0.5, (cx + 0.5) * 0.5 - 0.5, (cy + 0.5) * 0.5 - 0.5, width / 2,
            height / 2};
  }

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }
};

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

/// Rigid transform stored as unit quaternion + translation.
class PoseSE3 {
 public:
  PoseSE3() : q_(Eigen::Quaterniond::Identity()), t_(Vec3::Zero()) {}
  PoseSE3(const Eigen::Quaterniond& q, const Vec3& t) : q_(q.normalized()), t_(t) {}
  PoseSE3(const Mat3& r, const Vec3& t) : q_(Eigen::Quaterniond(r).normalized()), t_(t) {}

  static PoseSE3 identity() { return {}; }
  static PoseSE3 translation(const Vec3& t) { return {Eigen::Quaterniond::Identity(), t}; }
  static PoseSE3 from_matrix(const Mat4& m) {
    return {Mat3(m.topLeftCorner<3, 3>()), Vec3(m.topRightCorner<3, 1>())};
  }

  const Eigen::Quaterniond& rotation() const { return q_; }
  const Vec3& translation() const { return t_; }
  Mat3 rotation_matrix() const { return q_.toRotationMatrix(); }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation_matrix();
    m.topRightCorner<3, 1>() = t_;
    return m;
  }

  Vec3 operator*(const Vec3& x) const { return q_ * x + t_; }

  PoseSE3 operator*(const PoseSE3& b) const {
    Eigen::Quaterniond q = q_ * b.q_;
    q.normalize();
    return {q, q_ * b.t_ + t_};
  }

  PoseSE3 inverse() const {
    const Eigen::Quaterniond qi = q_.conjugate();
    return {qi, -(qi * t_)};
  }

  /// Rotation angle in radians, in [0, pi].
  double angle() const {
    const double w = std::min(1.0, std::abs(q_.w()));
    return 2.0 * std::atan2(q_.vec().norm(), w);
  }

 private:
  Eigen::Quaterniond q_;
  Vec3 t_;
};

inline PoseSE3 compose(const PoseSE3& a, const PoseSE3& b) { return a * b; }
inline PoseSE3 inverse(const PoseSE3& a) { return a.inverse(); }

inline PoseSE3 se3_exp(const Twist& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = hat(w);
  double a, b;  // V = I + a W + b W^2
  Eigen::Quaterniond q;
  if (theta < 1e-5) {
    a = 0.5 - theta2 / 24.0;
    b = 1.0 / 6.0 - theta2 / 120.0;
    // First terms of the quaternion series keep the small-angle case accurate to ~1e-20.
    const double half_sinc = 0.5 - theta2 / 48.0;
    q = Eigen::Quaterniond(1.0 - theta2 / 8.0, half_sinc * w.x(), half_sinc * w.y(),
                           half_sinc * w.z());
  } else {
    a = (1.0 - std::cos(theta)) / theta2;
    b = (theta - std::sin(theta)) / (theta2 * theta);
    q = Eigen::Quaterniond(Eigen::AngleAxisd(theta, w / theta));
  }
  const Mat3 V = Mat3::Identity() + a * W + b * W * W;
  return {q, V * v};
}

inline Twist se3_log(const PoseSE3& t) {
  Eigen::Quaterniond q = t.rotation();
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  const double sin_half = q.vec().norm();
  const double theta = 2.0 * std::atan2(sin_half, q.w());
  if (std::abs(theta - std::numbers::pi) < 1e-6) {
    throw Error(ErrorCode::LogNearPi, "rotation angle within 1e-6 of pi");
  }
  Vec3 w;
  if (sin_half < 1e-10) {
    w = 2.0 * q.vec() / q.w();
  } else {
    w = q.vec() * (theta / sin_half);
  }
  const Mat3 W = hat(w);
  const double theta2 = theta * theta;
  double c;  // V^-1 = I - W/2 + c W^2
  if (theta < 1e-5) {
    c = 1.0 / 12.0 + theta2 / 720.0;
  } else {
    c = (1.0 - theta * std::sin(theta) / (2.0 * (1.0 - std::cos(theta)))) / theta2;
  }
  const Mat3 Vinv = Mat3::Identity() - 0.5 * W + c * W * W;
  Twist xi;
  xi.head<3>() = w;
  xi.tail<3>() = Vinv * t.translation();
  return xi;
}

/// Inverse projection pi^-1.
inline Point3 backproject(const PixelCoord& p, double depth, const Intrinsics& k) {
  if (!(depth > 0.0)) throw Error(ErrorCode::NonPositiveDepth, "depth must be > 0");
  return {(p.u - k.cx) * depth / k.fx, (p.v - k.cy) * depth / k.fy, depth};
}

/// Projection pi; the result may lie outside the image.
inline PixelCoord project(const Point3& x, const Intrinsics& k) {
  if (x.z() <= 1e-9) throw Error(ErrorCode::PointBehindCamera, "z <= 1e-9");
  return {k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy};
}

struct WarpResult {
  PixelCoord pixel;
  Point3 point;  // transformed point in the destination camera
  bool valid = false;
};

/// W(p, T) = pi(T * pi^-1(p, d)); invalid if the point ends up behind the
/// camera or outside the image.
inline WarpResult warp_pixel(const PixelCoord& p, double depth, const PoseSE3& t,
                             const Intrinsics& k) {
  WarpResult r;
  r.point = t * backproject(p, depth, k);
  if (r.point.z() <= 1e-9) return r;
  r.pixel = project(r.point, k);
  r.valid = k.contains(r.pixel);
  return r;
}

inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }
inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

}  // namespace metricdepth
