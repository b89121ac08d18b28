#pragma once

// Robot kinematics trajectories: TUM-format I/O, relative poses between
// entries and nearest-timestamp association with image streams.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "metricdepth/error.hpp"
#include "metricdepth/geometry.hpp"

namespace metricdepth {

struct TrajectoryEntry {
  double timestamp = 0.0;
  PoseSE3 pose;  // millimetres for metric trajectories
  std::optional<int> frame_index;
};

/// Time-ordered poses. Also used for estimated and ground-truth camera paths.
struct KinematicsTrajectory {
  std::vector<TrajectoryEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  const PoseSE3& pose(std::size_t i) const { return entries.at(i).pose; }
};

/// Parses "timestamp tx ty tz qx qy qz qw" lines; '#' lines are comments.
inline KinematicsTrajectory parse_tum(std::istream& in) {
  KinematicsTrajectory traj;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    double v[8];
    int n = 0;
    std::string tok;
    while (ss >> tok) {
      if (n >= 8) {
        n = 9;
        break;
      }
      char* end = nullptr;
      v[n] = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0' || !std::isfinite(v[n])) {
        throw Error(ErrorCode::ParseError, "line " + std::to_string(lineno) + ": bad number");
      }
      ++n;
    }
    if (n != 8) {
      throw Error(ErrorCode::ParseError, "line " + std::to_string(lineno) + ": expected 8 fields");
    }
    Eigen::Quaterniond q(v[7], v[4], v[5], v[6]);
    if (std::abs(q.norm() - 1.0) > 1e-3) {
      throw Error(ErrorCode::NonUnitQuaternion, "line " + std::to_string(lineno));
    }
    if (!traj.entries.empty() && !(v[0] > traj.entries.back().timestamp)) {
      throw Error(ErrorCode::NonMonotonicTimestamps, "line " + std::to_string(lineno));
    }
    traj.entries.push_back({v[0], PoseSE3(q, Vec3(v[1], v[2], v[3])), std::nullopt});
  }
  return traj;
}

inline KinematicsTrajectory load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return parse_tum(in);
}

/// Writes with 17 significant digits so a reload reproduces every double.
inline void write_tum(std::ostream& out, const KinematicsTrajectory& traj,
                      const std::string& units = "mm") {
  out << "# timestamp tx ty tz qx qy qz qw\n# units: " << units << "\n";
  char buf[512];
  for (const auto& e : traj.entries) {
    const auto& q = e.pose.rotation();
    const auto& t = e.pose.translation();
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                  e.timestamp, t.x(), t.y(), t.z(), q.x(), q.y(), q.z(), q.w());
    out << buf;
  }
}

inline void save_trajectory(const std::string& path, const KinematicsTrajectory& traj,
                            const std::string& units = "mm") {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  write_tum(out, traj, units);
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

/// inverse(pose_i) * pose_j: motion from entry i to entry j expressed in frame i.
inline PoseSE3 relative_pose(const KinematicsTrajectory& traj, std::size_t i, std::size_t j) {
  if (i >= traj.size() || j >= traj.size()) {
    throw Error(ErrorCode::IndexOutOfRange,
                "relative_pose(" + std::to_string(i) + ", " + std::to_string(j) + ")");
  }
  return traj.entries[i].pose.inverse() * traj.entries[j].pose;
}

struct TimestampAlignment {
  /// Matched kinematics entry per image; empty when nothing lies within max_dt.
  std::vector<std::optional<std::size_t>> index;
  std::vector<std::size_t> unmatched;

  bool complete() const { return unmatched.empty(); }
};

/// Nearest kinematics entry for every image timestamp (ties go to the earlier entry).
inline TimestampAlignment align_by_timestamp(const KinematicsTrajectory& traj,
                                             const std::vector<double>& image_timestamps,
                                             double max_dt = 0.05) {
  if (traj.empty() || image_timestamps.empty()) {
    throw Error(ErrorCode::InvalidArgument, "alignment needs non-empty inputs");
  }
  TimestampAlignment out;
  out.index.resize(image_timestamps.size());
  for (std::size_t i = 0; i < image_timestamps.size(); ++i) {
    const double t = image_timestamps[i];
    const auto it = std::lower_bound(
        traj.entries.begin(), traj.entries.end(), t,
        [](const TrajectoryEntry& e, double ts) { return e.timestamp < ts; });
    std::size_t best = std::size_t(it - traj.entries.begin());
    if (best == traj.size() ||
        (best > 0 && t - traj.entries[best - 1].timestamp <= traj.entries[best].timestamp - t)) {
      best = best == 0 ? 0 : best - 1;
    }
    if (std::abs(traj.entries[best].timestamp - t) <= max_dt) {
      out.index[i] = best;
    } else {
      out.unmatched.push_back(i);
    }
  }
  return out;
}

/// Pose at time t by SLERP / linear interpolation between bracketing entries
/// (clamped to the trajectory ends).
inline PoseSE3 interpolate_pose(const KinematicsTrajectory& traj, double t) {
  if (traj.empty()) throw Error(ErrorCode::InvalidArgument, "empty trajectory");
  const auto& e = traj.entries;
  if (t <= e.front().timestamp) return e.front().pose;
  if (t >= e.back().timestamp) return e.back().pose;
  const auto it = std::upper_bound(e.begin(), e.end(), t, [](double ts, const TrajectoryEntry& x) {
    return ts < x.timestamp;
  });
  const auto& b = *it;
  const auto& a = *(it - 1);
  const double s = (t - a.timestamp) / (b.timestamp - a.timestamp);
  return {a.pose.rotation().slerp(s, b.pose.rotation()),
          (1.0 - s) * a.pose.translation() + s * b.pose.translation()};
}

}  // namespace metricdepth
