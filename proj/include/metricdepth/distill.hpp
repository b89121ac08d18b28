#pragma once

// Distillation targets: the depth loss against ensemble depth and export of
// (image, metric depth) training pairs.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "metricdepth/ddso.hpp"
#include "metricdepth/error.hpp"
#include "metricdepth/imaging.hpp"
#include "metricdepth/io.hpp"

namespace metricdepth {

inline constexpr double kDefaultDistillTheta = 0.85;

/// (1 - theta) mean|ensem - cand| + 0.5 theta (1 - SSIM) over jointly valid
/// pixels. SSIM sees both maps min-max normalized over the joint valid region.
inline double distill_loss(const DepthMap& ensem, const DepthMap& cand,
                           double theta = kDefaultDistillTheta, int window = 7) {
  if (ensem.width() != cand.width() || ensem.height() != cand.height()) {
    throw Error(ErrorCode::ShapeMismatch, "distill_loss inputs");
  }
  if (ensem.units != DepthUnits::Millimetres || cand.units != DepthUnits::Millimetres) {
    throw Error(ErrorCode::UnitMismatch, "distill_loss expects metric depth");
  }
  if (!(theta >= 0.0 && theta <= 1.0)) throw Error(ErrorCode::InvalidArgument, "theta");
  Mask joint(ensem.width(), ensem.height(), 0);
  double l1 = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    if (!ensem.mask.data[i] || !cand.mask.data[i]) continue;
    joint.data[i] = 1;
    const double a = ensem.depth.data[i], b = cand.depth.data[i];
    l1 += std::abs(a - b);
    lo = std::min({lo, a, b});
    hi = std::max({hi, a, b});
    ++n;
  }
  if (n == 0) throw Error(ErrorCode::EmptyMask, "no jointly valid depth");
  l1 /= double(n);
  if (theta == 0.0) return l1;

  const double range = hi - lo;
  auto normalize = [&](const DepthMap& d) {
    ImageGray out(d.width(), d.height(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (joint.data[i] && range > 0) out.data[i] = (d.depth.data[i] - lo) / range;
    }
    return out;
  };
  const SsimResult s = ssim(normalize(ensem), normalize(cand), window, &joint);
  if (s.count == 0) throw Error(ErrorCode::EmptyMask, "no pixel with a full SSIM window");
  return (1.0 - theta) * l1 + 0.5 * theta * (1.0 - s.mean);
}

/// Input to the training-set export: an image and its relative depth.
struct DistillFrame {
  ImageGray image;
  DepthMap relative_depth;
  int frame_index = 0;
};

struct DistillPair {
  std::string image;  // path relative to the export directory
  std::string depth;
  DepthMap ensem_depth;  // as stored on disk (single precision values)
  double r_filtered = 0.0;
  int frame_index = 0;
};

struct DistillManifest {
  std::vector<DistillPair> pairs;
  std::string units = "mm";
  std::string depth_format = "pfm";
};

namespace detail {
/// Rounds every depth to float, the precision of the PFM payload.
inline DepthMap quantize_to_float(DepthMap d) {
  for (double& v : d.depth.data) v = double(static_cast<float>(v));
  return d;
}
}  // namespace detail

/// Writes images/NNNNNN.png, depth/NNNNNN.pfm and manifest.json into out_dir.
/// `scales` holds one (possibly backfilled) r~ per frame.
inline DistillManifest export_training_set(const std::vector<DistillFrame>& frames,
                                           const std::vector<std::optional<double>>& scales,
                                           const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (scales.size() < frames.size()) {
    throw Error(ErrorCode::MissingScale, "fewer scales than frames");
  }
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (!scales[i]) {
      throw Error(ErrorCode::MissingScale,
                  "frame " + std::to_string(frames[i].frame_index) + " has no filtered scale");
    }
  }
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  fs::create_directories(fs::path(out_dir) / "depth", ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + out_dir + ": " + ec.message());

  DistillManifest m;
  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    DistillPair p;
    p.frame_index = f.frame_index;
    p.r_filtered = *scales[i];
    p.image = "images/" + io::frame_name(f.frame_index, ".png");
    p.depth = "depth/" + io::frame_name(f.frame_index, ".pfm");
    p.ensem_depth = detail::quantize_to_float(ensemble_depth(f.relative_depth, p.r_filtered));
    io::write_image_png((fs::path(out_dir) / p.image).string(), f.image);
    io::write_depth_pfm((fs::path(out_dir) / p.depth).string(), p.ensem_depth);
    pairs.push_back({{"image", p.image},
                     {"depth", p.depth},
                     {"r_filtered", p.r_filtered},
                     {"frame_index", p.frame_index}});
    m.pairs.push_back(std::move(p));
  }
  nlohmann::json doc = {{"pairs", pairs}, {"units", m.units}, {"depth_format", m.depth_format}};
  io::write_text((fs::path(out_dir) / "manifest.json").string(), doc.dump(2) + "\n");
  return m;
}

/// Convenience overload: per-frame scales from a filtered series (sample k
/// serves frame k + 1).
inline DistillManifest export_training_set(const std::vector<DistillFrame>& frames,
                                           const ScaleSeries& series, const std::string& out_dir,
                                           bool backfill = true) {
  return export_training_set(frames, per_frame_scale(series, frames.size(), backfill), out_dir);
}

inline DistillManifest load_training_set(const std::string& dir) {
  namespace fs = std::filesystem;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_text((fs::path(dir) / "manifest.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("manifest: ") + e.what());
  }
  DistillManifest m;
  try {
    m.units = doc.at("units").get<std::string>();
    m.depth_format = doc.value("depth_format", std::string("pfm"));
    for (const auto& j : doc.at("pairs")) {
      DistillPair p;
      p.image = j.at("image").get<std::string>();
      p.depth = j.at("depth").get<std::string>();
      p.r_filtered = j.at("r_filtered").get<double>();
      p.frame_index = j.at("frame_index").get<int>();
      p.ensem_depth =
          io::read_depth_pfm((fs::path(dir) / p.depth).string(), DepthUnits::Millimetres);
      m.pairs.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("manifest: ") + e.what());
  }
  if (m.units != "mm") throw Error(ErrorCode::UnitMismatch, "manifest units " + m.units);
  return m;
}

}  // namespace metricdepth
