#pragma once

// Raster containers and image-space operators: bilinear sampling, inverse
// depth conversion, appearance-flow brightness calibration, SSIM, the
// SSIM+L1 photometric loss and depth-based view synthesis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "metricdepth/error.hpp"
#include "metricdepth/geometry.hpp"
#include "metricdepth/parallel.hpp"

namespace metricdepth {

/// Row-major single-channel raster.
template <typename T>
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(int w, int h, T fill = T{}) : width(w), height(h), data(std::size_t(w) * h, fill) {}

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  T& operator()(int x, int y) { return data[std::size_t(y) * width + x]; }
  const T& operator()(int x, int y) const { return data[std::size_t(y) * width + x]; }

  template <typename U>
  bool same_shape(const Raster<U>& o) const {
    return width == o.width && height == o.height;
  }
};

/// Intensities in [0, 1].
using ImageGray = Raster<double>;
/// Inverse depth, >= 0.
using InverseDepthMap = Raster<double>;
/// Signed additive intensity offsets.
using FlowField = Raster<double>;
using Mask = Raster<std::uint8_t>;

enum class DepthUnits { Relative, Millimetres };

inline std::string to_string(DepthUnits u) {
  return u == DepthUnits::Relative ? "relative" : "mm";
}

/// Depth raster with validity mask; invalid pixels are excluded from every
/// loss and metric.
struct DepthMap {
  Raster<double> depth;
  Mask mask;
  DepthUnits units = DepthUnits::Relative;

  DepthMap() = default;
  DepthMap(int w, int h, DepthUnits u = DepthUnits::Relative)
      : depth(w, h, 0.0), mask(w, h, 0), units(u) {}

  /// Builds a map from raw values; entries that are not finite and > 0 are invalid.
  static DepthMap from_values(int w, int h, std::vector<double> values,
                              DepthUnits u = DepthUnits::Relative) {
    DepthMap d(w, h, u);
    d.depth.data = std::move(values);
    for (std::size_t i = 0; i < d.depth.size(); ++i) {
      const double v = d.depth.data[i];
      d.mask.data[i] = std::isfinite(v) && v > 0.0;
      if (!d.mask.data[i]) d.depth.data[i] = 0.0;
    }
    return d;
  }

  int width() const { return depth.width; }
  int height() const { return depth.height; }
  bool valid(int x, int y) const { return mask(x, y) != 0; }
  double operator()(int x, int y) const { return depth(x, y); }

  void set(int x, int y, double v) {
    const bool ok = std::isfinite(v) && v > 0.0;
    depth(x, y) = ok ? v : 0.0;
    mask(x, y) = ok;
  }

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(mask.data.begin(), mask.data.end(), 1));
  }
};

struct Sample {
  double value = 0.0;
  bool valid = false;
};

struct GradientSample {
  double value = 0.0;
  double du = 0.0;  // derivative of the bilinear interpolant along u
  double dv = 0.0;
  bool valid = false;
};

namespace detail {

struct BilinearCell {
  int x0, y0;
  double a, b;  // fractional offsets inside the cell
};

inline std::optional<BilinearCell> bilinear_cell(int w, int h, const PixelCoord& p) {
  if (!(p.u >= -kBorderEps && p.v >= -kBorderEps && p.u <= w - 1 + kBorderEps &&
        p.v <= h - 1 + kBorderEps)) {
    return std::nullopt;
  }
  const int x0 = w > 1 ? std::clamp(static_cast<int>(std::floor(p.u)), 0, w - 2) : 0;
  const int y0 = h > 1 ? std::clamp(static_cast<int>(std::floor(p.v)), 0, h - 2) : 0;
  return BilinearCell{x0, y0, p.u - x0, p.v - y0};
}

template <typename Get>
GradientSample bilinear_eval(const BilinearCell& c, int w, int h, Get get) {
  const int x1 = w > 1 ? c.x0 + 1 : c.x0;
  const int y1 = h > 1 ? c.y0 + 1 : c.y0;
  const double i00 = get(c.x0, c.y0), i10 = get(x1, c.y0);
  const double i01 = get(c.x0, y1), i11 = get(x1, y1);
  GradientSample s;
  // std::lerp is exact at the cell corners.
  const double top = std::lerp(i00, i10, c.a);
  const double bot = std::lerp(i01, i11, c.a);
  s.value = std::lerp(top, bot, c.b);
  s.du = (1.0 - c.b) * (i10 - i00) + c.b * (i11 - i01);
  s.dv = bot - top;
  s.valid = true;
  return s;
}

}  // namespace detail

/// The sampling operator <.>: bilinear interpolation of the four neighbours.
inline Sample bilinear_sample(const ImageGray& img, const PixelCoord& p) {
  const auto cell = detail::bilinear_cell(img.width, img.height, p);
  if (!cell) return {};
  const auto s = detail::bilinear_eval(*cell, img.width, img.height,
                                       [&](int x, int y) { return img(x, y); });
  return {s.value, true};
}

inline GradientSample bilinear_sample_gradient(const ImageGray& img, const PixelCoord& p) {
  const auto cell = detail::bilinear_cell(img.width, img.height, p);
  if (!cell) return {};
  return detail::bilinear_eval(*cell, img.width, img.height,
                               [&](int x, int y) { return img(x, y); });
}

/// Depth interpolation; invalid unless all four neighbours are valid.
inline GradientSample bilinear_sample_gradient(const DepthMap& d, const PixelCoord& p) {
  const auto cell = detail::bilinear_cell(d.width(), d.height(), p);
  if (!cell) return {};
  const int x1 = std::min(cell->x0 + 1, d.width() - 1);
  const int y1 = std::min(cell->y0 + 1, d.height() - 1);
  if (!d.valid(cell->x0, cell->y0) || !d.valid(x1, cell->y0) || !d.valid(cell->x0, y1) ||
      !d.valid(x1, y1)) {
    return {};
  }
  return detail::bilinear_eval(*cell, d.width(), d.height(),
                               [&](int x, int y) { return d(x, y); });
}

inline Sample bilinear_sample(const DepthMap& d, const PixelCoord& p) {
  const auto s = bilinear_sample_gradient(d, p);
  return {s.value, s.valid};
}

/// D = 1 / ID where ID >= eps; smaller inverse depths are marked invalid.
inline DepthMap invert_depth(const InverseDepthMap& id, double eps = 1e-4) {
  if (!(eps > 0.0)) throw Error(ErrorCode::InvalidArgument, "eps must be > 0");
  DepthMap d(id.width, id.height, DepthUnits::Relative);
  for (std::size_t i = 0; i < id.size(); ++i) {
    const double v = id.data[i];
    if (std::isfinite(v) && v >= eps) {
      d.depth.data[i] = 1.0 / v;
      d.mask.data[i] = 1;
    }
  }
  return d;
}

/// Reciprocal of every valid depth; invalid pixels map to 0.
inline InverseDepthMap to_inverse_depth(const DepthMap& d) {
  InverseDepthMap id(d.width(), d.height(), 0.0);
  for (std::size_t i = 0; i < id.size(); ++i) {
    if (d.mask.data[i]) id.data[i] = 1.0 / d.depth.data[i];
  }
  return id;
}

/// I'(p) = clamp(I(p) + U(p), 0, 1).
inline ImageGray apply_appearance_flow(const ImageGray& img, const FlowField& flow) {
  if (!img.same_shape(flow)) throw Error(ErrorCode::ShapeMismatch, "image/flow shape");
  ImageGray out(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i) {
    out.data[i] = std::clamp(img.data[i] + flow.data[i], 0.0, 1.0);
  }
  return out;
}

/// ITU-R BT.601 luma.
inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

struct SsimResult {
  double mean = 0.0;
  Raster<double> map;  // per-pixel SSIM, 0 where invalid
  Mask valid;
  std::size_t count = 0;
};

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// SSIM with a uniform window x window box and L = 1. A pixel contributes when
/// its window lies inside the image and (if a mask is given) is fully masked in.
inline SsimResult ssim(const ImageGray& a, const ImageGray& b, int window = 7,
                       const Mask* mask = nullptr) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "ssim inputs");
  if (mask && !a.same_shape(*mask)) throw Error(ErrorCode::ShapeMismatch, "ssim mask");
  if (window < 3 || window % 2 == 0) {
    throw Error(ErrorCode::InvalidArgument, "ssim window must be odd and >= 3");
  }
  const int w = a.width, h = a.height, r = window / 2;
  SsimResult res;
  res.map = Raster<double>(w, h, 0.0);
  res.valid = Mask(w, h, 0);
  if (w < window || h < window) return res;

  // Horizontal running sums of a, b, a^2, b^2, ab and mask.
  const int hw = w - 2 * r;
  std::vector<double> hs(std::size_t(hw) * h * 6, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = r; x < w - r; ++x) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0, sm = 0;
      for (int dx = -r; dx <= r; ++dx) {
        const double va = a(x + dx, y), vb = b(x + dx, y);
        sa += va;
        sb += vb;
        saa += va * va;
        sbb += vb * vb;
        sab += va * vb;
        sm += mask ? (*mask)(x + dx, y) != 0 : 1;
      }
      double* o = &hs[(std::size_t(y) * hw + (x - r)) * 6];
      o[0] = sa, o[1] = sb, o[2] = saa, o[3] = sbb, o[4] = sab, o[5] = sm;
    }
  }
  const double n = double(window) * window;
  double total = 0.0;
  for (int y = r; y < h - r; ++y) {
    for (int x = r; x < w - r; ++x) {
      double s[6] = {0, 0, 0, 0, 0, 0};
      for (int dy = -r; dy <= r; ++dy) {
        const double* o = &hs[(std::size_t(y + dy) * hw + (x - r)) * 6];
        for (int k = 0; k < 6; ++k) s[k] += o[k];
      }
      if (s[5] < n) continue;
      const double ma = s[0] / n, mb = s[1] / n;
      const double va = s[2] / n - ma * ma, vb = s[3] / n - mb * mb;
      const double cov = s[4] / n - ma * mb;
      const double num = (2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2);
      const double den = (ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2);
      const double v = num / den;
      res.map(x, y) = v;
      res.valid(x, y) = 1;
      total += v;
      ++res.count;
    }
  }
  res.mean = res.count ? total / double(res.count) : 0.0;
  return res;
}

inline constexpr double kDefaultPhotometricAlpha = 0.85;

/// L = alpha (1 - SSIM) / 2 + (1 - alpha) mean|target - synth| over masked pixels.
inline double photometric_loss(const ImageGray& target, const ImageGray& synth,
                               double alpha = kDefaultPhotometricAlpha,
                               const Mask* mask = nullptr, int window = 7) {
  if (!target.same_shape(synth)) throw Error(ErrorCode::ShapeMismatch, "loss inputs");
  if (mask && !target.same_shape(*mask)) throw Error(ErrorCode::ShapeMismatch, "loss mask");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidArgument, "alpha");
  double l1 = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (mask && !mask->data[i]) continue;
    l1 += std::abs(target.data[i] - synth.data[i]);
    ++n;
  }
  if (n == 0) throw Error(ErrorCode::EmptyMask, "no valid pixel in photometric loss");
  l1 /= double(n);
  if (alpha == 0.0) return l1;
  const SsimResult s = ssim(target, synth, window, mask);
  if (s.count == 0) throw Error(ErrorCode::EmptyMask, "no pixel with a full SSIM window");
  return alpha * (1.0 - s.mean) / 2.0 + (1.0 - alpha) * l1;
}

struct SynthesizedView {
  ImageGray image;
  Mask mask;
};

/// Re-renders `source` into the target viewpoint; `target_to_source` maps
/// target-camera points into the source camera.
inline SynthesizedView synthesize_view(const ImageGray& source, const DepthMap& target_depth,
                                       const PoseSE3& target_to_source, const Intrinsics& k) {
  if (!source.same_shape(target_depth.depth) || source.width != k.width ||
      source.height != k.height) {
    throw Error(ErrorCode::ShapeMismatch, "source/depth/intrinsics shape");
  }
  if (target_depth.valid_count() == 0) {
    throw Error(ErrorCode::EmptyMask, "target depth has no valid pixel");
  }
  SynthesizedView out{ImageGray(k.width, k.height, 0.0), Mask(k.width, k.height, 0)};
  parallel_for_blocks(std::size_t(k.height), 16, [&](std::size_t y0, std::size_t y1, std::size_t) {
    for (int y = int(y0); y < int(y1); ++y) {
      for (int x = 0; x < k.width; ++x) {
        if (!target_depth.valid(x, y)) continue;
        const auto w = warp_pixel({double(x), double(y)}, target_depth(x, y), target_to_source, k);
        if (!w.valid) continue;
        const Sample s = bilinear_sample(source, w.pixel);
        if (!s.valid) continue;
        out.image(x, y) = s.value;
        out.mask(x, y) = 1;
      }
    }
  });
  return out;
}

/// 2x2 box downsampling.
inline ImageGray downsample(const ImageGray& img) {
  ImageGray out(img.width / 2, img.height / 2);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      out(x, y) = 0.25 * (img(2 * x, 2 * y) + img(2 * x + 1, 2 * y) + img(2 * x, 2 * y + 1) +
                          img(2 * x + 1, 2 * y + 1));
    }
  }
  return out;
}

/// 2x2 min-pooling over valid depths; a block with no valid pixel is invalid.
inline DepthMap downsample(const DepthMap& d) {
  DepthMap out(d.width() / 2, d.height() / 2, d.units);
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      double m = std::numeric_limits<double>::infinity();
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          if (d.valid(2 * x + dx, 2 * y + dy)) m = std::min(m, d(2 * x + dx, 2 * y + dy));
        }
      }
      if (std::isfinite(m)) out.set(x, y, m);
    }
  }
  return out;
}

}  // namespace metricdepth
