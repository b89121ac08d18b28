#pragma once

// Raster and point-cloud file formats: PFM (float depth / flow), PNG (8/16
// bit images, 16 bit depth at 0.1 mm per unit) and binary PLY clouds.

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "metricdepth/error.hpp"
#include "metricdepth/geometry.hpp"
#include "metricdepth/imaging.hpp"

namespace metricdepth::io {

static_assert(std::endian::native == std::endian::little, "PFM/PLY writers assume little endian");

// ---------------------------------------------------------------- PFM

/// Single-channel little-endian PFM (scale -1.0), rows stored bottom-up.
inline void write_pfm(const std::string& path, const Raster<double>& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << "Pf\n" << r.width << " " << r.height << "\n-1.0\n";
  std::vector<float> row(std::size_t(r.width));
  for (int y = r.height - 1; y >= 0; --y) {
    for (int x = 0; x < r.width; ++x) row[std::size_t(x)] = static_cast<float>(r(x, y));
    out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size() * 4));
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

inline Raster<double> read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  in >> magic >> w >> h >> scale;
  in.get();  // single whitespace before the payload
  if (!in || (magic != "Pf" && magic != "PF") || w <= 0 || h <= 0 || scale == 0) {
    throw Error(ErrorCode::ParseError, "bad PFM header in " + path);
  }
  const int channels = magic == "PF" ? 3 : 1;
  const bool little = scale < 0;
  std::vector<float> buf(std::size_t(w) * h * channels);
  in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
  if (!in) throw Error(ErrorCode::IoError, "truncated PFM " + path);
  if (!little) {
    for (float& f : buf) {
      const std::uint32_t u = std::bit_cast<std::uint32_t>(f);
      f = std::bit_cast<float>((u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24));
    }
  }
  Raster<double> r(w, h);
  for (int y = 0; y < h; ++y) {
    const float* src = &buf[std::size_t(h - 1 - y) * w * channels];
    for (int x = 0; x < w; ++x) {
      const float* px = src + std::size_t(x) * channels;
      r(x, y) = channels == 1 ? double(px[0]) : luma(px[0], px[1], px[2]);
    }
  }
  return r;
}

/// Invalid depths are stored as 0.
inline void write_depth_pfm(const std::string& path, const DepthMap& d) {
  write_pfm(path, d.depth);
}

inline DepthMap read_depth_pfm(const std::string& path, DepthUnits units) {
  Raster<double> r = read_pfm(path);
  return DepthMap::from_values(r.width, r.height, std::move(r.data), units);
}

// ---------------------------------------------------------------- PNG

namespace detail {
struct PngWriteDeleter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteDeleter() { png_destroy_write_struct(&png, &info); }
};
struct PngReadDeleter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadDeleter() { png_destroy_read_struct(&png, &info, nullptr); }
};
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

inline void write_png_gray(const std::string& path, int w, int h, int bit_depth,
                           const std::vector<std::uint16_t>& values) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error(ErrorCode::IoError, "cannot write " + path);
  PngWriteDeleter ctx;
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!ctx.png) throw Error(ErrorCode::IoError, "png_create_write_struct failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.info) throw Error(ErrorCode::IoError, "png_create_info_struct failed");
  const int bytes = bit_depth == 16 ? 2 : 1;
  std::vector<png_byte> row(std::size_t(w) * bytes);
  if (setjmp(png_jmpbuf(ctx.png))) throw Error(ErrorCode::IoError, "libpng error writing " + path);
  png_init_io(ctx.png, fp.get());
  png_set_IHDR(ctx.png, ctx.info, png_uint_32(w), png_uint_32(h), bit_depth, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::uint16_t v = values[std::size_t(y) * w + x];
      if (bytes == 2) {
        row[std::size_t(x) * 2] = png_byte(v >> 8);  // PNG is big endian
        row[std::size_t(x) * 2 + 1] = png_byte(v & 0xff);
      } else {
        row[std::size_t(x)] = png_byte(v);
      }
    }
    png_write_row(ctx.png, row.data());
  }
  png_write_end(ctx.png, nullptr);
}

/// Reads any PNG as gray samples scaled to [0, max] of its bit depth.
inline std::vector<std::uint16_t> read_png_gray(const std::string& path, int& w, int& h,
                                                int& bit_depth) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error(ErrorCode::IoError, "cannot open " + path);
  PngReadDeleter ctx;
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!ctx.png) throw Error(ErrorCode::IoError, "png_create_read_struct failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.info) throw Error(ErrorCode::IoError, "png_create_info_struct failed");
  std::vector<std::uint16_t> out;
  std::vector<png_byte> row;
  if (setjmp(png_jmpbuf(ctx.png))) throw Error(ErrorCode::ParseError, "libpng error reading " + path);
  png_init_io(ctx.png, fp.get());
  png_read_info(ctx.png, ctx.info);
  w = int(png_get_image_width(ctx.png, ctx.info));
  h = int(png_get_image_height(ctx.png, ctx.info));
  const int color = png_get_color_type(ctx.png, ctx.info);
  bit_depth = png_get_bit_depth(ctx.png, ctx.info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ctx.png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(ctx.png);
  if (bit_depth < 8) bit_depth = 8;
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(ctx.png);
  png_read_update_info(ctx.png, ctx.info);
  const int channels = png_get_channels(ctx.png, ctx.info);
  const int bytes = bit_depth == 16 ? 2 : 1;
  row.resize(png_get_rowbytes(ctx.png, ctx.info));
  out.resize(std::size_t(w) * h);
  const double maxv = bytes == 2 ? 65535.0 : 255.0;
  for (int y = 0; y < h; ++y) {
    png_read_row(ctx.png, row.data(), nullptr);
    for (int x = 0; x < w; ++x) {
      auto sample = [&](int c) -> double {
        const std::size_t o = (std::size_t(x) * channels + c) * bytes;
        return bytes == 2 ? double((row[o] << 8) | row[o + 1]) : double(row[o]);
      };
      double v = channels >= 3 ? luma(sample(0), sample(1), sample(2)) : sample(0);
      out[std::size_t(y) * w + x] = std::uint16_t(std::clamp(std::lround(v), 0L, long(maxv)));
    }
  }
  return out;
}
}  // namespace detail

/// Gray image with intensities in [0, 1], 8 or 16 bit.
inline void write_image_png(const std::string& path, const ImageGray& img, int bit_depth = 16) {
  if (bit_depth != 8 && bit_depth != 16) throw Error(ErrorCode::InvalidArgument, "bit depth");
  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<std::uint16_t> v(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    v[i] = std::uint16_t(std::lround(std::clamp(img.data[i], 0.0, 1.0) * maxv));
  }
  detail::write_png_gray(path, img.width, img.height, bit_depth, v);
}

/// Reads a PNG as intensities in [0, 1]; RGB inputs are converted with BT.601 luma.
inline ImageGray read_image_png(const std::string& path) {
  int w = 0, h = 0, bd = 8;
  const auto v = detail::read_png_gray(path, w, h, bd);
  const double maxv = bd == 16 ? 65535.0 : 255.0;
  ImageGray img(w, h);
  for (std::size_t i = 0; i < v.size(); ++i) img.data[i] = double(v[i]) / maxv;
  return img;
}

inline constexpr double kDepthPngMmPerUnit = 0.1;

/// 16-bit depth PNG, 0.1 mm per unit; 0 marks invalid pixels.
inline void write_depth_png(const std::string& path, const DepthMap& d) {
  std::vector<std::uint16_t> v(d.depth.size(), 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (d.mask.data[i]) {
      v[i] = std::uint16_t(std::clamp(std::lround(d.depth.data[i] / kDepthPngMmPerUnit), 0L, 65535L));
    }
  }
  detail::write_png_gray(path, d.width(), d.height(), 16, v);
}

inline DepthMap read_depth_png(const std::string& path) {
  int w = 0, h = 0, bd = 16;
  const auto v = detail::read_png_gray(path, w, h, bd);
  std::vector<double> vals(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) vals[i] = double(v[i]) * kDepthPngMmPerUnit;
  return DepthMap::from_values(w, h, std::move(vals), DepthUnits::Millimetres);
}

// ---------------------------------------------------------------- PLY

struct CloudPoint {
  Vec3 position;
  Vec3 normal = Vec3::Zero();
  double intensity = 0.0;
  double confidence = 0.0;
};

/// Binary little-endian PLY: x y z nx ny nz intensity confidence (float32).
inline void write_ply(const std::string& path, const std::vector<CloudPoint>& pts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << pts.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\n"
         "property float ny\nproperty float nz\nproperty float intensity\n"
         "property float confidence\nend_header\n";
  for (const auto& p : pts) {
    const float v[8] = {float(p.position.x()), float(p.position.y()), float(p.position.z()),
                        float(p.normal.x()),   float(p.normal.y()),   float(p.normal.z()),
                        float(p.intensity),    float(p.confidence)};
    out.write(reinterpret_cast<const char*>(v), sizeof(v));
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

/// Reads vertex positions from an ascii or binary little-endian PLY.
inline std::vector<Vec3> read_ply_positions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::string line, format;
  std::size_t n_vertex = 0;
  bool in_vertex = false, seen_vertex = false;
  struct Prop {
    std::string name;
    std::string type;
  };
  std::vector<Prop> props;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw Error(ErrorCode::ParseError, path + " is not a PLY file");
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string kw;
    ss >> kw;
    if (kw == "format") {
      ss >> format;
    } else if (kw == "element") {
      std::string name;
      std::size_t count = 0;
      ss >> name >> count;
      if (seen_vertex && !in_vertex) continue;
      in_vertex = name == "vertex";
      if (in_vertex) {
        n_vertex = count;
        seen_vertex = true;
      } else if (!seen_vertex) {
        throw Error(ErrorCode::ParseError, "PLY elements before vertex are not supported");
      }
    } else if (kw == "property" && in_vertex) {
      Prop p;
      ss >> p.type;
      if (p.type == "list") throw Error(ErrorCode::ParseError, "list property in vertex element");
      ss >> p.name;
      props.push_back(p);
    } else if (kw == "end_header") {
      break;
    }
  }
  auto size_of = [](const std::string& t) -> int {
    if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
    if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
    if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" ||
        t == "float32")
      return 4;
    if (t == "double" || t == "float64") return 8;
    throw Error(ErrorCode::ParseError, "unknown PLY type " + t);
  };
  int ix = -1, iy = -1, iz = -1;
  for (int i = 0; i < int(props.size()); ++i) {
    if (props[i].name == "x") ix = i;
    if (props[i].name == "y") iy = i;
    if (props[i].name == "z") iz = i;
  }
  if (ix < 0 || iy < 0 || iz < 0) throw Error(ErrorCode::ParseError, "PLY without x/y/z");
  std::vector<Vec3> pts(n_vertex);
  std::vector<double> vals(props.size());
  if (format == "ascii") {
    for (std::size_t v = 0; v < n_vertex; ++v) {
      for (auto& x : vals) {
        if (!(in >> x)) throw Error(ErrorCode::ParseError, "truncated ascii PLY");
      }
      pts[v] = Vec3(vals[std::size_t(ix)], vals[std::size_t(iy)], vals[std::size_t(iz)]);
    }
  } else if (format == "binary_little_endian") {
    for (std::size_t v = 0; v < n_vertex; ++v) {
      for (std::size_t p = 0; p < props.size(); ++p) {
        const auto& t = props[p].type;
        unsigned char b[8];
        const int sz = size_of(t);
        if (!in.read(reinterpret_cast<char*>(b), sz)) {
          throw Error(ErrorCode::ParseError, "truncated binary PLY");
        }
        double x = 0;
        if (t == "float" || t == "float32") {
          float f;
          std::memcpy(&f, b, 4);
          x = f;
        } else if (t == "double" || t == "float64") {
          std::memcpy(&x, b, 8);
        } else if (t == "uchar" || t == "uint8") {
          x = b[0];
        } else if (t == "char" || t == "int8") {
          x = static_cast<signed char>(b[0]);
        } else if (sz == 2) {
          std::uint16_t u;
          std::memcpy(&u, b, 2);
          x = (t == "short" || t == "int16") ? double(std::int16_t(u)) : double(u);
        } else {
          std::uint32_t u;
          std::memcpy(&u, b, 4);
          x = (t == "int" || t == "int32") ? double(std::int32_t(u)) : double(u);
        }
        vals[p] = x;
      }
      pts[v] = Vec3(vals[std::size_t(ix)], vals[std::size_t(iy)], vals[std::size_t(iz)]);
    }
  } else {
    throw Error(ErrorCode::ParseError, "unsupported PLY format '" + format + "'");
  }
  return pts;
}

// ---------------------------------------------------------------- helpers

/// Regular files in `dir` with the given extension, sorted by name.
inline std::vector<std::string> list_files(const std::string& dir, const std::string& ext) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(ErrorCode::IoError, dir + " is not a directory");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string frame_name(int index, const std::string& ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return std::string(buf) + ext;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace metricdepth::io
