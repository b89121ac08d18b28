#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "metricdepth/config.hpp"
#include "metricdepth/io.hpp"
#include "test_util.hpp"

namespace md = metricdepth;
namespace io = metricdepth::io;

TEST(Io, PfmRoundTripIsFloatExact) {
  std::mt19937_64 rng(1);
  mdtest::TempDir dir("pfm");
  md::Raster<double> r(7, 5);
  std::normal_distribution<double> n(0.0, 10.0);
  for (double& v : r.data) v = n(rng);
  io::write_pfm(dir / "a.pfm", r);
  const auto back = io::read_pfm(dir / "a.pfm");
  ASSERT_EQ(back.width, 7);
  ASSERT_EQ(back.height, 5);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(back.data[i], double(float(r.data[i])));
}

TEST(Io, PfmHeaderAndRowOrder) {
  mdtest::TempDir dir("pfm_hdr");
  md::Raster<double> r(2, 2);
  r.data = {1, 2, 3, 4};
  io::write_pfm(dir / "a.pfm", r);
  std::ifstream in(dir / "a.pfm", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  ASSERT_EQ(bytes.substr(0, 12), "Pf\n2 2\n-1.0\n");
  float first;
  std::memcpy(&first, bytes.data() + 12, 4);
  EXPECT_EQ(first, 3.0f);  // bottom row first
}

TEST(Io, PfmBigEndianAndColour) {
  mdtest::TempDir dir("pfm_be");
  {
    std::ofstream out(dir / "be.pfm", std::ios::binary);
    out << "Pf\n1 1\n1.0\n";
    const unsigned char be[4] = {0x40, 0x20, 0x00, 0x00};  // 2.5f
    out.write(reinterpret_cast<const char*>(be), 4);
  }
  EXPECT_EQ(io::read_pfm(dir / "be.pfm").data[0], 2.5);
  {
    std::ofstream out(dir / "rgb.pfm", std::ios::binary);
    out << "PF\n1 1\n-1.0\n";
    const float rgb[3] = {1.0f, 0.0f, 0.0f};
    out.write(reinterpret_cast<const char*>(rgb), 12);
  }
  EXPECT_NEAR(io::read_pfm(dir / "rgb.pfm").data[0], 0.299, 1e-7);
}

TEST(Io, PfmErrors) {
  mdtest::TempDir dir("pfm_err");
  try {
    io::read_pfm(dir / "missing.pfm");
    FAIL();
  } catch (const md::Error& e) {
    EXPECT_EQ(e.code(), md::ErrorCode::IoError);
  }
  io::write_text(dir / "bad.pfm", "P6\n1 1\n255\n");
  EXPECT_THROW(io::read_pfm(dir / "bad.pfm"), md::Error);
  io::write_text(dir / "short.pfm", "Pf\n4 4\n-1.0\nabc");
  EXPECT_THROW(io::read_pfm(dir / "short.pfm"), md::Error);
}

TEST(Io, DepthPfmMarksZeroInvalid) {
  mdtest::TempDir dir("dpfm");
  const auto d = md::DepthMap::from_values(3, 1, {5.0, 0.0, 2.5}, md::DepthUnits::Millimetres);
  io::write_depth_pfm(dir / "d.pfm", d);
  const auto back = io::read_depth_pfm(dir / "d.pfm", md::DepthUnits::Millimetres);
  EXPECT_EQ(back.mask.data, d.mask.data);
  EXPECT_EQ(back.depth.data, d.depth.data);
  EXPECT_EQ(back.units, md::DepthUnits::Millimetres);
}

TEST(Io, ImagePngRoundTrip) {
  std::mt19937_64 rng(2);
  mdtest::TempDir dir("png");
  const auto img = mdtest::random_image(13, 9, rng);
  io::write_image_png(dir / "a.png", img);
  const auto back = io::read_image_png(dir / "a.png");
  for (std::size_t i = 0; i < img.size(); ++i) {
    EXPECT_EQ(back.data[i], std::round(img.data[i] * 65535.0) / 65535.0);
  }
  io::write_image_png(dir / "b.png", img, 8);
  const auto b8 = io::read_image_png(dir / "b.png");
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(b8.data[i], img.data[i], 0.5 / 255 + 1e-12);
}

TEST(Io, DepthPngUsesTenthMillimetres) {
  mdtest::TempDir dir("dpng");
  const auto d = md::DepthMap::from_values(3, 1, {12.34, 0.0, 100.0}, md::DepthUnits::Millimetres);
  io::write_depth_png(dir / "d.png", d);
  const auto back = io::read_depth_png(dir / "d.png");
  EXPECT_NEAR(back(0, 0), 12.3, 1e-12);
  EXPECT_FALSE(back.valid(1, 0));
  EXPECT_NEAR(back(2, 0), 100.0, 1e-12);
  EXPECT_DOUBLE_EQ(io::kDepthPngMmPerUnit, 0.1);
}

TEST(Io, PlyRoundTrip) {
  mdtest::TempDir dir("ply");
  std::vector<io::CloudPoint> pts{{{1, 2, 3}, {0, 0, 1}, 0.5, 2.0}, {{-1, 0.25, 8}, {1, 0, 0}, 0.1, 1.0}};
  io::write_ply(dir / "c.ply", pts);
  const auto back = io::read_ply_positions(dir / "c.ply");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1], md::Vec3(-1, 0.25, 8));
  io::write_text(dir / "a.ply",
                 "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\n"
                 "property double z\nproperty uchar red\nend_header\n1 2 3 255\n4 5 6 0\n");
  const auto ascii = io::read_ply_positions(dir / "a.ply");
  ASSERT_EQ(ascii.size(), 2u);
  EXPECT_EQ(ascii[1], md::Vec3(4, 5, 6));
  io::write_text(dir / "bad.ply", "ply\nformat binary_big_endian 1.0\nend_header\n");
  EXPECT_THROW(io::read_ply_positions(dir / "bad.ply"), md::Error);
}

TEST(Io, ListFilesSortedByName) {
  mdtest::TempDir dir("list");
  for (const char* n : {"000002.pfm", "000000.pfm", "000001.pfm", "x.png"}) io::write_text(dir / n, "");
  const auto files = io::list_files(dir.str(), ".pfm");
  ASSERT_EQ(files.size(), 3u);
  EXPECT_EQ(std::filesystem::path(files[0]).filename(), "000000.pfm");
  EXPECT_EQ(std::filesystem::path(files[2]).filename(), "000002.pfm");
  EXPECT_THROW(io::list_files(dir / "nope", ".pfm"), md::Error);
  EXPECT_EQ(io::frame_name(42, ".png"), "000042.png");
}

TEST(Config, PipelineRoundTrip) {
  md::PipelineConfig c;
  c.ddso.window_n = 7;
  c.ddso.odometry.huber_delta_geo = 0.3;
  c.fusion.stride = 3;
  c.quality.reference_scale = 7.5;
  c.inputs.kinematics = "kin.tum";
  c.seed = 99;
  const auto j = md::to_json(c);
  const auto back = md::pipeline_config_from_json(j);
  EXPECT_EQ(md::to_json(back).dump(), j.dump());
  EXPECT_EQ(back.ddso.window_n, 7);
  EXPECT_EQ(*back.quality.reference_scale, 7.5);
}

TEST(Config, DefaultsPrintAndParse) {
  const auto j = md::to_json(md::PipelineConfig{});
  EXPECT_EQ(j["ddso"]["window_n"], 10);
  EXPECT_EQ(j["fusion"]["conf_threshold"], 1.5);
  EXPECT_EQ(j["fusion"]["stability_window"], 20);
  EXPECT_EQ(md::to_json(md::pipeline_config_from_json(md::Json::object())).dump(), j.dump());
}

TEST(Config, Validation) {
  auto expect_code = [](const std::string& text, md::ErrorCode code) {
    try {
      md::pipeline_config_from_json(md::parse_json(text, "test"));
      ADD_FAILURE() << text;
    } catch (const md::Error& e) {
      EXPECT_EQ(e.code(), code) << text << ": " << e.what();
    }
  };
  expect_code(R"({"ddso": {"window_n": 1}})", md::ErrorCode::InvalidArgument);
  expect_code(R"({"ddso": {"window": 4}})", md::ErrorCode::ParseError);
  expect_code(R"({"ddso": {"window_n": "ten"}})", md::ErrorCode::ParseError);
  expect_code(R"({"intrinsics": {"fx": -1}})", md::ErrorCode::InvalidArgument);
  expect_code(R"({"quality": {"reference_scale": 0}})", md::ErrorCode::InvalidArgument);
  expect_code(R"({"odometry": {"pyramid_levels": 0}})", md::ErrorCode::InvalidArgument);
  expect_code(R"({"inputs": )", md::ErrorCode::ParseError);
}

TEST(Config, RelativePathsResolveAgainstConfigDir) {
  mdtest::TempDir dir("cfg");
  io::write_text(dir / "p.json", R"({"inputs": {"images": "imgs"}})");
  const auto c = md::load_pipeline_config(dir / "p.json");
  EXPECT_EQ(c.resolve(c.inputs.images), (dir.path() / "imgs").string());
  EXPECT_EQ(c.resolve("/abs/x"), "/abs/x");
}

TEST(Config, SceneRoundTrip) {
  md::synth::SceneSpec s;
  s.surface = md::synth::Surface::sphere_cap({1, 2, 70}, 25);
  s.frame_count = 12;
  s.trajectory.stationary = {{3, 2}};
  s.brightness.enabled = true;
  s.lever_arm = {0, 1, 2};
  s.seed = 5;
  const auto j = md::to_json(s);
  const auto back = md::scene_from_json(j);
  EXPECT_EQ(md::to_json(back).dump(), j.dump());
  EXPECT_EQ(back.surface.type, md::synth::SurfaceType::SphereCap);
  EXPECT_EQ(back.trajectory.stationary.size(), 1u);

  const auto hf = md::scene_from_json(md::parse_json(
      R"({"surface": {"type": "heightfield", "base": 35, "amplitude": 2, "frequency": 0.04}})", "t"));
  EXPECT_EQ(hf.surface.type, md::synth::SurfaceType::Heightfield);
  EXPECT_EQ(hf.surface.distance, 35.0);
  EXPECT_THROW(md::scene_from_json(md::parse_json(R"({"surface": {"type": "torus"}})", "t")),
               md::Error);
  EXPECT_THROW(md::scene_from_json(md::parse_json(R"({"frames": 3})", "t")), md::Error);
}
