#include <gtest/gtest.h>

#include <cmath>

#include "metricdepth/fusion.hpp"
#include "test_util.hpp"

namespace md = metricdepth;

namespace {

double cloud_rmse_to_surface(const md::SurfelMap& map, const md::synth::Surface& s,
                             const md::PoseSE3& first_camera) {
  double sq = 0;
  for (const auto& sf : map.surfels) {
    const double d = s.distance_to(first_camera * sf.position);
    sq += d * d;
  }
  return std::sqrt(sq / double(map.surfels.size()));
}

}  // namespace

TEST(Fusion, FirstFrameOnPlane) {
  auto spec = mdtest::small_scene();
  spec.surface = md::synth::Surface::plane(40.0);
  const auto f = mdtest::render_frame(spec, md::PoseSE3());
  md::SurfelMap map;
  const auto r = md::integrate_frame(map, f.image, f.depth, spec.intrinsics, md::PoseSE3());
  EXPECT_EQ(r.spawned, std::size_t(80 * 64));
  EXPECT_EQ(r.matched, 0u);
  EXPECT_EQ(map.size(), std::size_t(80 * 64));
  EXPECT_EQ(map.frames_integrated, 1);
  for (const auto& s : map.surfels) {
    ASSERT_NEAR(s.position.z(), 40.0, 1e-9);
    ASSERT_NEAR(s.normal.norm(), 1.0, 1e-12);
    ASSERT_NEAR(s.normal.z(), -1.0, 1e-9);
    ASSERT_GT(s.radius, 0.0);
    ASSERT_EQ(s.confidence, 1.0);
  }
}

TEST(Fusion, TwoFramesStayOnSurface) {
  const auto spec = mdtest::small_scene(2);
  const auto seq = md::synth::render_sequence(spec);
  md::SurfelMap map;
  const md::PoseSE3 c0 = seq.frames[0].pose;
  for (const auto& f : seq.frames) {
    md::integrate_frame(map, f.image, f.depth_mm, spec.intrinsics, c0.inverse() * f.pose);
  }
  EXPECT_LT(cloud_rmse_to_surface(map, spec.surface, c0), 0.5);
}

TEST(Fusion, RegistrationRecoversPerturbedHint) {
  const auto spec = mdtest::small_scene(2);
  const auto seq = md::synth::render_sequence(spec);
  const md::PoseSE3 c0 = seq.frames[0].pose;
  const md::PoseSE3 truth = c0.inverse() * seq.frames[1].pose;
  md::SurfelMap map;
  md::integrate_frame(map, seq.frames[0].image, seq.frames[0].depth_mm, spec.intrinsics, {});
  const md::PoseSE3 hint = md::PoseSE3::translation({0.3, -0.2, 0.1}) * truth;
  const auto r = md::integrate_frame(map, seq.frames[1].image, seq.frames[1].depth_mm,
                                     spec.intrinsics, hint);
  EXPECT_TRUE(r.refined);
  EXPECT_LT((r.pose.translation() - truth.translation()).norm(), 0.05);
}

TEST(Fusion, ZeroOverlapFailsAndLeavesMap) {
  const auto spec = mdtest::small_scene();
  const auto f = mdtest::render_frame(spec, md::PoseSE3());
  md::SurfelMap map;
  md::integrate_frame(map, f.image, f.depth, spec.intrinsics, md::PoseSE3());
  const auto before = map.surfels;
  const md::PoseSE3 away(Eigen::Quaterniond(Eigen::AngleAxisd(3.0, md::Vec3::UnitY())),
                         md::Vec3::Zero());
  try {
    md::integrate_frame(map, f.image, f.depth, spec.intrinsics, away);
    FAIL();
  } catch (const md::Error& e) {
    EXPECT_EQ(e.code(), md::ErrorCode::RegistrationFailed);
  }
  EXPECT_EQ(map.frames_integrated, 1);
  ASSERT_EQ(map.size(), before.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(map.surfels[i].position, before[i].position);
  }
}

TEST(Fusion, RefusingIdenticalFrameKeepsPositions) {
  const auto spec = mdtest::small_scene();
  const auto f = mdtest::render_frame(spec, md::PoseSE3());
  md::SurfelMap map;
  md::integrate_frame(map, f.image, f.depth, spec.intrinsics, md::PoseSE3());
  const auto before = map.surfels;
  const auto r = md::integrate_frame(map, f.image, f.depth, spec.intrinsics, md::PoseSE3());
  EXPECT_EQ(r.matched, before.size());
  EXPECT_EQ(r.spawned, 0u);
  ASSERT_EQ(map.size(), before.size());
  double worst = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    worst = std::max(worst, (map.surfels[i].position - before[i].position).norm());
    EXPECT_EQ(map.surfels[i].confidence, 2.0);
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Fusion, ConfidenceNeverDecreasesAndNormalsStayUnit) {
  const auto spec = mdtest::small_scene(4);
  const auto seq = md::synth::render_sequence(spec);
  const md::PoseSE3 c0 = seq.frames[0].pose;
  md::SurfelMap map;
  for (const auto& f : seq.frames) {
    const auto prev = map.surfels;
    md::integrate_frame(map, f.image, f.depth_mm, spec.intrinsics, c0.inverse() * f.pose);
    ASSERT_GE(map.size(), prev.size());
    for (std::size_t i = 0; i < prev.size(); ++i) {
      ASSERT_GE(map.surfels[i].confidence, prev[i].confidence);
      ASSERT_LE(map.surfels[i].radius, prev[i].radius);
    }
    for (const auto& s : map.surfels) ASSERT_NEAR(s.normal.norm(), 1.0, 1e-12);
  }
}

TEST(Fusion, StaleLowConfidenceSurfelsAreRemoved) {
  const auto spec = mdtest::small_scene();
  const auto f = mdtest::render_frame(spec, md::PoseSE3());
  md::FusionConfig cfg;
  cfg.stability_window = 1;
  cfg.register_frames = false;
  md::SurfelMap map;
  const auto first = md::integrate_frame(map, f.image, f.depth, spec.intrinsics, {}, cfg);
  // Far away: nothing associates, every old surfel is stale with confidence 1.
  const auto r = md::integrate_frame(map, f.image, f.depth, spec.intrinsics,
                                     md::PoseSE3::translation({500, 0, 0}), cfg);
  EXPECT_EQ(r.matched, 0u);
  EXPECT_EQ(r.removed, first.spawned);
  EXPECT_EQ(map.size(), r.spawned);
}

TEST(Fusion, RenderModelSeesFirstFrame) {
  const auto spec = mdtest::small_scene();
  const auto f = mdtest::render_frame(spec, md::PoseSE3());
  md::SurfelMap map;
  md::integrate_frame(map, f.image, f.depth, spec.intrinsics, {});
  const auto v = md::render_model(map, md::PoseSE3(), spec.intrinsics);
  std::size_t n = 0;
  double worst = 0;
  for (int y = 0; y < spec.intrinsics.height; ++y) {
    for (int x = 0; x < spec.intrinsics.width; ++x) {
      if (!v.depth.valid(x, y)) continue;
      ++n;
      if (x % 2 == 0 && y % 2 == 0) worst = std::max(worst, std::abs(v.depth(x, y) - f.depth(x, y)));
    }
  }
  EXPECT_GE(n, map.size());
  EXPECT_LT(worst, 1e-9);
}

TEST(Fusion, ExportCloud) {
  md::SurfelMap map;
  EXPECT_THROW(md::export_cloud(map), md::Error);
  const auto spec = mdtest::small_scene();
  const auto f = mdtest::render_frame(spec, md::PoseSE3());
  md::integrate_frame(map, f.image, f.depth, spec.intrinsics, {});
  EXPECT_EQ(md::export_cloud(map).size(), map.size());
  try {
    md::export_cloud(map, 1.5);
    FAIL();
  } catch (const md::Error& e) {
    EXPECT_EQ(e.code(), md::ErrorCode::EmptyMap);
  }
}

TEST(Fusion, InputValidation) {
  const auto spec = mdtest::small_scene();
  auto f = mdtest::render_frame(spec, md::PoseSE3());
  md::SurfelMap map;
  auto rel = f.depth;
  rel.units = md::DepthUnits::Relative;
  try {
    md::integrate_frame(map, f.image, rel, spec.intrinsics, {});
    FAIL();
  } catch (const md::Error& e) {
    EXPECT_EQ(e.code(), md::ErrorCode::UnitMismatch);
  }
  EXPECT_THROW(md::integrate_frame(map, md::ImageGray(4, 4), f.depth, spec.intrinsics, {}),
               md::Error);
  EXPECT_TRUE(map.empty());
}
