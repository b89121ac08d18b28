#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "metricdepth/imaging.hpp"
#include "test_util.hpp"

namespace md = metricdepth;

namespace {

/// Reference bilinear interpolation written out term by term.
double bilinear_oracle(const md::ImageGray& img, double u, double v) {
  int x0 = int(std::floor(u)), y0 = int(std::floor(v));
  if (x0 == img.width - 1) --x0;
  if (y0 == img.height - 1) --y0;
  const double a = u - x0, b = v - y0;
  return (1 - a) * (1 - b) * img(x0, y0) + a * (1 - b) * img(x0 + 1, y0) +
         (1 - a) * b * img(x0, y0 + 1) + a * b * img(x0 + 1, y0 + 1);
}

/// Brute-force SSIM: every window recomputed from scratch.
double ssim_oracle(const md::ImageGray& a, const md::ImageGray& b, int win) {
  const int r = win / 2;
  const double c1 = 0.0001, c2 = 0.0009, n = double(win * win);
  double total = 0;
  int count = 0;
  for (int y = r; y < a.height - r; ++y) {
    for (int x = r; x < a.width - r; ++x) {
      double ma = 0, mb = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          ma += a(x + dx, y + dy);
          mb += b(x + dx, y + dy);
        }
      ma /= n;
      mb /= n;
      double va = 0, vb = 0, cov = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const double da = a(x + dx, y + dy) - ma, db = b(x + dx, y + dy) - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= n;
      vb /= n;
      cov /= n;
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / count;
}

}  // namespace

TEST(Imaging, BilinearAtIntegerReturnsPixel) {
  std::mt19937_64 rng(1);
  const auto img = mdtest::random_image(9, 7, rng);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x) {
      const auto s = md::bilinear_sample(img, {double(x), double(y)});
      ASSERT_TRUE(s.valid);
      ASSERT_DOUBLE_EQ(s.value, img(x, y));
    }
}

TEST(Imaging, BilinearMatchesOracle) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto img = mdtest::random_image(13, 11, rng);
  for (int i = 0; i < 10000; ++i) {
    const double pu = u(rng) * 12.0, pv = u(rng) * 10.0;
    const auto s = md::bilinear_sample(img, {pu, pv});
    ASSERT_TRUE(s.valid);
    ASSERT_NEAR(s.value, bilinear_oracle(img, pu, pv), 1e-14);
  }
}

TEST(Imaging, BilinearOutsideIsInvalid) {
  md::ImageGray img(4, 4, 0.5);
  EXPECT_FALSE(md::bilinear_sample(img, {-0.01, 1.0}).valid);
  EXPECT_FALSE(md::bilinear_sample(img, {1.0, 3.01}).valid);
  EXPECT_TRUE(md::bilinear_sample(img, {3.0, 3.0}).valid);
}

TEST(Imaging, BilinearGradientMatchesFiniteDifference) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  const auto img = mdtest::random_image(8, 8, rng);
  for (int i = 0; i < 1000; ++i) {
    const double pu = std::floor(u(rng) * 6) + u(rng), pv = std::floor(u(rng) * 6) + u(rng);
    const auto g = md::bilinear_sample_gradient(img, {pu, pv});
    const double h = 1e-6;
    const double du = (bilinear_oracle(img, pu + h, pv) - bilinear_oracle(img, pu - h, pv)) / (2 * h);
    const double dv = (bilinear_oracle(img, pu, pv + h) - bilinear_oracle(img, pu, pv - h)) / (2 * h);
    ASSERT_NEAR(g.du, du, 1e-8);
    ASSERT_NEAR(g.dv, dv, 1e-8);
  }
}

TEST(Imaging, DepthSamplingNeedsAllNeighbours) {
  md::DepthMap d(4, 4, md::DepthUnits::Millimetres);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) d.set(x, y, 10.0 + x);
  EXPECT_NEAR(md::bilinear_sample(d, {1.25, 1.0}).value, 11.25, 1e-14);
  d.set(2, 2, 0.0);
  EXPECT_FALSE(md::bilinear_sample(d, {1.5, 1.5}).valid);
  EXPECT_TRUE(md::bilinear_sample(d, {0.5, 0.5}).valid);
}

TEST(Imaging, InvertDepth) {
  md::InverseDepthMap id(3, 1);
  id.data = {0.5, 1e-5, -1.0};
  const md::DepthMap d = md::invert_depth(id);
  EXPECT_TRUE(d.valid(0, 0));
  EXPECT_DOUBLE_EQ(d(0, 0), 2.0);
  EXPECT_FALSE(d.valid(1, 0));
  EXPECT_FALSE(d.valid(2, 0));
  EXPECT_EQ(d.units, md::DepthUnits::Relative);
  EXPECT_THROW(md::invert_depth(id, 0.0), md::Error);
  const auto back = md::to_inverse_depth(d);
  EXPECT_DOUBLE_EQ(back.data[0], 0.5);
  EXPECT_DOUBLE_EQ(back.data[1], 0.0);
}

TEST(Imaging, DepthFromValuesMasksNonPositive) {
  const auto d = md::DepthMap::from_values(2, 2, {1.0, 0.0, -3.0, std::nan("")});
  EXPECT_EQ(d.valid_count(), 1u);
  EXPECT_DOUBLE_EQ(d.depth.data[2], 0.0);
}

TEST(Imaging, AppearanceFlow) {
  md::ImageGray img(3, 1);
  img.data = {0.2, 0.95, 0.05};
  md::FlowField f(3, 1);
  f.data = {0.1, 0.1, -0.1};
  const auto out = md::apply_appearance_flow(img, f);
  EXPECT_NEAR(out.data[0], 0.3, 1e-15);
  EXPECT_DOUBLE_EQ(out.data[1], 1.0);
  EXPECT_DOUBLE_EQ(out.data[2], 0.0);
  EXPECT_THROW(md::apply_appearance_flow(img, md::FlowField(2, 1)), md::Error);
}

TEST(Imaging, SsimSelfIsOne) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto img = mdtest::random_image(24, 20, rng);
    const auto s = md::ssim(img, img);
    EXPECT_EQ(s.count, std::size_t(18 * 14));
    EXPECT_NEAR(s.mean, 1.0, 1e-12);
  }
}

TEST(Imaging, SsimMatchesBruteForce) {
  std::mt19937_64 rng(5);
  for (int win : {3, 5, 7}) {
    for (int i = 0; i < 10; ++i) {
      const auto a = mdtest::random_image(17, 15, rng), b = mdtest::random_image(17, 15, rng);
      EXPECT_NEAR(md::ssim(a, b, win).mean, ssim_oracle(a, b, win), 1e-12);
      EXPECT_NEAR(md::ssim(a, b, win).mean, md::ssim(b, a, win).mean, 1e-15);
    }
  }
}

TEST(Imaging, SsimMaskExcludesWindows) {
  std::mt19937_64 rng(6);
  const auto a = mdtest::random_image(20, 20, rng);
  md::Mask m(20, 20, 1);
  m(10, 10) = 0;
  const auto s = md::ssim(a, a, 7, &m);
  EXPECT_EQ(s.count, std::size_t(14 * 14 - 49));
  EXPECT_EQ(s.valid(10, 10), 0);
  EXPECT_THROW(md::ssim(a, a, 4), md::Error);
  EXPECT_THROW(md::ssim(a, mdtest::random_image(19, 20, rng)), md::Error);
}

TEST(Imaging, PhotometricLoss) {
  std::mt19937_64 rng(7);
  EXPECT_DOUBLE_EQ(md::kDefaultPhotometricAlpha, 0.85);
  const auto a = mdtest::random_image(30, 30, rng), b = mdtest::random_image(30, 30, rng);
  EXPECT_NEAR(md::photometric_loss(a, a), 0.0, 1e-12);
  double l1 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) l1 += std::abs(a.data[i] - b.data[i]);
  l1 /= double(a.size());
  EXPECT_NEAR(md::photometric_loss(a, b, 0.0), l1, 1e-14);
  const double s = ssim_oracle(a, b, 7);
  EXPECT_NEAR(md::photometric_loss(a, b), 0.85 * (1 - s) / 2 + 0.15 * l1, 1e-12);
  md::Mask none(30, 30, 0);
  EXPECT_THROW(md::photometric_loss(a, b, 0.85, &none), md::Error);
  EXPECT_THROW(md::photometric_loss(a, b, 1.5), md::Error);
}

TEST(Imaging, SynthesizeViewIdentity) {
  std::mt19937_64 rng(8);
  const md::Intrinsics k{50, 50, 15.5, 11.5, 32, 24};
  const auto img = mdtest::random_image(32, 24, rng);
  const auto d = mdtest::random_depth(32, 24, rng, 5, 20, md::DepthUnits::Relative, 0.1);
  const auto v = md::synthesize_view(img, d, md::PoseSE3::identity(), k);
  for (std::size_t i = 0; i < img.size(); ++i) {
    ASSERT_EQ(v.mask.data[i], d.mask.data[i]);
    if (v.mask.data[i]) ASSERT_NEAR(v.image.data[i], img.data[i], 1e-12);
  }
  EXPECT_THROW(md::synthesize_view(img, md::DepthMap(32, 24), md::PoseSE3(), k), md::Error);
}

TEST(Imaging, SynthesizeViewRecoversTarget) {
  // Fronto-parallel plane with a source shifted by one pixel's worth of translation.
  const md::Intrinsics k{100, 100, 31.5, 23.5, 64, 48};
  md::ImageGray src(64, 48);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 64; ++x) src(x, y) = 0.5 + 0.4 * std::sin(0.3 * x) * std::cos(0.2 * y);
  md::DepthMap d(64, 48);
  for (auto& v : d.depth.data) v = 10.0;
  std::fill(d.mask.data.begin(), d.mask.data.end(), 1);
  // Target point X seen by the source at X + (0.1, 0, 0): u shifts by +1.
  const auto v = md::synthesize_view(src, d, md::PoseSE3::translation({0.1, 0, 0}), k);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 63; ++x) {
      ASSERT_TRUE(v.mask(x, y));
      ASSERT_NEAR(v.image(x, y), src(x + 1, y), 1e-12);
    }
  EXPECT_FALSE(v.mask(63, 0));
}

TEST(Imaging, DownsampleRasterAndDepth) {
  md::ImageGray img(4, 2);
  img.data = {0, 1, 2, 3, 4, 5, 6, 7};
  const auto s = md::downsample(img);
  EXPECT_EQ(s.width, 2);
  EXPECT_DOUBLE_EQ(s(0, 0), 2.5);
  EXPECT_DOUBLE_EQ(s(1, 0), 4.5);
  auto d = md::DepthMap::from_values(4, 2, {3, 2, 0, 0, 5, 4, 0, 0});
  const auto ds = md::downsample(d);
  EXPECT_DOUBLE_EQ(ds(0, 0), 2.0);
  EXPECT_FALSE(ds.valid(1, 0));
}
