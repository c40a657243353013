#include <gtest/gtest.h>

#include <cmath>

#include "tracknet/heatmap.hpp"
#include "tracknet/random.hpp"

using namespace tracknet;

namespace {

// Independent evaluation of the ground-truth intensity.
int oracle_g(double dx, double dy, double sigma2) {
  return static_cast<int>(std::floor(255.0 * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma2))));
}

}  // namespace

TEST(Heatmap, GaussianValuesAtReferenceDistances) {
  const auto hm = gaussian_heatmap(64, 64, 32, 32, 10.0);
  EXPECT_EQ(hm.at(32, 32), 255);
  EXPECT_EQ(hm.at(35, 32), 162);
  EXPECT_EQ(hm.at(32, 27), 73);
  EXPECT_EQ(oracle_g(3, 0, 10), 162);
  EXPECT_EQ(oracle_g(5, 0, 10), 73);
}

TEST(Heatmap, GaussianMatchesClosedFormEverywhere) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const double x0 = rng.uniform(0, 40), y0 = rng.uniform(0, 30), s2 = rng.uniform(2, 30);
    const auto hm = gaussian_heatmap(40, 30, x0, y0, s2);
    for (int y = 0; y < 30; ++y)
      for (int x = 0; x < 40; ++x) ASSERT_EQ(hm.at(x, y), oracle_g(x - x0, y - y0, s2)) << x << "," << y;
  }
}

TEST(Heatmap, CenterOutsideFrameGivesTail) {
  const auto hm = gaussian_heatmap(10, 10, -3, 5, 10.0);
  EXPECT_EQ(hm.at(0, 5), 162);
}

TEST(Heatmap, RejectsBadArguments) {
  EXPECT_THROW(gaussian_heatmap(0, 10, 1, 1, 10), ArgumentError);
  EXPECT_THROW(gaussian_heatmap(10, 10, 1, 1, 0), ArgumentError);
  EXPECT_THROW(gaussian_heatmap(10, 10, 1, 1, -1), ArgumentError);
  EXPECT_THROW(Heatmap(-1, 3), ArgumentError);
  EXPECT_THROW(binarize(zero_heatmap(4, 4), 256), ArgumentError);
  EXPECT_THROW(binarize(zero_heatmap(4, 4), -1), ArgumentError);
}

TEST(Heatmap, BinarizeIsInclusive) {
  Heatmap hm(3, 1);
  hm.values = {127, 128, 255};
  const auto bm = binarize(hm);
  EXPECT_EQ(bm.values, (std::vector<std::uint8_t>{0, 255, 255}));
  EXPECT_EQ(binarize(hm, 0).white_count(), 3u);
}

TEST(Heatmap, ThresholdedRegionHasAxisRadiusThree) {
  const auto bm = binarize(gaussian_heatmap(41, 41, 20, 20, 10.0));
  for (int y = 0; y < 41; ++y)
    for (int x = 0; x < 41; ++x) {
      const int d2 = (x - 20) * (x - 20) + (y - 20) * (y - 20);
      // 255 exp(-d2 / 20) >= 128  <=>  d2 <= 20 ln(255 / 128) = 13.78
      EXPECT_EQ(bm.at(x, y) == 255, d2 <= 13) << x << "," << y;
    }
  EXPECT_EQ(bm.at(23, 20), 255);
  EXPECT_EQ(bm.at(24, 20), 0);
  EXPECT_EQ(bm.at(20, 17), 255);
  EXPECT_EQ(bm.at(20, 16), 0);
}

TEST(Heatmap, DecodeRecoversCenters) {
  Rng rng(11);
  int ok = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const double x0 = rng.uniform(10, 118), y0 = rng.uniform(10, 62);
    const auto det = decode(gaussian_heatmap(128, 72, x0, y0, 10.0));
    if (det.found && std::hypot(det.x - x0, det.y - y0) <= 2.0) ++ok;
  }
  EXPECT_GE(ok, trials * 99 / 100);
}

TEST(Heatmap, EmptyMapDecodesToNoBall) {
  EXPECT_FALSE(decode(zero_heatmap(64, 64)).found);
  EXPECT_FALSE(detect_circle(BinaryMap{8, 8, std::vector<std::uint8_t>(64, 0)}, 2, 12).found);
}

TEST(Heatmap, TwoSeparatedBlobsAreAmbiguous) {
  auto a = gaussian_heatmap(128, 64, 30, 32, 10.0);
  const auto b = gaussian_heatmap(128, 64, 96, 32, 10.0);
  for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] = std::max(a.values[i], b.values[i]);
  EXPECT_FALSE(decode(a).found);
}

TEST(Heatmap, DetectsDrawnDisc) {
  BinaryMap bm{64, 64, std::vector<std::uint8_t>(64 * 64, 0)};
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      if ((x - 30) * (x - 30) + (y - 25) * (y - 25) <= 36) bm.values[y * 64 + x] = 255;
  const auto det = detect_circle(bm, 2, 12);
  ASSERT_TRUE(det.found);
  EXPECT_NEAR(det.x, 30, 1.0);
  EXPECT_NEAR(det.y, 25, 1.0);
}

TEST(Heatmap, InvalidRadiusRange) {
  BinaryMap bm{8, 8, std::vector<std::uint8_t>(64, 255)};
  EXPECT_THROW(detect_circle(bm, 0, 5), ArgumentError);
  EXPECT_THROW(detect_circle(bm, 6, 5), ArgumentError);
}

TEST(Heatmap, MatRoundTrip) {
  const auto hm = gaussian_heatmap(33, 17, 12.5, 8.25, 10.0);
  EXPECT_EQ(from_mat(to_mat(hm)), hm);
  EXPECT_THROW(from_mat(cv::Mat(4, 4, CV_8UC3)), FormatError);
}
