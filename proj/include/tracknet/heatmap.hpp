#pragma once

// Ground-truth heatmaps and the two-step heatmap decoder: threshold into a
// black/white map, then accept a ball only when the Hough gradient search
// finds exactly one circle.

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "tracknet/errors.hpp"

namespace tracknet {

/// Single-channel 8-bit grid, row-major.
struct Heatmap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;

  Heatmap() = default;
  Heatmap(int w, int h, std::uint8_t fill = 0) : width(w), height(h) {
    if (w <= 0 || h <= 0) throw ArgumentError("heatmap dimensions must be positive");
    values.assign(static_cast<std::size_t>(w) * h, fill);
  }

  std::uint8_t& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const Heatmap&) const = default;
};

/// Heatmap restricted to {0, 255}.
struct BinaryMap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;

  std::uint8_t at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t white_count() const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{255}));
  }

  bool operator==(const BinaryMap&) const = default;
};

struct BallDetection {
  bool found = false;
  double x = 0.0;
  double y = 0.0;

  static BallDetection none() { return {}; }
  static BallDetection at(double x, double y) { return {true, x, y}; }
};

struct CircleSearch {
  int r_min = 2;
  int r_max = 12;
  // Canny upper threshold used by the gradient stage; binary maps have
  // 255-step edges so any value well below that works.
  double edge_threshold = 100.0;
  // Accumulator votes needed to accept a centre.
  double accumulator_threshold = 5.0;
};

inline constexpr int kDefaultThreshold = 128;
inline constexpr double kDefaultSigma2 = 10.0;

/// floor(255 * exp(-((x-x0)^2 + (y-y0)^2) / (2 sigma2))) at every pixel.
inline Heatmap gaussian_heatmap(int w, int h, double x0, double y0, double sigma2) {
  if (!(sigma2 > 0.0)) throw ArgumentError("sigma2 must be positive");
  Heatmap hm(w, h);
  for (int y = 0; y < h; ++y) {
    const double dy = y - y0;
    for (int x = 0; x < w; ++x) {
      const double dx = x - x0;
      const double g = 255.0 * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma2));
      hm.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::floor(g), 0.0, 255.0));
    }
  }
  return hm;
}

inline Heatmap zero_heatmap(int w, int h) { return Heatmap(w, h, 0); }

inline BinaryMap binarize(const Heatmap& hm, int t = kDefaultThreshold) {
  if (t < 0 || t > 255) throw ArgumentError("threshold must lie in [0, 255]");
  BinaryMap bm{hm.width, hm.height, std::vector<std::uint8_t>(hm.values.size())};
  std::transform(hm.values.begin(), hm.values.end(), bm.values.begin(),
                 [t](std::uint8_t v) -> std::uint8_t { return v >= t ? 255 : 0; });
  return bm;
}

namespace detail {

// Weighted centroid of white pixels inside `radius` of (cx, cy). Weights
// come from `intensity` when given, otherwise every white pixel counts 1.
inline BallDetection refine_center(const BinaryMap& bm, const Heatmap* intensity, double cx,
                                   double cy, double radius) {
  const int x_lo = std::max(0, static_cast<int>(std::floor(cx - radius)));
  const int x_hi = std::min(bm.width - 1, static_cast<int>(std::ceil(cx + radius)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(cy - radius)));
  const int y_hi = std::min(bm.height - 1, static_cast<int>(std::ceil(cy + radius)));
  double sw = 0.0, sx = 0.0, sy = 0.0;
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      if (bm.at(x, y) == 0) continue;
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) > radius * radius) continue;
      const double w = intensity ? static_cast<double>(intensity->at(x, y)) : 1.0;
      sw += w;
      sx += w * x;
      sy += w * y;
    }
  }
  if (sw <= 0.0) return BallDetection::at(cx, cy);
  return BallDetection::at(sx / sw, sy / sw);
}

inline BallDetection detect_circle_impl(const BinaryMap& bm, const CircleSearch& search,
                                        const Heatmap* intensity) {
  if (search.r_min < 1 || search.r_max < search.r_min)
    throw ArgumentError("circle search needs 1 <= r_min <= r_max");
  if (bm.width <= 0 || bm.height <= 0 || bm.white_count() == 0) return BallDetection::none();
  const cv::Mat img(bm.height, bm.width, CV_8UC1, const_cast<std::uint8_t*>(bm.values.data()));
  std::vector<cv::Vec3f> circles;
  cv::HoughCircles(img, circles, cv::HOUGH_GRADIENT, 1.0, static_cast<double>(search.r_max),
                   search.edge_threshold, search.accumulator_threshold, search.r_min,
                   search.r_max);
  if (circles.size() != 1) return BallDetection::none();
  const auto& c = circles.front();
  return refine_center(bm, intensity, c[0], c[1], static_cast<double>(c[2]) + 1.5);
}

}  // namespace detail

/// Hough-gradient circle search. Exactly one circle yields its centre;
/// zero or several yield "no ball".
inline BallDetection detect_circle(const BinaryMap& bm, int r_min, int r_max) {
  CircleSearch s;
  s.r_min = r_min;
  s.r_max = r_max;
  return detail::detect_circle_impl(bm, s, nullptr);
}

inline BallDetection detect_circle(const BinaryMap& bm, const CircleSearch& search) {
  return detail::detect_circle_impl(bm, search, nullptr);
}

/// binarize followed by detect_circle; the centre is refined with the
/// heatmap intensities of the pixels inside the accepted circle.
inline BallDetection decode(const Heatmap& hm, int t, const CircleSearch& search) {
  return detail::detect_circle_impl(binarize(hm, t), search, &hm);
}

inline BallDetection decode(const Heatmap& hm, int t = kDefaultThreshold, int r_min = 2,
                            int r_max = 12) {
  CircleSearch s;
  s.r_min = r_min;
  s.r_max = r_max;
  return decode(hm, t, s);
}

inline cv::Mat to_mat(const Heatmap& hm) {
  cv::Mat m(hm.height, hm.width, CV_8UC1);
  std::copy(hm.values.begin(), hm.values.end(), m.data);
  return m;
}

inline Heatmap from_mat(const cv::Mat& m) {
  if (m.type() != CV_8UC1) throw FormatError("heatmap image must be 8-bit single channel");
  Heatmap hm(m.cols, m.rows);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    std::copy(row, row + m.cols, hm.values.begin() + static_cast<std::ptrdiff_t>(y) * m.cols);
  }
  return hm;
}

}  // namespace tracknet
