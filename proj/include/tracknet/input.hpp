#pragma once

#include <opencv2/core.hpp>

#include <span>
#include <string>

#include "tracknet/errors.hpp"
#include "tracknet/tensor.hpp"

namespace tracknet {

/// Writes k RGB frames (oldest first) into sample `n` of `out` as 3k
/// channels scaled to [0, 1].
template <typename T>
void pack_frames(std::span<const cv::Mat* const> frames, Tensor<T>& out, int n) {
  if (static_cast<int>(frames.size()) * 3 != out.channels())
    throw DimensionError("window of " + std::to_string(frames.size()) + " frames does not fill " +
                         std::to_string(out.channels()) + " input channels");
  const T scale = T(1) / T(255);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const cv::Mat& img = *frames[f];
    if (img.type() != CV_8UC3 || img.cols != out.width() || img.rows != out.height())
      throw DimensionError("frame is " + std::to_string(img.cols) + "x" + std::to_string(img.rows) +
                           ", network expects " + std::to_string(out.width()) + "x" +
                           std::to_string(out.height()) + " RGB");
    T* ch[3] = {out.channel(n, static_cast<int>(3 * f)), out.channel(n, static_cast<int>(3 * f + 1)),
                out.channel(n, static_cast<int>(3 * f + 2))};
    for (int y = 0; y < img.rows; ++y) {
      const auto* row = img.ptr<cv::Vec3b>(y);
      const std::size_t base = static_cast<std::size_t>(y) * img.cols;
      for (int x = 0; x < img.cols; ++x) {
        ch[0][base + x] = static_cast<T>(row[x][0]) * scale;
        ch[1][base + x] = static_cast<T>(row[x][1]) * scale;
        ch[2][base + x] = static_cast<T>(row[x][2]) * scale;
      }
    }
  }
}

}  // namespace tracknet
