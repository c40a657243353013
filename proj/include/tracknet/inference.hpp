#pragma once

// Sliding-window prediction over clips, prediction files and overlays.

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tracknet/dataset.hpp"
#include "tracknet/errors.hpp"
#include "tracknet/heatmap.hpp"
#include "tracknet/input.hpp"
#include "tracknet/network.hpp"

namespace tracknet {

struct DecodeOptions {
  int threshold = kDefaultThreshold;
  CircleSearch search;
};

struct WindowPrediction {
  Heatmap heatmap{1, 1};
  BallDetection detection;
};

struct PredictionRecord {
  std::string frame_name;
  bool predicted = false;  // false for the first k-1 frames of a clip
  bool found = false;
  double x = 0.0;
  double y = 0.0;
  FrameDims source_dims;

  BallDetection detection() const { return found ? BallDetection::at(x, y) : BallDetection::none(); }
};

/// Runs several windows as one inference batch. Each window lists k frames
/// at the model's working resolution, oldest first.
inline std::vector<WindowPrediction> predict_windows(const WeightState<float>& w,
                                                     const std::vector<std::vector<const cv::Mat*>>& windows,
                                                     const DecodeOptions& opt = {}) {
  std::vector<WindowPrediction> out;
  if (windows.empty()) return out;
  const auto& cfg = w.config;
  for (const auto& win : windows)
    if (static_cast<int>(win.size()) != cfg.input_frames)
      throw DimensionError("model takes " + std::to_string(cfg.input_frames) + " frames, window has " +
                           std::to_string(win.size()));
  Tensor<float> input(static_cast<int>(windows.size()), cfg.input_channels(), cfg.height, cfg.width);
  for (std::size_t n = 0; n < windows.size(); ++n) pack_frames<float>(windows[n], input, static_cast<int>(n));
  const auto p = softmax_depth(forward(w, input, Mode::inference));
  for (int n = 0; n < p.batch(); ++n) {
    WindowPrediction wp;
    wp.heatmap = argmax_depth(p, n);
    wp.detection = decode(wp.heatmap, opt.threshold, opt.search);
    out.push_back(std::move(wp));
  }
  return out;
}

inline WindowPrediction predict_window(const WeightState<float>& w, std::span<const cv::Mat* const> frames,
                                       const DecodeOptions& opt = {}) {
  return predict_windows(w, {std::vector<const cv::Mat*>(frames.begin(), frames.end())}, opt).front();
}

struct ClipPredictionOptions {
  DecodeOptions decode;
  int batch_size = 4;
  bool keep_working_resolution = false;
};

/// One record per frame. Frames without a full window are marked as not
/// predicted. `frames` are at the working resolution; coordinates are mapped
/// back to `clip.frame_dims` unless the caller keeps working resolution.
inline std::vector<PredictionRecord> predict_clip(const WeightState<float>& w, const Clip& clip,
                                                  const std::vector<cv::Mat>& frames,
                                                  const ClipPredictionOptions& opt = {}) {
  if (frames.size() != clip.size()) throw ArgumentError("frame and label counts differ");
  const int k = w.config.input_frames;
  const FrameDims work{w.config.width, w.config.height};
  const FrameDims source = clip.frame_dims.width > 0 ? clip.frame_dims : work;
  const double sx = opt.keep_working_resolution ? 1.0 : static_cast<double>(source.width) / work.width;
  const double sy = opt.keep_working_resolution ? 1.0 : static_cast<double>(source.height) / work.height;

  std::vector<PredictionRecord> records(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    records[i].frame_name = clip.labels[i].frame_name;
    records[i].source_dims = source;
  }
  const std::size_t batch = static_cast<std::size_t>(std::max(1, opt.batch_size));
  std::vector<std::vector<const cv::Mat*>> pending;
  std::vector<std::size_t> targets;
  auto flush = [&] {
    const auto preds = predict_windows(w, pending, opt.decode);
    for (std::size_t j = 0; j < preds.size(); ++j) {
      auto& r = records[targets[j]];
      r.predicted = true;
      r.found = preds[j].detection.found;
      if (r.found) {
        r.x = preds[j].detection.x * sx;
        r.y = preds[j].detection.y * sy;
      }
    }
    pending.clear();
    targets.clear();
  };
  for (std::size_t last = static_cast<std::size_t>(k) - 1; last < frames.size(); ++last) {
    std::vector<const cv::Mat*> win;
    for (std::size_t f = last + 1 - k; f <= last; ++f) win.push_back(&frames[f]);
    pending.push_back(std::move(win));
    targets.push_back(last);
    if (pending.size() == batch) flush();
  }
  if (!pending.empty()) flush();
  return records;
}

/// "name, found, x, y" per predicted frame; coordinates with two decimals,
/// empty when nothing was found.
inline std::string write_prediction_file(const std::vector<PredictionRecord>& records) {
  std::string out;
  char buf[64];
  for (const auto& r : records) {
    if (!r.predicted) continue;
    out += r.frame_name;
    if (r.found) {
      std::snprintf(buf, sizeof buf, ", 1, %.2f, %.2f\n", r.x, r.y);
      out += buf;
    } else {
      out += ", 0,,\n";
    }
  }
  return out;
}

/// Accepts prediction files and label files alike: a non-zero second field
/// means a ball was found.
inline std::vector<PredictionRecord> parse_prediction_file(std::string_view text) {
  const int fields = detect_field_count(text);
  std::vector<PredictionRecord> out;
  for (const auto& l : parse_label_file(text, fields == 4 ? 4 : 5)) {
    PredictionRecord r;
    r.frame_name = l.frame_name;
    r.predicted = true;
    r.found = l.visibility != 0;
    r.x = l.x;
    r.y = l.y;
    out.push_back(std::move(r));
  }
  return out;
}

/// Draws predicted balls as red circles and, when given, labelled positions
/// as green dots. Frames are RGB; coordinates must match their resolution.
inline std::vector<cv::Mat> render_overlay(const std::vector<cv::Mat>& frames,
                                           const std::vector<PredictionRecord>& predictions,
                                           const std::vector<FrameLabel>* truths = nullptr) {
  if (predictions.size() != frames.size() || (truths && truths->size() != frames.size()))
    throw ArgumentError("overlay inputs differ in length");
  std::vector<cv::Mat> out;
  out.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    cv::Mat img = frames[i].clone();
    if (truths && (*truths)[i].has_ball())
      cv::circle(img, cv::Point2d((*truths)[i].x, (*truths)[i].y), 2, cv::Scalar(0, 255, 0), cv::FILLED,
                 cv::LINE_AA);
    const auto& p = predictions[i];
    if (p.predicted && p.found)
      cv::circle(img, cv::Point2d(p.x, p.y), 6, cv::Scalar(255, 0, 0), 1, cv::LINE_AA);
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace tracknet
