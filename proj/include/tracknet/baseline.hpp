#pragma once

// Conventional detector used for comparison: median smoothing, background
// model, AND of background and frame differences, closing, connected
// components, shape filter and a small MLP scoring 16x16 patches.

#include <Eigen/Dense>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <vector>

#include "tracknet/dataset.hpp"
#include "tracknet/errors.hpp"
#include "tracknet/heatmap.hpp"
#include "tracknet/inference.hpp"
#include "tracknet/random.hpp"
#include "tracknet/synth.hpp"

namespace tracknet {

struct Candidate {
  int x = 0, y = 0, w = 0, h = 0;  // bounding box
  double cx = 0.0, cy = 0.0;       // centroid
  int area = 0;
  double aspect_ratio() const { return static_cast<double>(w) / h; }
};

struct BackgroundModel {
  cv::Mat reference;  // 8-bit grayscale
  int threshold = 25;
};

struct BaselineConfig {
  int median_k = 3;
  int max_background_frames = 50;
  int threshold = 25;
  int dilate_radius = 2;
  int erode_radius = 2;
  double min_area = std::numbers::pi * 1.0 * 1.0;  // ball diameter 2..12 px
  double max_area = std::numbers::pi * 6.0 * 6.0;
  double max_aspect_deviation = 1.0;
};

inline constexpr int kPatchSize = 16;

/// Per-channel k x k median, replicated borders.
inline cv::Mat median_filter(const cv::Mat& frame, int k = 3) {
  if (k < 3 || k % 2 == 0) throw ArgumentError("median kernel must be odd and >= 3");
  if (frame.depth() != CV_8U) throw ArgumentError("median filter expects 8-bit images");
  cv::Mat out;
  if (k <= 5) {
    cv::medianBlur(frame, out, k);
    return out;
  }
  // Large kernels: OpenCV's histogram path has no border replication for
  // every type, so pad explicitly.
  const int r = k / 2;
  cv::Mat padded;
  cv::copyMakeBorder(frame, padded, r, r, r, r, cv::BORDER_REPLICATE);
  cv::medianBlur(padded, out, k);
  return out(cv::Rect(r, r, frame.cols, frame.rows)).clone();
}

inline cv::Mat to_gray(const cv::Mat& m) {
  if (m.channels() == 1) return m;
  cv::Mat g;
  cv::cvtColor(m, g, cv::COLOR_RGB2GRAY);
  return g;
}

namespace detail {

// Upper median over the given frames, per pixel.
inline cv::Mat temporal_median(const std::vector<cv::Mat>& gray) {
  cv::Mat out(gray.front().size(), CV_8UC1);
  std::vector<std::uint8_t> v(gray.size());
  for (int y = 0; y < out.rows; ++y)
    for (int x = 0; x < out.cols; ++x) {
      for (std::size_t i = 0; i < gray.size(); ++i) v[i] = gray[i].at<std::uint8_t>(y, x);
      std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
      out.at<std::uint8_t>(y, x) = v[v.size() / 2];
    }
  return out;
}

inline std::vector<cv::Mat> sample_gray(const std::vector<cv::Mat>& frames, int max_frames) {
  const std::size_t n = std::min(frames.size(), static_cast<std::size_t>(std::max(1, max_frames)));
  std::vector<cv::Mat> gray;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx = n == 1 ? 0 : i * (frames.size() - 1) / (n - 1);
    gray.push_back(to_gray(frames[idx]));
  }
  return gray;
}

}  // namespace detail

/// Temporal median over at most `max_frames` uniformly spaced frames.
inline BackgroundModel build_background(const std::vector<cv::Mat>& frames, int threshold = 25,
                                        int max_frames = 50) {
  if (frames.size() < 5) throw ArgumentError("background model needs at least 5 frames");
  for (const auto& f : frames)
    if (f.size() != frames.front().size()) throw DimensionError("background frames differ in size");
  return {detail::temporal_median(detail::sample_gray(frames, max_frames)), threshold};
}

/// White where the current frame differs from both the background and the
/// previous frame by more than `threshold` (grayscale).
inline BinaryMap moving_foreground(const cv::Mat& prev, const cv::Mat& cur, const cv::Mat& background,
                                   int threshold) {
  if (prev.size() != cur.size() || background.size() != cur.size())
    throw DimensionError("foreground inputs differ in size");
  const cv::Mat p = to_gray(prev), c = to_gray(cur), b = to_gray(background);
  BinaryMap bm{cur.cols, cur.rows, std::vector<std::uint8_t>(static_cast<std::size_t>(cur.total()))};
  for (int y = 0; y < cur.rows; ++y) {
    const auto* pr = p.ptr<std::uint8_t>(y);
    const auto* cr = c.ptr<std::uint8_t>(y);
    const auto* br = b.ptr<std::uint8_t>(y);
    for (int x = 0; x < cur.cols; ++x) {
      const bool vs_bg = std::abs(cr[x] - br[x]) > threshold;
      const bool vs_prev = std::abs(cr[x] - pr[x]) > threshold;
      bm.values[static_cast<std::size_t>(y) * cur.cols + x] = (vs_bg && vs_prev) ? 255 : 0;
    }
  }
  return bm;
}

/// Digital disc {dx^2 + dy^2 <= r(r+1)}; radius 1 gives the 3x3 square.
inline cv::Mat disc_element(int r) {
  cv::Mat k(2 * r + 1, 2 * r + 1, CV_8UC1, cv::Scalar(0));
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r * (r + 1)) k.at<std::uint8_t>(dy + r, dx + r) = 1;
  return k;
}

/// Dilation then erosion with disc elements.
inline BinaryMap morph_clean(const BinaryMap& bm, int dilate_radius, int erode_radius) {
  if (dilate_radius < 0 || erode_radius < 0) throw ArgumentError("morphology radii must be >= 0");
  cv::Mat m(bm.height, bm.width, CV_8UC1, const_cast<std::uint8_t*>(bm.values.data()));
  cv::Mat out = m.clone();
  if (dilate_radius > 0) cv::dilate(out, out, disc_element(dilate_radius), cv::Point(-1, -1), 1, cv::BORDER_CONSTANT, 0);
  if (erode_radius > 0) cv::erode(out, out, disc_element(erode_radius), cv::Point(-1, -1), 1, cv::BORDER_CONSTANT, 0);
  BinaryMap r{bm.width, bm.height, {}};
  r.values.assign(out.data, out.data + out.total());
  return r;
}

/// 8-connected components in scan order of their first pixel.
inline std::vector<Candidate> connected_components(const BinaryMap& bm) {
  std::vector<Candidate> out;
  if (bm.width <= 0 || bm.height <= 0) return out;
  cv::Mat m(bm.height, bm.width, CV_8UC1, const_cast<std::uint8_t*>(bm.values.data()));
  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(m, labels, stats, centroids, 8, CV_32S);
  for (int i = 1; i < n; ++i) {
    Candidate c;
    c.x = stats.at<int>(i, cv::CC_STAT_LEFT);
    c.y = stats.at<int>(i, cv::CC_STAT_TOP);
    c.w = stats.at<int>(i, cv::CC_STAT_WIDTH);
    c.h = stats.at<int>(i, cv::CC_STAT_HEIGHT);
    c.area = stats.at<int>(i, cv::CC_STAT_AREA);
    c.cx = centroids.at<double>(i, 0);
    c.cy = centroids.at<double>(i, 1);
    out.push_back(c);
  }
  return out;
}

/// Keeps candidates with min_area <= area <= max_area and aspect ratio in
/// [1 / (1 + d), 1 + d].
inline std::vector<Candidate> filter_candidates(const std::vector<Candidate>& cands, double min_area,
                                                double max_area, double max_aspect_deviation) {
  if (!(min_area > 0.0) || !(max_area >= min_area) || !(max_aspect_deviation > 0.0))
    throw ArgumentError("candidate filter bounds must be positive and ordered");
  std::vector<Candidate> out;
  const double hi = 1.0 + max_aspect_deviation, lo = 1.0 / hi;
  for (const auto& c : cands) {
    const double a = c.aspect_ratio();
    if (c.area >= min_area && c.area <= max_area && a >= lo && a <= hi) out.push_back(c);
  }
  return out;
}

/// 16x16 grayscale crop centred on the candidate centroid, replicated
/// borders, scaled to [0, 1].
inline std::vector<float> extract_patch(const cv::Mat& gray, double cx, double cy) {
  std::vector<float> p(kPatchSize * kPatchSize);
  const int x0 = static_cast<int>(std::lround(cx)) - kPatchSize / 2;
  const int y0 = static_cast<int>(std::lround(cy)) - kPatchSize / 2;
  for (int y = 0; y < kPatchSize; ++y)
    for (int x = 0; x < kPatchSize; ++x) {
      const int sx = std::clamp(x0 + x, 0, gray.cols - 1), sy = std::clamp(y0 + y, 0, gray.rows - 1);
      p[y * kPatchSize + x] = gray.at<std::uint8_t>(sy, sx) / 255.0f;
    }
  return p;
}

using PatchScorer = std::function<double(const std::vector<float>&)>;

/// Highest positive probability wins (first on ties); nothing when every
/// score is below 0.5.
inline std::optional<std::size_t> classify_candidates(const std::vector<std::vector<float>>& patches,
                                                      const PatchScorer& scorer) {
  std::optional<std::size_t> best;
  double best_p = 0.5;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const double p = scorer(patches[i]);
    if (p > best_p || (!best && p >= best_p)) {
      best = i;
      best_p = p;
    }
  }
  return best;
}

/// Fully connected 256-64-64-2 network with ReLU hidden units.
class CandidateClassifier {
 public:
  using Mat = Eigen::MatrixXf;
  using Vec = Eigen::VectorXf;

  explicit CandidateClassifier(std::uint64_t seed = 0) {
    Rng rng(seed);
    auto init = [&](Mat& w, Vec& b, int out, int in) {
      const double s = std::sqrt(2.0 / in);
      w.resize(out, in);
      for (int i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(s * rng.normal());
      b = Vec::Zero(out);
    };
    init(w1_, b1_, 64, kPatchSize * kPatchSize);
    init(w2_, b2_, 64, 64);
    init(w3_, b3_, 2, 64);
  }

  /// Probability of the positive (ball) class.
  double score(const std::vector<float>& patch) const {
    const Vec x = normalise(patch);
    const Vec h1 = (w1_ * x + b1_).cwiseMax(0.0f);
    const Vec h2 = (w2_ * h1 + b2_).cwiseMax(0.0f);
    const Vec z = w3_ * h2 + b3_;
    return 1.0 / (1.0 + std::exp(static_cast<double>(z[0] - z[1])));
  }

  /// Mini-batch SGD with momentum on softmax cross-entropy.
  void fit(const std::vector<std::vector<float>>& patches, const std::vector<int>& labels, int epochs,
           std::uint64_t seed, double lr = 0.05, int batch = 32) {
    if (patches.size() != labels.size() || patches.empty()) throw ArgumentError("bad classifier training set");
    Rng rng(seed);
    std::vector<std::size_t> order(patches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Mat vw1 = Mat::Zero(w1_.rows(), w1_.cols()), vw2 = Mat::Zero(w2_.rows(), w2_.cols()),
        vw3 = Mat::Zero(w3_.rows(), w3_.cols());
    Vec vb1 = Vec::Zero(b1_.size()), vb2 = Vec::Zero(b2_.size()), vb3 = Vec::Zero(b3_.size());
    const float mu = 0.9f;
    for (int e = 0; e < epochs; ++e) {
      rng.shuffle(order);
      for (std::size_t s = 0; s < order.size(); s += batch) {
        const std::size_t n = std::min<std::size_t>(batch, order.size() - s);
        Mat x(kPatchSize * kPatchSize, n);
        for (std::size_t j = 0; j < n; ++j) x.col(j) = normalise(patches[order[s + j]]);
        const Mat a1 = ((w1_ * x).colwise() + b1_).cwiseMax(0.0f);
        const Mat a2 = ((w2_ * a1).colwise() + b2_).cwiseMax(0.0f);
        Mat z = (w3_ * a2).colwise() + b3_;
        for (std::size_t j = 0; j < n; ++j) {
          const float m = z.col(j).maxCoeff();
          Eigen::Vector2f p = (z.col(j).array() - m).exp();
          p /= p.sum();
          p[labels[order[s + j]]] -= 1.0f;
          z.col(j) = p / static_cast<float>(n);
        }
        const Mat d2 = ((w3_.transpose() * z).array() * (a2.array() > 0.0f).cast<float>()).matrix();
        const Mat d1 = ((w2_.transpose() * d2).array() * (a1.array() > 0.0f).cast<float>()).matrix();
        auto step = [&](Mat& w, Vec& b, Mat& vw, Vec& vb, const Mat& d, const Mat& in) {
          vw = mu * vw - static_cast<float>(lr) * (d * in.transpose());
          vb = mu * vb - static_cast<float>(lr) * d.rowwise().sum();
          w += vw;
          b += vb;
        };
        step(w3_, b3_, vw3, vb3, z, a2);
        step(w2_, b2_, vw2, vb2, d2, a1);
        step(w1_, b1_, vw1, vb1, d1, x);
      }
    }
  }

 private:
  // Zero-mean patch so the classifier keys on shape, not court brightness.
  static Vec normalise(const std::vector<float>& patch) {
    Vec x = Eigen::Map<const Vec>(patch.data(), static_cast<Eigen::Index>(patch.size()));
    x.array() -= x.mean();
    return x * 4.0f;
  }

  Mat w1_, w2_, w3_;
  Vec b1_, b2_, b3_;
};

/// Labelled synthetic patches: balls (some streaked) centred within a pixel
/// versus plain court crops, court lines, off-centre balls and occluder edges.
inline void synth_patches(int count, std::uint64_t seed, std::vector<std::vector<float>>& patches,
                          std::vector<int>& labels) {
  Rng rng(seed);
  SynthConfig bg_cfg;
  bg_cfg.width = 96;
  bg_cfg.height = 96;
  const cv::Vec3f ball_lo{200, 220, 40}, ball_hi{240, 255, 110};
  for (int i = 0; i < count; ++i) {
    bg_cfg.background = static_cast<Background>(rng.below(3));
    Rng bg_rng(rng.next());
    cv::Mat canvas = detail::render_background(bg_cfg, bg_rng);
    const double cx = rng.uniform(24, 72), cy = rng.uniform(24, 72);
    const bool positive = rng.bernoulli(0.5);
    const double r = rng.uniform(1.0, 6.0);
    const cv::Vec3f colour = detail::random_colour(rng, ball_lo, ball_hi);
    if (positive) {
      const double len = rng.bernoulli(0.3) ? rng.uniform(0.0, 2.0 * r) : 0.0;
      const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double jx = rng.uniform(-1.0, 1.0), jy = rng.uniform(-1.0, 1.0);
      cv::Mat alpha(canvas.size(), CV_32F, cv::Scalar(0));
      const int steps = static_cast<int>(std::ceil(len));
      for (int s = 0; s <= steps; ++s) {
        const double t = steps == 0 ? 0.0 : static_cast<double>(s) / steps - 0.5;
        cv::max(alpha,
                render_ball_sprite(canvas.cols, canvas.rows, cx + jx + t * len * std::cos(ang),
                                   cy + jy + t * len * std::sin(ang), r),
                alpha);
      }
      detail::composite(canvas, alpha, colour);
    } else {
      switch (rng.below(4)) {
        case 0: break;  // plain crop, may contain court lines
        case 1: {
          const double off = rng.uniform(6.0, 10.0), ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
          detail::composite(canvas,
                            render_ball_sprite(canvas.cols, canvas.rows, cx + off * std::cos(ang),
                                               cy + off * std::sin(ang), r),
                            colour);
          break;
        }
        case 2: {
          const cv::Vec3f body = detail::random_colour(rng, {20, 20, 20}, {120, 120, 160});
          const int hw = rng.between(3, 12), hh = rng.between(6, 16);
          const int ox = rng.between(-6, 6), oy = rng.between(-6, 6);
          cv::rectangle(canvas, cv::Point(static_cast<int>(cx) + ox - hw, static_cast<int>(cy) + oy - hh),
                        cv::Point(static_cast<int>(cx) + ox + hw, static_cast<int>(cy) + oy + hh),
                        cv::Scalar(body[0], body[1], body[2]), cv::FILLED);
          break;
        }
        default: {
          const double ang = rng.uniform(0.0, std::numbers::pi);
          const double dx = 20 * std::cos(ang), dy = 20 * std::sin(ang);
          cv::line(canvas, cv::Point(static_cast<int>(cx - dx), static_cast<int>(cy - dy)),
                   cv::Point(static_cast<int>(cx + dx), static_cast<int>(cy + dy)), cv::Scalar(235, 235, 235),
                   rng.between(1, 2), cv::LINE_AA);
          break;
        }
      }
    }
    cv::Mat rgb;
    canvas.convertTo(rgb, CV_8UC3);
    patches.push_back(extract_patch(to_gray(rgb), cx, cy));
    labels.push_back(positive ? 1 : 0);
  }
}

/// Classifier trained on synthetic patches; deterministic for a seed.
inline CandidateClassifier train_candidate_classifier(std::uint64_t seed = 0, int samples = 6000, int epochs = 20) {
  std::vector<std::vector<float>> patches;
  std::vector<int> labels;
  synth_patches(samples, derive_seed(seed, 11), patches, labels);
  CandidateClassifier clf(derive_seed(seed, 12));
  clf.fit(patches, labels, epochs, derive_seed(seed, 13));
  return clf;
}

/// Runs the full pipeline over one clip. The first frame has no previous
/// frame and is not predicted. Coordinates are mapped from the resolution of
/// `frames` to `clip.frame_dims`.
inline std::vector<PredictionRecord> baseline_detect(const Clip& clip, const std::vector<cv::Mat>& frames,
                                                     const CandidateClassifier& clf,
                                                     const BaselineConfig& cfg = {}) {
  if (frames.size() != clip.size()) throw ArgumentError("frame and label counts differ");
  std::vector<PredictionRecord> records(frames.size());
  const FrameDims source = clip.frame_dims.width > 0 ? clip.frame_dims
                           : frames.empty()            ? FrameDims{}
                                                       : FrameDims{frames[0].cols, frames[0].rows};
  for (std::size_t i = 0; i < frames.size(); ++i) {
    records[i].frame_name = clip.labels[i].frame_name;
    records[i].source_dims = source;
  }
  if (frames.size() < 2) return records;
  const double sx = static_cast<double>(source.width) / frames[0].cols;
  const double sy = static_cast<double>(source.height) / frames[0].rows;

  std::vector<cv::Mat> smooth;
  smooth.reserve(frames.size());
  for (const auto& f : frames) smooth.push_back(median_filter(f, cfg.median_k));
  const cv::Mat background = detail::temporal_median(detail::sample_gray(smooth, cfg.max_background_frames));

  for (std::size_t i = 1; i < frames.size(); ++i) {
    const cv::Mat gray = to_gray(smooth[i]);
    const auto fg = moving_foreground(smooth[i - 1], gray, background, cfg.threshold);
    const auto cands = filter_candidates(connected_components(morph_clean(fg, cfg.dilate_radius, cfg.erode_radius)),
                                         cfg.min_area, cfg.max_area, cfg.max_aspect_deviation);
    std::vector<std::vector<float>> patches;
    for (const auto& c : cands) patches.push_back(extract_patch(gray, c.cx, c.cy));
    const auto best = classify_candidates(patches, [&](const std::vector<float>& p) { return clf.score(p); });
    auto& r = records[i];
    r.predicted = true;
    if (best) {
      r.found = true;
      r.x = cands[*best].cx * sx;
      r.y = cands[*best].cy * sy;
    }
  }
  return records;
}

}  // namespace tracknet
