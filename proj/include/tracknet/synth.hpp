#pragma once

// Synthetic ball-flight clips with auto-generated labels: a disc on
// parabolic segments with bounces and hits, motion-blur streaks, occluders
// and three background styles.

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "tracknet/dataset.hpp"
#include "tracknet/errors.hpp"
#include "tracknet/random.hpp"

namespace tracknet {

enum class Background { flat, textured, court };

struct SynthConfig {
  int width = 320;
  int height = 176;
  int length = 60;
  double radius_min = 1.0;  // diameter 2..12 px
  double radius_max = 6.0;
  double speed_min = 2.0;  // px / frame
  double speed_max = 12.0;
  double gravity = 0.35;      // px / frame^2, +y is down
  double restitution = 0.7;   // vertical speed kept on a bounce
  double hit_probability = 0.03;
  bool hit_at_edges = true;   // ball is hit back instead of leaving sideways
  double blur_factor = 0.5;   // streak length / displacement per frame
  double hard_blur_ratio = 3.0;  // streak longer than this many diameters -> VC 2
  double occluder_probability = 0.05;
  Background background = Background::court;
  double noise_sigma = 0.0;  // per-frame Gaussian pixel noise, 8-bit units
  int decoy_count = 0;       // static ball-coloured discs lying on the court
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw ArgumentError("synth: " + m); };
    if (width < 8 || height < 8) fail("frame must be at least 8x8");
    if (length < 1) fail("clip length must be positive");
    if (!(radius_min > 0.0) || radius_min > radius_max) fail("radius range must satisfy 0 < min <= max");
    if (speed_min < 0.0 || speed_min > speed_max) fail("speed range must satisfy 0 <= min <= max");
    if (!std::isfinite(gravity)) fail("gravity must be finite");
    if (restitution < 0.0 || restitution > 1.0) fail("restitution must lie in [0, 1]");
    if (hit_probability < 0.0 || hit_probability > 1.0) fail("hit probability must lie in [0, 1]");
    if (occluder_probability < 0.0 || occluder_probability > 1.0)
      fail("occluder probability must lie in [0, 1]");
    if (blur_factor < 0.0) fail("blur factor must be non-negative");
    if (!(hard_blur_ratio > 0.0)) fail("hard blur ratio must be positive");
    if (noise_sigma < 0.0) fail("noise sigma must be non-negative");
    if (decoy_count < 0) fail("decoy count must be non-negative");
  }
};

struct SynthClip {
  std::vector<cv::Mat> frames;  // RGB
  std::vector<FrameLabel> labels;
};

/// Anti-aliased disc coverage in [0, 1] over the whole frame grid, pixel
/// centres at integer coordinates.
inline cv::Mat render_ball_sprite(int width, int height, double cx, double cy, double radius) {
  cv::Mat alpha(height, width, CV_32F, cv::Scalar(0));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  const int x1 = std::min(width - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  const int y1 = std::min(height - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      alpha.at<float>(y, x) = static_cast<float>(std::clamp(radius + 0.5 - d, 0.0, 1.0));
    }
  return alpha;
}

namespace detail {

inline cv::Vec3f random_colour(Rng& rng, cv::Vec3f lo, cv::Vec3f hi) {
  return {static_cast<float>(rng.uniform(lo[0], hi[0])), static_cast<float>(rng.uniform(lo[1], hi[1])),
          static_cast<float>(rng.uniform(lo[2], hi[2]))};
}

/// Smooth noise field in [-1, 1]: a coarse random grid upsampled bicubically.
inline cv::Mat low_frequency_noise(int width, int height, int cell, Rng& rng) {
  const int gw = width / cell + 2, gh = height / cell + 2;
  cv::Mat grid(gh, gw, CV_32F);
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x) grid.at<float>(y, x) = static_cast<float>(rng.uniform(-1.0, 1.0));
  cv::Mat up;
  cv::resize(grid, up, cv::Size(gw * cell, gh * cell), 0, 0, cv::INTER_CUBIC);
  return up(cv::Rect(0, 0, width, height)).clone();
}

inline cv::Mat render_background(const SynthConfig& cfg, Rng& rng) {
  // Court surfaces: green grass, blue hard court, clay.
  static const cv::Vec3f surfaces[3] = {{60, 120, 60}, {50, 90, 150}, {170, 90, 60}};
  const cv::Vec3f base = surfaces[rng.below(3)] + random_colour(rng, {-15, -15, -15}, {15, 15, 15});
  cv::Mat bg(cfg.height, cfg.width, CV_32FC3, cv::Scalar(base[0], base[1], base[2]));
  if (cfg.background == Background::flat) return bg;

  const cv::Mat coarse = low_frequency_noise(cfg.width, cfg.height, 24, rng);
  const cv::Mat fine = low_frequency_noise(cfg.width, cfg.height, 4, rng);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x) {
      const float v = 18.0f * coarse.at<float>(y, x) + 6.0f * fine.at<float>(y, x);
      bg.at<cv::Vec3f>(y, x) += cv::Vec3f(v, v, v);
    }
  if (cfg.background == Background::court) {
    const cv::Scalar line(235, 235, 235);
    const int thick = std::max(1, cfg.width / 200);
    const double w = cfg.width, h = cfg.height;
    const double mx = rng.uniform(0.05, 0.15) * w, top = rng.uniform(0.15, 0.3) * h;
    const double bottom = rng.uniform(0.85, 0.95) * h;
    auto seg = [&](double ax, double ay, double bx, double by) {
      cv::line(bg, cv::Point(static_cast<int>(ax), static_cast<int>(ay)),
               cv::Point(static_cast<int>(bx), static_cast<int>(by)), line, thick, cv::LINE_AA);
    };
    seg(mx, bottom, w - mx, bottom);
    seg(mx + 0.1 * w, top, w - mx - 0.1 * w, top);
    seg(mx, bottom, mx + 0.1 * w, top);
    seg(w - mx, bottom, w - mx - 0.1 * w, top);
    seg(w / 2, top, w / 2, bottom);
    seg(mx + 0.05 * w, (top + bottom) / 2, w - mx - 0.05 * w, (top + bottom) / 2);
    // net
    const double net_y = top + 0.45 * (bottom - top);
    cv::line(bg, cv::Point(static_cast<int>(mx), static_cast<int>(net_y)),
             cv::Point(static_cast<int>(w - mx), static_cast<int>(net_y)), cv::Scalar(40, 40, 40),
             thick + 1, cv::LINE_AA);
  }
  return bg;
}

inline void composite(cv::Mat& canvas, const cv::Mat& alpha, cv::Vec3f colour) {
  for (int y = 0; y < canvas.rows; ++y) {
    auto* px = canvas.ptr<cv::Vec3f>(y);
    const auto* a = alpha.ptr<float>(y);
    for (int x = 0; x < canvas.cols; ++x)
      if (a[x] > 0.0f) px[x] = px[x] * (1.0f - a[x]) + colour * a[x];
  }
}

struct BallState {
  double x, y, vx, vy;
};

inline void launch(BallState& b, double speed, Rng& rng, bool toward_left) {
  const double angle = rng.uniform(0.15, 0.9);  // radians above horizontal
  b.vx = (toward_left ? -1.0 : 1.0) * speed * std::cos(angle);
  b.vy = -speed * std::sin(angle);
}

}  // namespace detail

/// Renders one clip. The label of each frame anchors the leading tip of the
/// blur streak, i.e. the ball position at the end of the exposure.
inline SynthClip generate_clip(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const double w = cfg.width, h = cfg.height;
  const double radius = rng.uniform(cfg.radius_min, cfg.radius_max);
  const double speed = rng.uniform(cfg.speed_min, cfg.speed_max);
  const cv::Vec3f ball = detail::random_colour(rng, {200, 220, 40}, {240, 255, 110});
  const cv::Mat background = detail::render_background(cfg, rng);
  const double ground = rng.uniform(0.8, 0.95) * h;

  cv::Mat scenery = background.clone();
  for (int i = 0; i < cfg.decoy_count; ++i) {
    const double dx = rng.uniform(radius + 2, w - radius - 2), dy = rng.uniform(radius + 2, h - radius - 2);
    detail::composite(scenery, render_ball_sprite(cfg.width, cfg.height, dx, dy, radius), ball);
  }

  detail::BallState b{rng.uniform(0.2, 0.8) * w, rng.uniform(0.3, 0.7) * ground, 0, 0};
  const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  b.vx = speed * std::cos(angle);
  b.vy = speed * std::sin(angle);

  SynthClip clip;
  double px = b.x, py = b.y;
  for (int f = 0; f < cfg.length; ++f) {
    int event = 0;
    if (f > 0) {
      px = b.x;
      py = b.y;
      b.vy += cfg.gravity;
      b.x += b.vx;
      b.y += b.vy;
      const bool inside_x = b.x >= 0 && b.x < w;
      if (b.y > ground && b.vy > 0 && inside_x) {
        b.y = ground - (b.y - ground) * cfg.restitution;
        b.vy = -b.vy * cfg.restitution;
        event = 2;
      } else if (cfg.hit_at_edges && ((b.x < radius + 4 && b.vx < 0) || (b.x > w - radius - 5 && b.vx > 0))) {
        detail::launch(b, std::max(speed, std::hypot(b.vx, b.vy)), rng, b.vx > 0);
        event = 1;
      } else if (speed > 0 && rng.bernoulli(cfg.hit_probability) && inside_x && b.y >= 0 && b.y < h) {
        detail::launch(b, speed, rng, b.vx > 0);
        event = 1;
      }
    }

    cv::Mat canvas = scenery.clone();
    FrameLabel label;
    char name[32];
    std::snprintf(name, sizeof name, "%04d.png", f);
    label.frame_name = name;
    label.trajectory = event;

    const bool in_frame = b.x >= 0 && b.x <= w - 1 && b.y >= 0 && b.y <= h - 1;
    const double travel = std::hypot(b.x - px, b.y - py);
    const double streak = cfg.blur_factor * travel;
    if (in_frame) {
      // Streak: sprites from tail to tip with alpha rising linearly to 1.
      cv::Mat alpha(cfg.height, cfg.width, CV_32F, cv::Scalar(0));
      const int steps = static_cast<int>(std::ceil(streak));
      for (int s = 0; s <= steps; ++s) {
        const double t = steps == 0 ? 1.0 : static_cast<double>(s) / steps;
        const double back = (1.0 - t) * streak / std::max(travel, 1e-9);
        const double sx = b.x - back * (b.x - px), sy = b.y - back * (b.y - py);
        cv::max(alpha, render_ball_sprite(cfg.width, cfg.height, sx, sy, radius) * (0.25 + 0.75 * t), alpha);
      }
      detail::composite(canvas, alpha, ball);
      label.visibility = streak > cfg.hard_blur_ratio * 2.0 * radius ? 2 : 1;
      if (rng.bernoulli(cfg.occluder_probability)) {
        const double half_w = radius + rng.uniform(2.0, 6.0), half_h = radius + rng.uniform(4.0, 10.0);
        const cv::Vec3f body = detail::random_colour(rng, {20, 20, 20}, {120, 120, 160});
        cv::rectangle(canvas, cv::Point(static_cast<int>(std::floor(b.x - half_w)), static_cast<int>(std::floor(b.y - half_h))),
                      cv::Point(static_cast<int>(std::ceil(b.x + half_w)), static_cast<int>(std::ceil(b.y + half_h))),
                      cv::Scalar(body[0], body[1], body[2]), cv::FILLED);
        label.visibility = 3;
      }
      label.x = std::round(b.x);
      label.y = std::round(b.y);
    }

    if (cfg.noise_sigma > 0.0)
      for (int y = 0; y < canvas.rows; ++y) {
        auto* p = canvas.ptr<cv::Vec3f>(y);
        for (int x = 0; x < canvas.cols; ++x)
          for (int c = 0; c < 3; ++c) p[x][c] += static_cast<float>(cfg.noise_sigma * rng.normal());
      }
    cv::Mat rgb;
    canvas.convertTo(rgb, CV_8UC3);  // saturating, rounds to nearest
    clip.frames.push_back(std::move(rgb));
    clip.labels.push_back(std::move(label));
  }
  return clip;
}

/// Writes `n_clips` clips under `root` (clip_000, clip_001, ...), each with
/// PNG frames and a 5-field label file. Clip i uses a seed derived from
/// cfg.seed and i.
inline DatasetIndex generate_dataset(const SynthConfig& cfg, int n_clips, const fs::path& root) {
  cfg.validate();
  if (n_clips < 0) throw ArgumentError("clip count must be non-negative");
  DatasetIndex index;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  for (int i = 0; i < n_clips; ++i) {
    SynthConfig c = cfg;
    c.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    const auto clip = generate_clip(c);
    char id[32];
    std::snprintf(id, sizeof id, "clip_%03d", i);
    const fs::path dir = root / id;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (std::size_t f = 0; f < clip.frames.size(); ++f) save_frame(dir / clip.labels[f].frame_name, clip.frames[f]);
    write_text(dir / kLabelFileName, write_label_file(clip.labels, 5));
    index.clips.push_back({id, clip.labels, {cfg.width, cfg.height}, dir});
  }
  return index;
}

inline std::string to_string(Background b) {
  switch (b) {
    case Background::flat: return "flat";
    case Background::textured: return "textured";
    case Background::court: return "court";
  }
  return "court";
}

inline Background parse_background(const std::string& s) {
  if (s == "flat") return Background::flat;
  if (s == "textured") return Background::textured;
  if (s == "court" || s == "court-like") return Background::court;
  throw ArgumentError("unknown background mode '" + s + "' (flat, textured, court)");
}

}  // namespace tracknet
