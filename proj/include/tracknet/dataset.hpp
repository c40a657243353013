#pragma once

// Labelled frame datasets: label-file parsing and writing, coordinate
// scaling, frame-level train/test and k-fold assignment, and the sliding
// k-frame windows the network consumes.
//
// On-disk layout: one directory per clip holding numbered frame images and
// a `Label.csv`. Records are "name, vc, x, y[, trajectory]".

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tracknet/errors.hpp"
#include "tracknet/random.hpp"

namespace tracknet {

namespace fs = std::filesystem;

inline constexpr const char* kLabelFileName = "Label.csv";

enum class Visibility : int { absent = 0, clear = 1, hard = 2, occluded = 3 };

struct FrameLabel {
  std::string frame_name;
  int visibility = 0;
  double x = 0.0;
  double y = 0.0;
  std::optional<int> trajectory;  // 0 flying, 1 hit, 2 bouncing

  bool has_ball() const noexcept { return visibility != 0; }
  bool operator==(const FrameLabel&) const = default;
};

struct FrameDims {
  int width = 0;
  int height = 0;
  bool operator==(const FrameDims&) const = default;
};

struct Clip {
  std::string clip_id;
  std::vector<FrameLabel> labels;
  FrameDims frame_dims;
  fs::path directory;  // empty for in-memory clips

  std::size_t size() const noexcept { return labels.size(); }
};

enum class Membership : int { train = 0, test = 1 };

/// Clips plus one assignment per frame: a Membership value after
/// split_dataset, or a fold id after make_kfold.
struct DatasetIndex {
  enum class Kind { unassigned, split, folds };

  std::vector<Clip> clips;
  std::vector<std::vector<int>> assignment;
  Kind kind = Kind::unassigned;
  int fold_count = 0;

  std::size_t frame_count() const {
    std::size_t n = 0;
    for (const auto& c : clips) n += c.size();
    return n;
  }

  bool is_member(std::size_t clip, std::size_t frame, Membership m) const {
    if (kind != Kind::split) throw ArgumentError("dataset has no train/test split");
    return assignment.at(clip).at(frame) == static_cast<int>(m);
  }
};

/// k consecutive frames of one clip; the label refers to the last one.
struct FrameWindow {
  std::size_t clip = 0;
  std::vector<std::size_t> frames;
  FrameLabel target;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::optional<double> parse_real(std::string_view s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<int> parse_int(std::string_view s) {
  if (s.empty()) return std::nullopt;
  int v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) return std::nullopt;
  return v;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline bool is_header(const std::vector<std::string_view>& fields) {
  return fields.size() >= 2 && lower(fields[1]) == "visibility";
}

inline std::string format_coord(double v) {
  return std::to_string(static_cast<long long>(std::llround(v)));
}

}  // namespace detail

/// Parses a label file with exactly `field_count` (4 or 5) fields per
/// record. Blank lines and a leading column-title row are skipped. For
/// vc = 0 the coordinate and trajectory fields may be empty.
inline std::vector<FrameLabel> parse_label_file(std::string_view text, int field_count) {
  if (field_count != 4 && field_count != 5) throw ArgumentError("field_count must be 4 or 5");
  std::vector<FrameLabel> labels;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_fields(line);
    if (line_no == 1 && detail::is_header(fields)) continue;
    if (static_cast<int>(fields.size()) != field_count)
      throw ParseError(line_no, "expected " + std::to_string(field_count) + " fields, found " +
                                    std::to_string(fields.size()));
    FrameLabel l;
    l.frame_name = std::string(fields[0]);
    if (l.frame_name.empty()) throw ParseError(line_no, "empty frame name");
    const auto vc = detail::parse_int(fields[1]);
    if (!vc || *vc < 0 || *vc > 3)
      throw ParseError(line_no, "visibility must be 0, 1, 2 or 3, got '" +
                                    std::string(fields[1]) + "'");
    l.visibility = *vc;
    const auto x = detail::parse_real(fields[2]);
    const auto y = detail::parse_real(fields[3]);
    if (l.visibility != 0) {
      if (!x) throw ParseError(line_no, "non-numeric x '" + std::string(fields[2]) + "'");
      if (!y) throw ParseError(line_no, "non-numeric y '" + std::string(fields[3]) + "'");
      l.x = *x;
      l.y = *y;
    } else {
      if ((!fields[2].empty() && !x) || (!fields[3].empty() && !y))
        throw ParseError(line_no, "non-numeric coordinate");
    }
    if (field_count == 5) {
      if (fields[4].empty()) {
        if (l.visibility != 0) throw ParseError(line_no, "missing trajectory pattern");
      } else {
        const auto t = detail::parse_int(fields[4]);
        if (!t || *t < 0 || *t > 2)
          throw ParseError(line_no, "trajectory must be 0, 1 or 2, got '" +
                                        std::string(fields[4]) + "'");
        l.trajectory = *t;
      }
    }
    labels.push_back(std::move(l));
  }
  return labels;
}

/// Field count of the first record (4 or 5); 5 for an empty file.
inline int detect_field_count(std::string_view text) {
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_fields(line);
    if (line_no == 1 && detail::is_header(fields)) continue;
    if (fields.size() == 4 || fields.size() == 5) return static_cast<int>(fields.size());
    throw ParseError(line_no, "cannot infer field count from " + std::to_string(fields.size()) +
                                  " fields");
  }
  return 5;
}

/// Serialises labels; coordinates are rounded to the nearest integer and
/// left empty for vc = 0.
inline std::string write_label_file(const std::vector<FrameLabel>& labels, int field_count) {
  if (field_count != 4 && field_count != 5) throw ArgumentError("field_count must be 4 or 5");
  std::ostringstream os;
  for (const auto& l : labels) {
    std::vector<std::string> f{l.frame_name, std::to_string(l.visibility)};
    f.push_back(l.visibility ? detail::format_coord(l.x) : "");
    f.push_back(l.visibility ? detail::format_coord(l.y) : "");
    if (field_count == 5) f.push_back(l.trajectory ? std::to_string(*l.trajectory) : "");
    os << f[0];
    for (std::size_t i = 1; i < f.size(); ++i) os << (f[i].empty() ? "," : ", ") << f[i];
    os << '\n';
  }
  return os.str();
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<FrameLabel> scale_labels(const std::vector<FrameLabel>& labels, double sx,
                                            double sy) {
  if (!(sx > 0.0) || !(sy > 0.0)) throw ArgumentError("scale factors must be positive");
  std::vector<FrameLabel> out = labels;
  for (auto& l : out) {
    l.x *= sx;
    l.y *= sy;
  }
  return out;
}

/// Checks coordinates of visible frames lie inside the frame.
inline void validate_labels(const std::vector<FrameLabel>& labels, FrameDims dims) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& l = labels[i];
    if (!l.has_ball()) continue;
    if (l.x < 0.0 || l.x >= dims.width || l.y < 0.0 || l.y >= dims.height)
      throw FormatError("label " + l.frame_name + " lies outside the " +
                        std::to_string(dims.width) + "x" + std::to_string(dims.height) +
                        " frame");
  }
}

/// Uniform frame-level split: round(train_fraction * N) frames go to train.
inline DatasetIndex split_dataset(const DatasetIndex& index, double train_fraction,
                                  std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ArgumentError("train_fraction must lie in (0, 1)");
  const std::size_t n = index.frame_count();
  if (n == 0) throw ArgumentError("cannot split an empty dataset");
  std::vector<std::pair<std::size_t, std::size_t>> frames;
  frames.reserve(n);
  for (std::size_t c = 0; c < index.clips.size(); ++c)
    for (std::size_t f = 0; f < index.clips[c].size(); ++f) frames.emplace_back(c, f);
  Rng rng(seed);
  rng.shuffle(frames);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));

  DatasetIndex out = index;
  out.kind = DatasetIndex::Kind::split;
  out.fold_count = 0;
  out.assignment.assign(index.clips.size(), {});
  for (std::size_t c = 0; c < index.clips.size(); ++c)
    out.assignment[c].assign(index.clips[c].size(), static_cast<int>(Membership::test));
  for (std::size_t i = 0; i < n_train; ++i)
    out.assignment[frames[i].first][frames[i].second] = static_cast<int>(Membership::train);
  return out;
}

/// Random partition into k folds whose sizes differ by at most one.
inline DatasetIndex make_kfold(const DatasetIndex& index, int k, std::uint64_t seed) {
  if (k < 2) throw ArgumentError("k-fold needs k >= 2");
  const std::size_t n = index.frame_count();
  if (static_cast<std::size_t>(k) > n)
    throw ArgumentError("k = " + std::to_string(k) + " exceeds the " + std::to_string(n) +
                        " available frames");
  std::vector<std::pair<std::size_t, std::size_t>> frames;
  frames.reserve(n);
  for (std::size_t c = 0; c < index.clips.size(); ++c)
    for (std::size_t f = 0; f < index.clips[c].size(); ++f) frames.emplace_back(c, f);
  Rng rng(seed);
  rng.shuffle(frames);

  DatasetIndex out = index;
  out.kind = DatasetIndex::Kind::folds;
  out.fold_count = k;
  out.assignment.assign(index.clips.size(), {});
  for (std::size_t c = 0; c < index.clips.size(); ++c) out.assignment[c].assign(index.clips[c].size(), -1);
  for (std::size_t i = 0; i < n; ++i)
    out.assignment[frames[i].first][frames[i].second] = static_cast<int>(i % static_cast<std::size_t>(k));
  return out;
}

/// Treats fold `fold` as the test set and all other folds as training.
inline DatasetIndex fold_split(const DatasetIndex& folds, int fold) {
  if (folds.kind != DatasetIndex::Kind::folds) throw ArgumentError("dataset has no folds");
  if (fold < 0 || fold >= folds.fold_count) throw ArgumentError("fold id out of range");
  DatasetIndex out = folds;
  out.kind = DatasetIndex::Kind::split;
  out.fold_count = 0;
  for (auto& clip : out.assignment)
    for (auto& a : clip)
      a = static_cast<int>(a == fold ? Membership::test : Membership::train);
  return out;
}

/// Every run of k consecutive frames in clip `clip_index` whose last frame
/// has membership `m`. Windows never cross clip boundaries.
inline std::vector<FrameWindow> build_windows(const DatasetIndex& index, std::size_t clip_index,
                                              int k, Membership m) {
  if (k < 1) throw ArgumentError("window length must be >= 1");
  const Clip& clip = index.clips.at(clip_index);
  std::vector<FrameWindow> out;
  const auto len = static_cast<std::size_t>(k);
  if (clip.size() < len) return out;
  for (std::size_t last = len - 1; last < clip.size(); ++last) {
    if (!index.is_member(clip_index, last, m)) continue;
    FrameWindow w;
    w.clip = clip_index;
    for (std::size_t f = last + 1 - len; f <= last; ++f) w.frames.push_back(f);
    w.target = clip.labels[last];
    out.push_back(std::move(w));
  }
  return out;
}

inline std::vector<FrameWindow> build_windows(const DatasetIndex& index, int k, Membership m) {
  std::vector<FrameWindow> out;
  for (std::size_t c = 0; c < index.clips.size(); ++c) {
    auto w = build_windows(index, c, k, m);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

/// Reads an image as 8-bit RGB.
inline cv::Mat load_frame(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw IoError("cannot read frame " + path.string());
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw FormatError("cannot decode frame " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

inline void save_frame(const fs::path& path, const cv::Mat& rgb) {
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write frame " + path.string());
}

/// Bilinear resampling to exactly w x h.
inline cv::Mat resize_frame(const cv::Mat& image, int w, int h) {
  if (w <= 0 || h <= 0) throw ArgumentError("target dimensions must be positive");
  if (image.cols == w && image.rows == h) return image.clone();
  cv::Mat out;
  cv::resize(image, out, cv::Size(w, h), 0.0, 0.0, cv::INTER_LINEAR);
  return out;
}

/// Loads one clip directory (labels plus dims of the first frame).
inline Clip load_clip(const fs::path& dir) {
  Clip clip;
  clip.clip_id = dir.filename().string();
  clip.directory = dir;
  const auto text = read_text(dir / kLabelFileName);
  clip.labels = parse_label_file(text, detect_field_count(text));
  if (!clip.labels.empty()) {
    const auto first = load_frame(dir / clip.labels.front().frame_name);
    clip.frame_dims = {first.cols, first.rows};
    validate_labels(clip.labels, clip.frame_dims);
  }
  return clip;
}

/// Every sub-directory of `root` containing a label file, in name order.
inline DatasetIndex load_dataset(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw IoError("dataset root " + root.string() + " not found");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / kLabelFileName)) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  DatasetIndex index;
  for (const auto& d : dirs) index.clips.push_back(load_clip(d));
  return index;
}

/// Frames of every clip resized to the working resolution, [clip][frame].
using FrameStore = std::vector<std::vector<cv::Mat>>;

inline std::vector<cv::Mat> load_clip_frames(const Clip& clip, FrameDims working) {
  std::vector<cv::Mat> frames;
  frames.reserve(clip.size());
  for (const auto& l : clip.labels)
    frames.push_back(resize_frame(load_frame(clip.directory / l.frame_name), working.width,
                                  working.height));
  return frames;
}

/// Copy of `clip` with labels and dims expressed at the working resolution.
inline Clip rescale_clip(const Clip& clip, FrameDims working) {
  Clip out = clip;
  if (clip.frame_dims.width > 0 && clip.frame_dims.height > 0)
    out.labels = scale_labels(clip.labels, static_cast<double>(working.width) / clip.frame_dims.width,
                              static_cast<double>(working.height) / clip.frame_dims.height);
  out.frame_dims = working;
  return out;
}

inline DatasetIndex rescale_index(const DatasetIndex& index, FrameDims working) {
  DatasetIndex out = index;
  for (auto& c : out.clips) c = rescale_clip(c, working);
  return out;
}

}  // namespace tracknet
