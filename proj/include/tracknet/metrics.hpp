#pragma once

// Evaluation protocol: positioning error, outcomes per visibility class,
// precision / recall / F1 and the positioning-error histogram.

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tracknet/dataset.hpp"
#include "tracknet/errors.hpp"
#include "tracknet/heatmap.hpp"

namespace tracknet {

inline constexpr double kTennisPeSpec = 5.0;
inline constexpr double kBadmintonPeSpec = 7.5;

enum class Outcome : int { tp = 0, fp = 1, tn = 2, fn = 3 };

inline double positioning_error(double px, double py, double tx, double ty) { return std::hypot(px - tx, py - ty); }

/// PE equal to the spec still counts as a true positive.
inline Outcome classify_outcome(const BallDetection& det, const FrameLabel& label, double pe_spec) {
  if (!(pe_spec > 0.0)) throw ArgumentError("PE spec must be positive");
  if (!label.has_ball()) return det.found ? Outcome::fp : Outcome::tn;
  if (!det.found) return Outcome::fn;
  return positioning_error(det.x, det.y, label.x, label.y) <= pe_spec ? Outcome::tp : Outcome::fp;
}

struct ConfusionByVC {
  std::array<std::array<long long, 4>, 4> counts{};  // [vc][outcome]

  void add(int vc, Outcome o) { counts.at(vc)[static_cast<int>(o)] += 1; }
  long long at(int vc, Outcome o) const { return counts.at(vc)[static_cast<int>(o)]; }

  long long total(Outcome o) const {
    long long n = 0;
    for (const auto& row : counts) n += row[static_cast<int>(o)];
    return n;
  }
  long long frames(int vc) const {
    long long n = 0;
    for (auto c : counts.at(vc)) n += c;
    return n;
  }
  long long ball_frames() const { return frames(1) + frames(2) + frames(3); }

  ConfusionByVC& operator+=(const ConfusionByVC& o) {
    for (int v = 0; v < 4; ++v)
      for (int k = 0; k < 4; ++k) counts[v][k] += o.counts[v][k];
    return *this;
  }
  bool operator==(const ConfusionByVC&) const = default;
};

struct TaggedOutcome {
  int visibility = 0;
  Outcome outcome = Outcome::tn;
};

inline ConfusionByVC aggregate(const std::vector<TaggedOutcome>& outcomes) {
  ConfusionByVC c;
  for (const auto& t : outcomes) c.add(t.visibility, t.outcome);
  return c;
}

/// Bucket x (1..ceil(spec)) holds x-1 < PE <= x, bucket 0 holds PE == 0,
/// `overflow` holds PE > spec.
struct PeHistogram {
  double spec = kTennisPeSpec;
  std::vector<long long> buckets;
  long long overflow = 0;

  long long total() const {
    long long n = overflow;
    for (auto b : buckets) n += b;
    return n;
  }
  double percent(long long count) const { return total() ? 100.0 * count / total() : 0.0; }
};

inline PeHistogram pe_histogram(const std::vector<double>& pe, double spec) {
  if (!(spec > 0.0)) throw ArgumentError("PE spec must be positive");
  PeHistogram h;
  h.spec = spec;
  h.buckets.assign(static_cast<std::size_t>(std::ceil(spec)) + 1, 0);
  for (double v : pe) {
    if (v > spec) {
      ++h.overflow;
    } else {
      h.buckets[static_cast<std::size_t>(std::ceil(std::max(v, 0.0)))] += 1;
    }
  }
  return h;
}

struct MetricsReport {
  std::optional<double> precision;  // nullopt: zero denominator
  std::optional<double> recall;
  std::optional<double> f1;
  double pe_spec = kTennisPeSpec;
  ConfusionByVC confusion;
  PeHistogram histogram;
};

/// Precision = TP / (TP + FP over all classes), recall = TP / #ball frames,
/// F1 their harmonic mean.
inline MetricsReport precision_recall_f1(const ConfusionByVC& c, double pe_spec = kTennisPeSpec) {
  MetricsReport r;
  r.pe_spec = pe_spec;
  r.confusion = c;
  r.histogram = pe_histogram({}, pe_spec);
  const double tp = static_cast<double>(c.total(Outcome::tp));
  const double fp = static_cast<double>(c.total(Outcome::fp));
  const double balls = static_cast<double>(c.ball_frames());
  if (tp + fp > 0) r.precision = tp / (tp + fp);
  if (balls > 0) r.recall = tp / balls;
  if (r.precision && r.recall && *r.precision + *r.recall > 0)
    r.f1 = 2.0 * *r.precision * *r.recall / (*r.precision + *r.recall);
  return r;
}

/// Scores predictions against labels by frame name. Labelled frames with no
/// prediction record (e.g. the first k-1 of a clip) are not evaluated.
struct Evaluation {
  ConfusionByVC confusion;
  std::vector<double> pe;  // found detections on ball frames
};

inline void evaluate_frames(const std::vector<FrameLabel>& labels,
                            const std::map<std::string, BallDetection>& predictions, double pe_spec,
                            Evaluation& into) {
  for (const auto& l : labels) {
    auto it = predictions.find(l.frame_name);
    if (it == predictions.end()) continue;
    into.confusion.add(l.visibility, classify_outcome(it->second, l, pe_spec));
    if (l.has_ball() && it->second.found)
      into.pe.push_back(positioning_error(it->second.x, it->second.y, l.x, l.y));
  }
}

inline MetricsReport report(const Evaluation& e, double pe_spec) {
  auto r = precision_recall_f1(e.confusion, pe_spec);
  r.histogram = pe_histogram(e.pe, pe_spec);
  return r;
}

/// Micro-average: per-fold counts are summed before computing metrics.
inline MetricsReport crossval_aggregate(const std::vector<ConfusionByVC>& folds, double pe_spec = kTennisPeSpec) {
  if (folds.size() < 2) throw ArgumentError("cross validation needs at least 2 folds");
  ConfusionByVC sum;
  for (const auto& f : folds) sum += f;
  return precision_recall_f1(sum, pe_spec);
}

inline std::string format_percent(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * *v);
  return buf;
}

/// Human-readable table followed by a key=value block.
inline std::string format_report(const MetricsReport& r) {
  static const char* names[4] = {"TP", "FP", "TN", "FN"};
  std::string s;
  char buf[160];
  s += "        VC0      VC1      VC2      VC3\n";
  for (int o = 0; o < 4; ++o) {
    std::snprintf(buf, sizeof buf, "%-4s", names[o]);
    s += buf;
    for (int v = 0; v < 4; ++v) {
      const bool applicable = (v == 0) ? (o == 1 || o == 2) : (o != 2);
      if (applicable)
        std::snprintf(buf, sizeof buf, " %8lld", r.confusion.at(v, static_cast<Outcome>(o)));
      else
        std::snprintf(buf, sizeof buf, " %8s", "-");
      s += buf;
    }
    s += '\n';
  }
  s += "precision " + format_percent(r.precision) + "  recall " + format_percent(r.recall) + "  F1 " +
       format_percent(r.f1) + '\n';
  s += "PE histogram (bucket x: x-1 < PE <= x)\n";
  for (std::size_t b = 0; b < r.histogram.buckets.size(); ++b) {
    std::snprintf(buf, sizeof buf, "  %2zu  %8lld  %5.1f%%\n", b, r.histogram.buckets[b],
                  r.histogram.percent(r.histogram.buckets[b]));
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "  >%g  %8lld  %5.1f%%\n", r.pe_spec, r.histogram.overflow,
                r.histogram.percent(r.histogram.overflow));
  s += buf;

  auto kv = [&](const std::string& k, const std::optional<double>& v) {
    if (v) {
      std::snprintf(buf, sizeof buf, "%s=%.6f\n", k.c_str(), *v);
      s += buf;
    } else {
      s += k + "=undefined\n";
    }
  };
  s += "\n";
  kv("precision", r.precision);
  kv("recall", r.recall);
  kv("f1", r.f1);
  std::snprintf(buf, sizeof buf, "pe_spec=%g\n", r.pe_spec);
  s += buf;
  for (int v = 0; v < 4; ++v)
    for (int o = 0; o < 4; ++o) {
      std::snprintf(buf, sizeof buf, "vc%d_%c%c=%lld\n", v, names[o][0] + 32, names[o][1] + 32,
                    r.confusion.at(v, static_cast<Outcome>(o)));
      s += buf;
    }
  return s;
}

/// Two columns: bucket label and count.
inline std::string format_histogram(const PeHistogram& h) {
  std::string s;
  for (std::size_t b = 0; b < h.buckets.size(); ++b) s += std::to_string(b) + " " + std::to_string(h.buckets[b]) + "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, ">%g %lld\n", h.spec, h.overflow);
  s += buf;
  return s;
}

}  // namespace tracknet
