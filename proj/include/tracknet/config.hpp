#pragma once

// Flat key=value run configuration: built-in defaults, then a file, then
// command-line overrides. Unknown keys are rejected.

#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "tracknet/dataset.hpp"
#include "tracknet/errors.hpp"

namespace tracknet {

struct ConfigKey {
  const char* name;
  const char* default_value;
  const char* doc;
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = {
      {"data", "", "dataset root (one sub-directory per clip with Label.csv)"},
      {"out", "", "output directory"},
      {"checkpoint", "", "checkpoint file for predict / overlay"},
      {"predictions", "", "directory of <clip>.csv prediction files"},
      {"frames_per_window", "3", "consecutive input frames k"},
      {"width", "640", "working frame width (divisible by 8)"},
      {"height", "360", "working frame height (divisible by 8)"},
      {"width_multiplier", "1.0", "scale of every conv depth except the 256-way output"},
      {"epochs", "500", "training epochs"},
      {"steps_per_epoch", "200", "optimizer steps per epoch"},
      {"batch_size", "2", "windows per optimizer step"},
      {"learning_rate", "1.0", "Adadelta learning rate"},
      {"adadelta_rho", "0.95", "Adadelta decay"},
      {"adadelta_eps", "1e-6", "Adadelta epsilon"},
      {"init_lo", "-0.05", "lower bound of uniform initial weights"},
      {"init_hi", "0.05", "upper bound of uniform initial weights"},
      {"checkpoint_every", "25", "epochs between checkpoints (final one always written)"},
      {"sigma2", "10", "ground-truth Gaussian variance"},
      {"threshold", "128", "heatmap binarization threshold"},
      {"r_min", "2", "minimum circle radius"},
      {"r_max", "12", "maximum circle radius"},
      {"pe_spec", "5", "positioning-error tolerance in pixels (tennis 5, badminton 7.5)"},
      {"train_fraction", "0.7", "share of frames in the training split"},
      {"split", "all", "frames to predict or evaluate: all, train or test"},
      {"folds", "10", "cross-validation folds"},
      {"seed", "0", "master random seed"},
      {"batch_infer", "4", "windows per inference batch"},
      {"keep_working_resolution", "false", "write predictions at working instead of source resolution"},
      {"clips", "10", "synth: number of clips"},
      {"length", "60", "synth: frames per clip"},
      {"synth_width", "320", "synth: frame width"},
      {"synth_height", "176", "synth: frame height"},
      {"radius_min", "1", "synth: minimum ball radius"},
      {"radius_max", "6", "synth: maximum ball radius"},
      {"speed_min", "2", "synth: minimum speed, px per frame"},
      {"speed_max", "12", "synth: maximum speed, px per frame"},
      {"gravity", "0.35", "synth: px per frame^2"},
      {"blur_factor", "0.5", "synth: streak length per px of displacement"},
      {"occluder_probability", "0.05", "synth: chance a visible ball is occluded"},
      {"hit_probability", "0.03", "synth: chance of a mid-air hit per frame"},
      {"background", "court", "synth: flat, textured or court"},
      {"noise_sigma", "0", "synth: per-frame pixel noise"},
      {"decoys", "0", "synth: static ball-coloured discs per clip"},
      {"baseline_threshold", "25", "baseline: background / frame difference threshold"},
      {"baseline_median", "3", "baseline: median filter size"},
  };
  return keys;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_[k.name] = k.default_value;
  }

  static bool known(const std::string& key) { return find(key) != nullptr; }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
    explicit_.insert(key);
  }

  bool is_set(const std::string& key) const { return explicit_.count(key) > 0; }

  /// `key = value` per line; blank lines and `#` comments ignored.
  void merge_text(std::string_view text) {
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
      const auto nl = text.find('\n', pos);
      std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
      pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
      const std::string key(detail::trim(line.substr(0, eq)));
      if (!known(key)) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
      set(key, std::string(detail::trim(line.substr(eq + 1))));
    }
  }

  void merge_file(const fs::path& path) {
    try {
      merge_text(read_text(path));
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
  }

  const std::string& str(const std::string& key) const {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    return values_.at(key);
  }

  long long integer(const std::string& key) const {
    const auto& s = str(key);
    long long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + " must be an integer, got '" + s + "'");
    return v;
  }

  double real(const std::string& key) const {
    const auto v = detail::parse_real(str(key));
    if (!v) throw ConfigError(key + " must be a number, got '" + str(key) + "'");
    return *v;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + " must be true or false, got '" + s + "'");
  }

  /// Effective configuration, one key=value per line in schema order.
  std::string echo() const {
    std::string s;
    for (const auto& k : config_schema()) s += std::string(k.name) + "=" + values_.at(k.name) + "\n";
    return s;
  }

 private:
  static const ConfigKey* find(const std::string& key) {
    for (const auto& k : config_schema())
      if (key == k.name) return &k;
    return nullptr;
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

}  // namespace tracknet
