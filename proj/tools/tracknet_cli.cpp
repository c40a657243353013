// tracknet: synth | heatmaps | train | predict | baseline | evaluate | kfold | overlay
//
// Every config key is also a flag (--frames-per-window for frames_per_window).
// Precedence: defaults < --config file < flags.

#include <malloc.h>

#include <cstdio>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "tracknet/baseline.hpp"
#include "tracknet/checkpoint.hpp"
#include "tracknet/config.hpp"
#include "tracknet/inference.hpp"
#include "tracknet/metrics.hpp"
#include "tracknet/synth.hpp"
#include "tracknet/training.hpp"

using namespace tracknet;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

std::string dashed(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

struct Invocation {
  std::string config_file;
  std::map<std::string, std::string> flags;  // key -> value; empty means not given
};

void add_config_flags(CLI::App& app, Invocation& inv) {
  app.add_option("--config", inv.config_file, "key=value configuration file")->check(CLI::ExistingFile);
  for (const auto& k : config_schema()) {
    auto& slot = inv.flags[k.name];
    app.add_option("--" + dashed(k.name), slot, std::string(k.doc) + " [" + k.default_value + "]");
  }
}

RunConfig resolve(const Invocation& inv) {
  RunConfig cfg;
  if (!inv.config_file.empty()) cfg.merge_file(inv.config_file);
  for (const auto& [k, v] : inv.flags)
    if (!v.empty()) cfg.set(k, v);
  return cfg;
}

fs::path require_path(const RunConfig& cfg, const std::string& key) {
  const auto& v = cfg.str(key);
  if (v.empty()) throw ConfigError("--" + dashed(key) + " is required");
  return v;
}

fs::path prepare_out(const RunConfig& cfg) {
  const auto out = require_path(cfg, "out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  write_text(out / "config.txt", cfg.echo());
  return out;
}

int as_int(const RunConfig& cfg, const std::string& key) { return static_cast<int>(cfg.integer(key)); }

FrameDims working_dims(const RunConfig& cfg) { return {as_int(cfg, "width"), as_int(cfg, "height")}; }

NetworkConfig network_config(const RunConfig& cfg) {
  NetworkConfig n;
  n.input_frames = as_int(cfg, "frames_per_window");
  n.width = as_int(cfg, "width");
  n.height = as_int(cfg, "height");
  n.width_multiplier = cfg.real("width_multiplier");
  if (n.input_frames < 1) throw ConfigError("frames_per_window must be >= 1");
  if (n.width % 8 || n.height % 8 || n.width <= 0 || n.height <= 0)
    throw ConfigError("width and height must be positive multiples of 8");
  if (!(n.width_multiplier > 0.0)) throw ConfigError("width_multiplier must be positive");
  return n;
}

TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.learning_rate = cfg.real("learning_rate");
  t.batch_size = as_int(cfg, "batch_size");
  t.steps_per_epoch = as_int(cfg, "steps_per_epoch");
  t.epochs = as_int(cfg, "epochs");
  t.init_lo = cfg.real("init_lo");
  t.init_hi = cfg.real("init_hi");
  t.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  t.rho = cfg.real("adadelta_rho");
  t.epsilon = cfg.real("adadelta_eps");
  t.sigma2 = cfg.real("sigma2");
  t.checkpoint_every = as_int(cfg, "checkpoint_every");
  return t;
}

DecodeOptions decode_options(const RunConfig& cfg) {
  DecodeOptions d;
  d.threshold = as_int(cfg, "threshold");
  d.search.r_min = as_int(cfg, "r_min");
  d.search.r_max = as_int(cfg, "r_max");
  return d;
}

double pe_spec(const RunConfig& cfg) {
  const double s = cfg.real("pe_spec");
  if (!(s > 0.0)) throw ConfigError("pe_spec must be positive");
  return s;
}

DatasetIndex load_labelled(const RunConfig& cfg) {
  auto idx = load_dataset(require_path(cfg, "data"));
  if (idx.clips.empty()) throw FormatError("no clips under " + cfg.str("data"));
  for (const auto& c : idx.clips) validate_labels(c.labels, c.frame_dims);
  return idx;
}

/// Frame membership for predict / baseline: everything, or one side of the
/// train/test split recomputed from (train_fraction, seed).
std::optional<DatasetIndex> selection(const RunConfig& cfg, const DatasetIndex& idx) {
  const auto& s = cfg.str("split");
  if (s == "all") return std::nullopt;
  if (s != "train" && s != "test") throw ConfigError("split must be all, train or test");
  return split_dataset(idx, cfg.real("train_fraction"), static_cast<std::uint64_t>(cfg.integer("seed")));
}

void restrict_records(std::vector<PredictionRecord>& recs, const std::optional<DatasetIndex>& split,
                      std::size_t clip, Membership m) {
  if (!split) return;
  for (std::size_t f = 0; f < recs.size(); ++f)
    if (!split->is_member(clip, f, m)) recs[f].predicted = false;
}

Membership membership(const RunConfig& cfg) { return cfg.str("split") == "train" ? Membership::train : Membership::test; }

void write_predictions(const fs::path& out, const Clip& clip, const std::vector<PredictionRecord>& recs) {
  write_text(out / (clip.clip_id + ".csv"), write_prediction_file(recs));
}

// ---------------------------------------------------------------------------

int run_synth(const RunConfig& cfg) {
  SynthConfig s;
  s.width = as_int(cfg, "synth_width");
  s.height = as_int(cfg, "synth_height");
  s.length = as_int(cfg, "length");
  s.radius_min = cfg.real("radius_min");
  s.radius_max = cfg.real("radius_max");
  s.speed_min = cfg.real("speed_min");
  s.speed_max = cfg.real("speed_max");
  s.gravity = cfg.real("gravity");
  s.blur_factor = cfg.real("blur_factor");
  s.occluder_probability = cfg.real("occluder_probability");
  s.hit_probability = cfg.real("hit_probability");
  s.background = parse_background(cfg.str("background"));
  s.noise_sigma = cfg.real("noise_sigma");
  s.decoy_count = as_int(cfg, "decoys");
  s.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  const auto out = prepare_out(cfg);
  const auto idx = generate_dataset(s, as_int(cfg, "clips"), out);
  std::cout << "wrote " << idx.clips.size() << " clips to " << out.string() << "\n";
  return kOk;
}

int run_heatmaps(const RunConfig& cfg) {
  const auto idx = load_labelled(cfg);
  const auto dims = working_dims(cfg);
  const double sigma2 = cfg.real("sigma2");
  const auto out = prepare_out(cfg);
  std::size_t n = 0;
  for (const auto& clip : idx.clips) {
    const auto scaled = rescale_clip(clip, dims);
    fs::create_directories(out / clip.clip_id);
    for (const auto& l : scaled.labels) {
      const auto hm = target_heatmap(l, dims.width, dims.height, sigma2);
      const auto name = fs::path(l.frame_name).replace_extension(".png");
      if (!cv::imwrite((out / clip.clip_id / name).string(), to_mat(hm)))
        throw IoError("cannot write " + (out / clip.clip_id / name).string());
      ++n;
    }
  }
  std::cout << "wrote " << n << " heatmaps\n";
  return kOk;
}

struct LoadedData {
  DatasetIndex source;   // labels at source resolution
  DatasetIndex working;  // labels at working resolution
  FrameStore frames;     // working resolution
};

LoadedData load_working(const RunConfig& cfg, FrameDims dims) {
  LoadedData d;
  d.source = load_labelled(cfg);
  d.working = rescale_index(d.source, dims);
  for (const auto& c : d.source.clips) d.frames.push_back(load_clip_frames(c, dims));
  return d;
}

TrainResult fit(const RunConfig& cfg, const LoadedData& data, const DatasetIndex& split, const fs::path& out) {
  const auto net = network_config(cfg);
  const auto tc = train_config(cfg);
  const auto windows = build_windows(split, net.input_frames, Membership::train);
  std::cerr << windows.size() << " training windows\n";
  std::string curve = "epoch,mean_loss\n";
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochStats& s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%d,%.6f\n", s.epoch, s.mean_loss);
    curve += buf;
    write_text(out / "loss_curve.csv", curve);
    std::cerr << "epoch " << s.epoch << " loss " << s.mean_loss << "\n";
  };
  hooks.on_checkpoint = [&](int epoch, const WeightState<float>& w) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch);
    fs::create_directories(out / "checkpoints");
    save_checkpoint(out / "checkpoints" / name, w, cfg.echo());
  };
  auto result = train(data.frames, windows, net, tc, hooks);
  save_checkpoint(out / "model.ckpt", result.weights, cfg.echo());
  write_text(out / "loss_curve.csv", curve);
  return result;
}

int run_train(const RunConfig& cfg) {
  network_config(cfg);  // validate before loading frames
  const auto data = load_working(cfg, working_dims(cfg));
  const auto out = prepare_out(cfg);
  const auto split = split_dataset(data.working, cfg.real("train_fraction"), static_cast<std::uint64_t>(cfg.integer("seed")));
  const auto r = fit(cfg, data, split, out);
  std::cout << "trained " << r.weights.version << " steps; checkpoint " << (out / "model.ckpt").string() << "\n";
  return kOk;
}

/// Split settings stored with the checkpoint apply unless overridden.
RunConfig with_checkpoint_defaults(RunConfig cfg, const Checkpoint& ck) {
  RunConfig stored;
  try {
    stored.merge_text(ck.config_echo);
  } catch (const ConfigError&) {
    return cfg;
  }
  for (const char* key : {"train_fraction", "seed"})
    if (!cfg.is_set(key)) cfg.set(key, stored.str(key));
  return cfg;
}

int run_predict(const RunConfig& base) {
  const auto ck = load_checkpoint(require_path(base, "checkpoint"));
  const auto cfg = with_checkpoint_defaults(base, ck);
  const auto& net = ck.weights.config;
  const auto idx = load_labelled(cfg);
  const auto split = selection(cfg, idx);
  const auto out = prepare_out(cfg);
  ClipPredictionOptions opt;
  opt.decode = decode_options(cfg);
  opt.batch_size = as_int(cfg, "batch_infer");
  opt.keep_working_resolution = cfg.flag("keep_working_resolution");
  for (std::size_t c = 0; c < idx.clips.size(); ++c) {
    const auto& clip = idx.clips[c];
    const auto frames = load_clip_frames(clip, {net.width, net.height});
    auto recs = predict_clip(ck.weights, clip, frames, opt);
    restrict_records(recs, split, c, membership(cfg));
    write_predictions(out, clip, recs);
    std::cerr << clip.clip_id << ": " << frames.size() << " frames\n";
  }
  return kOk;
}

int run_baseline(const RunConfig& cfg) {
  const auto idx = load_labelled(cfg);
  const auto split = selection(cfg, idx);
  const auto out = prepare_out(cfg);
  BaselineConfig bc;
  bc.threshold = as_int(cfg, "baseline_threshold");
  bc.median_k = as_int(cfg, "baseline_median");
  const auto clf = train_candidate_classifier(static_cast<std::uint64_t>(cfg.integer("seed")));
  for (std::size_t c = 0; c < idx.clips.size(); ++c) {
    const auto& clip = idx.clips[c];
    std::vector<cv::Mat> frames;
    for (const auto& l : clip.labels) frames.push_back(load_frame(clip.directory / l.frame_name));
    auto recs = baseline_detect(clip, frames, clf, bc);
    restrict_records(recs, split, c, membership(cfg));
    write_predictions(out, clip, recs);
  }
  return kOk;
}

Evaluation evaluate_dir(const DatasetIndex& idx, const fs::path& predictions, double spec) {
  Evaluation e;
  std::size_t files = 0;
  for (const auto& clip : idx.clips) {
    const auto path = predictions / (clip.clip_id + ".csv");
    if (!fs::exists(path)) continue;
    ++files;
    std::map<std::string, BallDetection> preds;
    for (const auto& r : parse_prediction_file(read_text(path))) preds[r.frame_name] = r.detection();
    evaluate_frames(clip.labels, preds, spec, e);
  }
  if (files == 0) throw FormatError("no prediction files in " + predictions.string());
  return e;
}

void emit_report(const MetricsReport& r, const RunConfig& cfg) {
  const auto text = format_report(r);
  std::cout << text;
  if (cfg.str("out").empty()) return;
  const auto out = prepare_out(cfg);
  write_text(out / "report.txt", text);
  write_text(out / "histogram.txt", format_histogram(r.histogram));
}

int run_evaluate(const RunConfig& cfg) {
  const double spec = pe_spec(cfg);
  const auto idx = load_labelled(cfg);
  emit_report(report(evaluate_dir(idx, require_path(cfg, "predictions"), spec), spec), cfg);
  return kOk;
}

int run_kfold(const RunConfig& cfg) {
  const double spec = pe_spec(cfg);
  network_config(cfg);
  const auto data = load_working(cfg, working_dims(cfg));
  const auto out = prepare_out(cfg);
  const int k = as_int(cfg, "folds");
  const auto folds = make_kfold(data.working, k, static_cast<std::uint64_t>(cfg.integer("seed")));
  ClipPredictionOptions opt;
  opt.decode = decode_options(cfg);
  opt.batch_size = as_int(cfg, "batch_infer");
  std::vector<ConfusionByVC> per_fold;
  Evaluation all;
  for (int f = 0; f < k; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "fold_%02d", f);
    const auto dir = out / name;
    fs::create_directories(dir);
    std::cerr << "fold " << f + 1 << "/" << k << "\n";
    const auto split = fold_split(folds, f);
    const auto r = fit(cfg, data, split, dir);
    Evaluation e;
    for (std::size_t c = 0; c < data.source.clips.size(); ++c) {
      auto recs = predict_clip(r.weights, data.source.clips[c], data.frames[c], opt);
      restrict_records(recs, split, c, Membership::test);
      write_predictions(dir, data.source.clips[c], recs);
      std::map<std::string, BallDetection> preds;
      for (const auto& rec : recs)
        if (rec.predicted) preds[rec.frame_name] = rec.detection();
      evaluate_frames(data.source.clips[c].labels, preds, spec, e);
    }
    write_text(dir / "report.txt", format_report(report(e, spec)));
    per_fold.push_back(e.confusion);
    all.pe.insert(all.pe.end(), e.pe.begin(), e.pe.end());
  }
  auto r = crossval_aggregate(per_fold, spec);
  r.histogram = pe_histogram(all.pe, spec);
  const auto text = format_report(r);
  std::cout << text;
  write_text(out / "report.txt", text);
  write_text(out / "histogram.txt", format_histogram(r.histogram));
  return kOk;
}

int run_overlay(const RunConfig& cfg) {
  const auto idx = load_labelled(cfg);
  const auto predictions = require_path(cfg, "predictions");
  const auto out = prepare_out(cfg);
  for (const auto& clip : idx.clips) {
    const auto path = predictions / (clip.clip_id + ".csv");
    if (!fs::exists(path)) continue;
    std::map<std::string, PredictionRecord> by_name;
    for (auto& r : parse_prediction_file(read_text(path))) by_name[r.frame_name] = r;
    std::vector<cv::Mat> frames;
    std::vector<PredictionRecord> preds;
    for (const auto& l : clip.labels) {
      frames.push_back(load_frame(clip.directory / l.frame_name));
      auto it = by_name.find(l.frame_name);
      PredictionRecord missing;
      missing.frame_name = l.frame_name;
      preds.push_back(it == by_name.end() ? missing : it->second);
    }
    const auto drawn = render_overlay(frames, preds, &clip.labels);
    fs::create_directories(out / clip.clip_id);
    for (std::size_t i = 0; i < drawn.size(); ++i)
      save_frame(out / clip.clip_id / fs::path(clip.labels[i].frame_name).replace_extension(".png"), drawn[i]);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Large activations are allocated every step; keep them in the heap
  // instead of paying for fresh mmap pages each time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);

  CLI::App app{"TrackNet ball tracking: synthetic data, training, inference and evaluation"};
  app.require_subcommand(1);
  struct Command {
    const char* name;
    const char* help;
    int (*run)(const RunConfig&);
  };
  const Command commands[] = {
      {"synth", "generate a synthetic dataset into --out", run_synth},
      {"heatmaps", "write ground-truth heatmaps for --data into --out", run_heatmaps},
      {"train", "train on the training split of --data; checkpoints and loss curve into --out", run_train},
      {"predict", "run --checkpoint over --data; prediction files into --out", run_predict},
      {"baseline", "run the background-subtraction baseline over --data; prediction files into --out", run_baseline},
      {"evaluate", "score --predictions against the labels of --data", run_evaluate},
      {"kfold", "cross-validate over --data; per-fold and pooled reports into --out", run_kfold},
      {"overlay", "draw --predictions and labels onto the frames of --data", run_overlay},
  };
  std::vector<Invocation> invocations(std::size(commands));
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < std::size(commands); ++i) {
    auto* sub = app.add_subcommand(commands[i].name, commands[i].help);
    add_config_flags(*sub, invocations[i]);
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    try {
      return commands[i].run(resolve(invocations[i]));
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return kUsage;
    } catch (const ArgumentError& e) {
      std::cerr << "argument error: " << e.what() << "\n";
      return kUsage;
    } catch (const ParseError& e) {
      std::cerr << "data error: " << e.what() << "\n";
      return kData;
    } catch (const FormatError& e) {
      std::cerr << "data error: " << e.what() << "\n";
      return kData;
    } catch (const IoError& e) {
      std::cerr << "data error: " << e.what() << "\n";
      return kData;
    } catch (const DimensionError& e) {
      std::cerr << "data error: " << e.what() << "\n";
      return kData;
    } catch (const std::exception& e) {
      std::cerr << "runtime error: " << e.what() << "\n";
      return kRuntime;
    }
  }
  return kUsage;
}
