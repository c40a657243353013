#pragma once

// Ground-truth encoding, the summed per-pixel cross-entropy, uniform weight
// initialisation, the Adadelta optimiser and the training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "tracknet/dataset.hpp"
#include "tracknet/errors.hpp"
#include "tracknet/heatmap.hpp"
#include "tracknet/input.hpp"
#include "tracknet/network.hpp"
#include "tracknet/random.hpp"

namespace tracknet {

struct TrainConfig {
  double learning_rate = 1.0;
  int batch_size = 2;
  int steps_per_epoch = 200;
  int epochs = 500;
  double init_lo = -0.05;
  double init_hi = 0.05;
  std::uint64_t seed = 0;
  double rho = 0.95;
  double epsilon = 1e-6;
  double sigma2 = kDefaultSigma2;
  int checkpoint_every = 25;
};

/// Per-pixel target class; class index k stands for Q(i,j,k) = 1.
struct ClassMap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> classes;
};

inline ClassMap ground_truth_classes(const Heatmap& hm) { return {hm.width, hm.height, hm.values}; }

/// Gaussian heatmap at the label, or all zeros when the ball is absent.
inline Heatmap target_heatmap(const FrameLabel& label, int w, int h, double sigma2 = kDefaultSigma2) {
  if (!label.has_ball()) return zero_heatmap(w, h);
  return gaussian_heatmap(w, h, label.x, label.y, sigma2);
}

inline constexpr double kProbabilityFloor = 1e-12;

/// -sum log P(i, j, target(i, j)) over every pixel of every sample.
template <typename T>
double cross_entropy_loss(const Tensor<T>& p, const std::vector<ClassMap>& targets) {
  if (static_cast<int>(targets.size()) != p.batch())
    throw DimensionError("one target map per sample required");
  double loss = 0.0;
  for (int n = 0; n < p.batch(); ++n) {
    const auto& t = targets[n];
    if (t.width != p.width() || t.height != p.height())
      throw DimensionError("target map is " + std::to_string(t.width) + "x" +
                           std::to_string(t.height) + ", prediction is " +
                           std::to_string(p.width()) + "x" + std::to_string(p.height()));
    for (std::size_t i = 0; i < p.plane(); ++i) {
      const int k = t.classes[i];
      if (k >= p.channels()) throw DimensionError("target class exceeds class count");
      loss -= std::log(std::max(static_cast<double>(p.channel(n, k)[i]), kProbabilityFloor));
    }
  }
  return loss;
}

/// Turns softmax output `p` into dLoss/dlogits (P - Q) in place.
template <typename T>
void softmax_cross_entropy_grad(Tensor<T>& p, const std::vector<ClassMap>& targets) {
  for (int n = 0; n < p.batch(); ++n)
    for (std::size_t i = 0; i < p.plane(); ++i) p.channel(n, targets[n].classes[i])[i] -= T(1);
}

/// Conv filters drawn i.i.d. uniform in [lo, hi); biases and BN shifts
/// start at zero, BN scales at one.
template <typename T>
WeightState<T> init_weights(const NetworkConfig& cfg, double lo, double hi, std::uint64_t seed) {
  if (!(lo < hi)) throw ArgumentError("initial weight range needs lo < hi");
  auto w = WeightState<T>::shaped(cfg);
  Rng rng(seed);
  for (auto& c : w.convs)
    for (auto& v : c.weight) v = static_cast<T>(rng.uniform(lo, hi));
  return w;
}

template <typename T>
struct AdadeltaState {
  double learning_rate = 1.0;
  double rho = 0.95;
  double epsilon = 1e-6;
  std::vector<ConvGrads<T>> mean_sq_grad;
  std::vector<ConvGrads<T>> mean_sq_update;

  static AdadeltaState for_weights(const WeightState<T>& w, double lr, double rho, double eps) {
    return {lr, rho, eps, zero_grads(w), zero_grads(w)};
  }
};

namespace detail {

template <typename T>
void adadelta_tensor(std::vector<T>& w, const std::vector<T>& g, std::vector<T>& eg2,
                     std::vector<T>& edx2, double lr, double rho, double eps) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g[i];
    const double a = rho * eg2[i] + (1.0 - rho) * gi * gi;
    const double dx = -std::sqrt(edx2[i] + eps) / std::sqrt(a + eps) * gi;
    eg2[i] = static_cast<T>(a);
    edx2[i] = static_cast<T>(rho * edx2[i] + (1.0 - rho) * dx * dx);
    w[i] = static_cast<T>(w[i] + lr * dx);
  }
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

inline std::string conv_name(const std::vector<LayerSpec>& layers, std::size_t conv_index) {
  std::size_t i = 0;
  for (const auto& l : layers) {
    if (l.kind != LayerKind::conv) continue;
    if (i++ == conv_index) return l.name;
  }
  return "conv#" + std::to_string(conv_index);
}

}  // namespace detail

/// One Adadelta update: running averages of squared gradients and squared
/// updates, step scaled by the learning rate.
template <typename T>
void adadelta_step(WeightState<T>& w, AdadeltaState<T>& s, const std::vector<ConvGrads<T>>& g) {
  if (g.size() != w.convs.size() || s.mean_sq_grad.size() != w.convs.size())
    throw DimensionError("gradient set does not match the weights");
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& gi = g[i];
    if (gi.weight.size() != w.convs[i].weight.size() || gi.bias.size() != w.convs[i].bias.size())
      throw DimensionError("gradient shape mismatch at " + detail::conv_name(w.layers, i));
    if (!detail::all_finite(gi.weight) || !detail::all_finite(gi.bias) ||
        !detail::all_finite(gi.gamma) || !detail::all_finite(gi.beta))
      throw TrainingError("non-finite gradient in layer " + detail::conv_name(w.layers, i));
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    auto& p = w.convs[i];
    auto& a = s.mean_sq_grad[i];
    auto& u = s.mean_sq_update[i];
    detail::adadelta_tensor(p.weight, g[i].weight, a.weight, u.weight, s.learning_rate, s.rho, s.epsilon);
    detail::adadelta_tensor(p.bias, g[i].bias, a.bias, u.bias, s.learning_rate, s.rho, s.epsilon);
    detail::adadelta_tensor(p.gamma, g[i].gamma, a.gamma, u.gamma, s.learning_rate, s.rho, s.epsilon);
    detail::adadelta_tensor(p.beta, g[i].beta, a.beta, u.beta, s.learning_rate, s.rho, s.epsilon);
  }
  ++w.version;
}

/// Loss and gradients for one batch in training mode. Returns the summed
/// loss; `grads` is overwritten.
template <typename T>
double loss_and_gradients(const WeightState<T>& w, const Tensor<T>& input,
                          const std::vector<ClassMap>& targets, std::vector<ConvGrads<T>>& grads,
                          ForwardTrace<T>& trace) {
  auto logits = forward(w, input, Mode::training, &trace);
  auto p = softmax_depth(logits);
  const double loss = cross_entropy_loss(p, targets);
  softmax_cross_entropy_grad(p, targets);
  grads = zero_grads(w);
  backward(w, trace, p, grads);
  return loss;
}

struct EpochStats {
  int epoch = 0;           // 1-based
  double mean_loss = 0.0;  // summed loss per window, averaged over the epoch
};

struct TrainHooks {
  std::function<void(const EpochStats&)> on_epoch;
  // Called after every `checkpoint_every` epochs and after the last one.
  std::function<void(int epoch, const WeightState<float>&)> on_checkpoint;
};

struct TrainResult {
  WeightState<float> weights;
  std::vector<EpochStats> loss_curve;
  std::uint64_t windows_consumed = 0;
};

/// Adadelta training over uniformly sampled (with replacement) windows.
/// `frames` holds working-resolution RGB frames; window labels must be in
/// the same resolution.
inline TrainResult train(const FrameStore& frames, const std::vector<FrameWindow>& windows,
                         const NetworkConfig& net, const TrainConfig& tc,
                         const TrainHooks& hooks = {}) {
  if (tc.epochs < 0 || tc.steps_per_epoch < 1 || tc.batch_size < 1)
    throw ArgumentError("epochs >= 0, steps_per_epoch >= 1 and batch_size >= 1 required");
  TrainResult result;
  result.weights = init_weights<float>(net, tc.init_lo, tc.init_hi, tc.seed);
  if (tc.epochs == 0) return result;
  if (windows.empty()) throw ArgumentError("no training windows");

  auto opt = AdadeltaState<float>::for_weights(result.weights, tc.learning_rate, tc.rho, tc.epsilon);
  Rng sampler(derive_seed(tc.seed, 1));
  std::vector<ConvGrads<float>> grads;
  ForwardTrace<float> trace;
  std::vector<const cv::Mat*> window_frames;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int step = 0; step < tc.steps_per_epoch; ++step) {
      Tensor<float> input(tc.batch_size, net.input_channels(), net.height, net.width);
      std::vector<ClassMap> targets;
      for (int b = 0; b < tc.batch_size; ++b) {
        const auto& win = windows[sampler.below(windows.size())];
        window_frames.clear();
        for (auto f : win.frames) window_frames.push_back(&frames.at(win.clip).at(f));
        pack_frames<float>(window_frames, input, b);
        targets.push_back(ground_truth_classes(target_heatmap(win.target, net.width, net.height, tc.sigma2)));
      }
      const double loss = loss_and_gradients(result.weights, input, targets, grads, trace);
      if (!std::isfinite(loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                            std::to_string(step) + " (optimizer step " +
                            std::to_string(result.weights.version) + ")");
      adadelta_step(result.weights, opt, grads);
      update_running_stats(result.weights, trace);
      epoch_loss += loss;
      result.windows_consumed += static_cast<std::uint64_t>(tc.batch_size);
    }
    EpochStats stats{epoch, epoch_loss / (static_cast<double>(tc.steps_per_epoch) * tc.batch_size)};
    result.loss_curve.push_back(stats);
    if (hooks.on_epoch) hooks.on_epoch(stats);
    const bool cadence = tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0;
    if (hooks.on_checkpoint && (cadence || epoch == tc.epochs)) hooks.on_checkpoint(epoch, result.weights);
  }
  return result;
}

/// |a - n| / max(|a|, |n|); 0 when both vanish.
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale == 0.0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // both gradients below `magnitude_floor`
};

/// Compares back-propagated gradients with central finite differences on
/// `samples` randomly chosen trainable parameters. Parameters whose analytic
/// and numeric gradients are both below `magnitude_floor` are counted as
/// skipped.
inline GradientCheckResult gradient_check(const WeightState<double>& weights,
                                          const Tensor<double>& input,
                                          const std::vector<ClassMap>& targets, double epsilon,
                                          std::size_t samples, std::uint64_t seed,
                                          double magnitude_floor = 1e-9) {
  ForwardTrace<double> trace;
  std::vector<ConvGrads<double>> grads;
  loss_and_gradients(weights, input, targets, grads, trace);

  auto loss_at = [&](const WeightState<double>& w) {
    return cross_entropy_loss(softmax_depth(forward(w, input, Mode::training)), targets);
  };

  struct Slot {
    std::size_t conv;
    int tensor;
    std::size_t index;
  };
  std::vector<Slot> slots;
  for (std::size_t c = 0; c < weights.convs.size(); ++c) {
    const auto& p = weights.convs[c];
    const std::size_t sizes[4] = {p.weight.size(), p.bias.size(), p.gamma.size(), p.beta.size()};
    for (int t = 0; t < 4; ++t)
      for (std::size_t i = 0; i < sizes[t]; ++i) slots.push_back({c, t, i});
  }
  Rng rng(seed);
  rng.shuffle(slots);
  if (samples < slots.size()) slots.resize(samples);

  auto param = [](WeightState<double>& w, const Slot& s) -> double& {
    auto& p = w.convs[s.conv];
    std::vector<double>* t[4] = {&p.weight, &p.bias, &p.gamma, &p.beta};
    return (*t[s.tensor])[s.index];
  };
  auto grad = [&](const Slot& s) {
    const auto& g = grads[s.conv];
    const std::vector<double>* t[4] = {&g.weight, &g.bias, &g.gamma, &g.beta};
    return (*t[s.tensor])[s.index];
  };

  GradientCheckResult r;
  WeightState<double> probe = weights;
  for (const auto& s : slots) {
    const double original = param(probe, s);
    param(probe, s) = original + epsilon;
    const double up = loss_at(probe);
    param(probe, s) = original - epsilon;
    const double down = loss_at(probe);
    param(probe, s) = original;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double analytic = grad(s);
    if (std::abs(numeric) < magnitude_floor && std::abs(analytic) < magnitude_floor) {
      ++r.skipped;
      continue;
    }
    r.max_relative_error = std::max(r.max_relative_error, relative_error(analytic, numeric));
    ++r.checked;
  }
  return r;
}

}  // namespace tracknet
