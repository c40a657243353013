#pragma once

// Declarative encoder-decoder description plus forward/backward passes.
//
// The layer list mirrors a VGG-16 style encoder (10 convolutions, 3 max
// pools) followed by a mirrored decoder (3 nearest-neighbour upsamplings,
// 8 convolutions) ending in a 256-deep convolution whose depth is read as
// per-pixel logits over grayscale values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "tracknet/errors.hpp"
#include "tracknet/heatmap.hpp"
#include "tracknet/layers.hpp"
#include "tracknet/tensor.hpp"

namespace tracknet {

enum class LayerKind { conv, maxpool, upsample, softmax };
enum class Activation { relu_bn, none };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::string name;
  int kernel_w = 3;
  int kernel_h = 3;
  int depth = 0;
  int padding = 0;
  int stride = 1;
  Activation activation = Activation::none;

  bool operator==(const LayerSpec&) const = default;
};

struct NetworkConfig {
  int input_frames = 3;
  int width = 640;
  int height = 360;
  double width_multiplier = 1.0;
  int class_count = 256;

  int input_channels() const noexcept { return 3 * input_frames; }
  bool operator==(const NetworkConfig&) const = default;
};

enum class Mode { training, inference };

inline constexpr double kBatchNormEps = 1e-3;
inline constexpr double kBatchNormMomentum = 0.1;

/// W' = (W + 2p - w) / s + 1, and likewise for H. Throws when the stride
/// does not divide the padded extent.
inline std::pair<int, int> conv_output_dims(int width, int height, int padding, int kernel_w,
                                            int kernel_h, int stride) {
  if (width <= 0 || height <= 0 || kernel_w <= 0 || kernel_h <= 0 || stride <= 0 || padding < 0)
    throw DimensionError("convolution geometry must be positive");
  const int span_w = width + 2 * padding - kernel_w;
  const int span_h = height + 2 * padding - kernel_h;
  if (span_w < 0 || span_h < 0) throw DimensionError("kernel larger than padded input");
  if (span_w % stride != 0 || span_h % stride != 0)
    throw DimensionError("stride " + std::to_string(stride) + " does not divide " +
                         std::to_string(width) + "x" + std::to_string(height));
  return {span_w / stride + 1, span_h / stride + 1};
}

namespace detail {

inline int scaled_depth(int base, double multiplier) {
  const auto d = static_cast<int>(std::lround(base * multiplier));
  if (d < 1)
    throw ConfigError("width multiplier " + std::to_string(multiplier) + " leaves depth " +
                      std::to_string(base) + " below one channel");
  return d;
}

}  // namespace detail

/// Emits the full ordered layer list for `cfg`.
inline std::vector<LayerSpec> build_tracknet(const NetworkConfig& cfg) {
  if (cfg.input_frames < 1) throw ConfigError("input_frames must be >= 1");
  if (!(cfg.width_multiplier > 0.0 && cfg.width_multiplier <= 1.0))
    throw ConfigError("width_multiplier must lie in (0, 1]");
  if (cfg.class_count < 2 || cfg.class_count > 256)
    throw ConfigError("class_count must lie in [2, 256]");

  // 0 = pool, -1 = upsample, otherwise a base conv depth.
  static constexpr int kPlan[] = {64,  64,  0,   128, 128, 0,  256, 256, 256, 0,   512, 512,
                                  512, -1,  512, 512, 512, -1, 128, 128, -1,  64,  64};
  std::vector<LayerSpec> layers;
  int conv_i = 0, pool_i = 0, up_i = 0;
  for (int entry : kPlan) {
    LayerSpec s;
    if (entry == 0) {
      s.kind = LayerKind::maxpool;
      s.name = "Pool" + std::to_string(++pool_i);
      s.kernel_w = s.kernel_h = 2;
      s.stride = 2;
    } else if (entry < 0) {
      s.kind = LayerKind::upsample;
      s.name = "UpS" + std::to_string(++up_i);
      s.kernel_w = s.kernel_h = 2;
      s.stride = 2;
    } else {
      s.kind = LayerKind::conv;
      s.name = "Conv" + std::to_string(++conv_i);
      s.depth = detail::scaled_depth(entry, cfg.width_multiplier);
      s.padding = 1;
      s.activation = Activation::relu_bn;
    }
    layers.push_back(s);
  }
  LayerSpec last;
  last.kind = LayerKind::conv;
  last.name = "Conv" + std::to_string(++conv_i);
  last.depth = cfg.class_count;
  last.padding = 1;
  last.activation = Activation::relu_bn;
  layers.push_back(last);

  LayerSpec soft;
  soft.kind = LayerKind::softmax;
  soft.name = "Softmax";
  soft.kernel_w = soft.kernel_h = 1;
  layers.push_back(soft);
  return layers;
}

/// Parameters of one convolution and its batch normalisation.
template <typename T>
struct ConvParams {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_h = 3;
  int kernel_w = 3;
  std::vector<T> weight;  // [out][in][kh][kw]
  std::vector<T> bias;
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;

  std::size_t patch() const noexcept {
    return static_cast<std::size_t>(in_channels) * kernel_h * kernel_w;
  }
};

/// Gradients (or optimizer accumulators) shaped like the trainable part of
/// a ConvParams.
template <typename T>
struct ConvGrads {
  std::vector<T> weight;
  std::vector<T> bias;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
struct WeightState {
  NetworkConfig config;
  std::vector<LayerSpec> layers;
  std::vector<ConvParams<T>> convs;
  std::uint64_t version = 0;  // optimizer steps applied

  /// Zero filters, unit BN scale and variance.
  static WeightState shaped(const NetworkConfig& cfg) { return from_layers(cfg, build_tracknet(cfg)); }

  /// Same as `shaped` for an arbitrary layer list (small nets in tests).
  static WeightState from_layers(const NetworkConfig& cfg, std::vector<LayerSpec> layers) {
    WeightState s;
    s.config = cfg;
    s.layers = std::move(layers);
    int channels = cfg.input_channels();
    for (const auto& l : s.layers) {
      if (l.kind != LayerKind::conv) continue;
      ConvParams<T> p;
      p.in_channels = channels;
      p.out_channels = l.depth;
      p.kernel_h = l.kernel_h;
      p.kernel_w = l.kernel_w;
      p.weight.assign(p.patch() * l.depth, T(0));
      p.bias.assign(l.depth, T(0));
      p.gamma.assign(l.depth, T(1));
      p.beta.assign(l.depth, T(0));
      p.running_mean.assign(l.depth, T(0));
      p.running_var.assign(l.depth, T(1));
      s.convs.push_back(std::move(p));
      channels = l.depth;
    }
    return s;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& c : convs) n += c.weight.size() + c.bias.size() + c.gamma.size() + c.beta.size();
    return n;
  }

  template <typename U>
  WeightState<U> cast() const {
    WeightState<U> out;
    out.config = config;
    out.layers = layers;
    out.version = version;
    auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    for (const auto& c : convs) {
      ConvParams<U> p;
      p.in_channels = c.in_channels;
      p.out_channels = c.out_channels;
      p.kernel_h = c.kernel_h;
      p.kernel_w = c.kernel_w;
      p.weight = conv(c.weight);
      p.bias = conv(c.bias);
      p.gamma = conv(c.gamma);
      p.beta = conv(c.beta);
      p.running_mean = conv(c.running_mean);
      p.running_var = conv(c.running_var);
      out.convs.push_back(std::move(p));
    }
    return out;
  }
};

template <typename T>
std::vector<ConvGrads<T>> zero_grads(const WeightState<T>& w) {
  std::vector<ConvGrads<T>> g;
  g.reserve(w.convs.size());
  for (const auto& c : w.convs)
    g.push_back({std::vector<T>(c.weight.size(), T(0)), std::vector<T>(c.bias.size(), T(0)),
                 std::vector<T>(c.gamma.size(), T(0)), std::vector<T>(c.beta.size(), T(0))});
  return g;
}

/// Everything the backward pass needs from a training-mode forward pass.
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> inputs;     // input of each executed layer
  std::vector<Tensor<T>> rectified;  // conv layers: ReLU output (pre-BN)
  std::vector<kernels::BatchMoments> moments;
  std::vector<std::vector<std::int32_t>> pool_argmax;
};

namespace detail {

inline kernels::ConvGeometry conv_geometry(const LayerSpec& l, int in_c, int h, int w) {
  kernels::ConvGeometry g;
  g.in_c = in_c;
  g.in_h = h;
  g.in_w = w;
  g.kh = l.kernel_h;
  g.kw = l.kernel_w;
  g.pad = l.padding;
  g.stride = l.stride;
  std::tie(g.out_w, g.out_h) = conv_output_dims(w, h, l.padding, l.kernel_w, l.kernel_h, l.stride);
  return g;
}

}  // namespace detail

/// Runs every layer up to (not including) the softmax and returns the
/// logits, N x class_count x H x W. Inference mode normalises with the
/// running statistics; training mode with batch statistics, and records a
/// trace when one is supplied.
template <typename T>
Tensor<T> forward(const WeightState<T>& weights, const Tensor<T>& input, Mode mode,
                  ForwardTrace<T>* trace = nullptr) {
  if (input.channels() != weights.config.input_channels())
    throw DimensionError("expected " + std::to_string(weights.config.input_channels()) +
                         " input channels, got " + std::to_string(input.channels()));
  if (input.batch() < 1) throw DimensionError("empty batch");
  if (input.width() % 8 != 0 || input.height() % 8 != 0)
    throw DimensionError("input " + std::to_string(input.width()) + "x" +
                         std::to_string(input.height()) + " is not divisible by 8");
  if (trace) *trace = ForwardTrace<T>{};

  Tensor<T> x = input;
  Tensor<T> next;
  std::vector<T> col;
  std::size_t conv_i = 0;
  for (const auto& l : weights.layers) {
    if (l.kind == LayerKind::softmax) break;
    if (trace) trace->inputs.push_back(x);
    switch (l.kind) {
      case LayerKind::conv: {
        const auto& p = weights.convs[conv_i++];
        const auto g = detail::conv_geometry(l, x.channels(), x.height(), x.width());
        Tensor<T> z;
        kernels::conv_forward(x, p.weight, p.bias, p.out_channels, g, z, col);
        if (mode == Mode::training) {
          auto m = kernels::relu_and_moments(z, kBatchNormEps);
          kernels::batch_norm_apply(z, m.mean, m.inv_std, p.gamma, p.beta, next);
          if (trace) {
            trace->rectified.push_back(std::move(z));
            trace->moments.push_back(std::move(m));
          }
        } else {
          for (auto& v : z.values()) v = v > T(0) ? v : T(0);
          std::vector<double> mean(p.running_mean.begin(), p.running_mean.end());
          std::vector<double> inv_std(p.running_var.size());
          for (std::size_t c = 0; c < inv_std.size(); ++c)
            inv_std[c] = 1.0 / std::sqrt(static_cast<double>(p.running_var[c]) + kBatchNormEps);
          kernels::batch_norm_apply(z, mean, inv_std, p.gamma, p.beta, next);
        }
        break;
      }
      case LayerKind::maxpool: {
        const auto [ow, oh] =
            conv_output_dims(x.width(), x.height(), 0, l.kernel_w, l.kernel_h, l.stride);
        std::vector<std::int32_t> argmax;
        kernels::maxpool_forward(x, l.kernel_w, l.stride, oh, ow, next, argmax);
        if (trace) trace->pool_argmax.push_back(std::move(argmax));
        break;
      }
      case LayerKind::upsample:
        kernels::upsample_forward(x, l.stride, next);
        break;
      case LayerKind::softmax:
        break;
    }
    x = std::move(next);
  }
  return x;
}

/// Back-propagates dL/dlogits through a recorded training-mode pass,
/// accumulating into `grads`.
template <typename T>
void backward(const WeightState<T>& weights, const ForwardTrace<T>& trace,
              const Tensor<T>& dlogits, std::vector<ConvGrads<T>>& grads) {
  if (grads.size() != weights.convs.size()) throw DimensionError("gradient set shape mismatch");
  Tensor<T> dy = dlogits;
  Tensor<T> dx;
  std::vector<T> col;
  std::size_t layer_i = trace.inputs.size();
  std::size_t conv_i = weights.convs.size();
  std::size_t pool_i = trace.pool_argmax.size();
  std::size_t rect_i = trace.rectified.size();
  for (auto it = weights.layers.rbegin(); it != weights.layers.rend(); ++it) {
    const auto& l = *it;
    if (l.kind == LayerKind::softmax) continue;
    const Tensor<T>& in = trace.inputs[--layer_i];
    switch (l.kind) {
      case LayerKind::conv: {
        --conv_i;
        --rect_i;
        const auto& p = weights.convs[conv_i];
        auto& g = grads[conv_i];
        Tensor<T> dz;
        kernels::relu_bn_backward(trace.rectified[rect_i], trace.moments[rect_i], p.gamma, dy,
                                  g.gamma, g.beta, dz);
        const auto geo = detail::conv_geometry(l, in.channels(), in.height(), in.width());
        kernels::conv_backward(in, p.weight, dz, geo, g.weight, g.bias,
                               layer_i == 0 ? nullptr : &dx, col);
        break;
      }
      case LayerKind::maxpool:
        kernels::maxpool_backward(dy, trace.pool_argmax[--pool_i], in.height(), in.width(), dx);
        break;
      case LayerKind::upsample:
        kernels::upsample_backward(dy, l.stride, dx);
        break;
      case LayerKind::softmax:
        break;
    }
    if (layer_i == 0) break;
    dy = std::move(dx);
  }
}

/// Folds the batch moments of a training pass into the running statistics.
template <typename T>
void update_running_stats(WeightState<T>& weights, const ForwardTrace<T>& trace,
                          double momentum = kBatchNormMomentum) {
  for (std::size_t i = 0; i < weights.convs.size() && i < trace.moments.size(); ++i) {
    auto& p = weights.convs[i];
    const auto& m = trace.moments[i];
    for (std::size_t c = 0; c < p.running_mean.size(); ++c) {
      p.running_mean[c] = static_cast<T>((1.0 - momentum) * p.running_mean[c] + momentum * m.mean[c]);
      p.running_var[c] = static_cast<T>((1.0 - momentum) * p.running_var[c] + momentum * m.var[c]);
    }
  }
}

/// P = exp(L) / sum_l exp(L) along the depth axis, max-subtracted.
template <typename T>
Tensor<T> softmax_depth(const Tensor<T>& logits) {
  using Plane = Eigen::Array<T, Eigen::Dynamic, 1>;
  using PlaneMap = Eigen::Map<Plane>;
  using ConstPlaneMap = Eigen::Map<const Plane>;
  Tensor<T> p(logits.batch(), logits.channels(), logits.height(), logits.width());
  const auto plane = static_cast<Eigen::Index>(logits.plane());
  Plane mx(plane), sum(plane);
  for (int n = 0; n < logits.batch(); ++n) {
    mx = ConstPlaneMap(logits.channel(n, 0), plane);
    for (int k = 1; k < logits.channels(); ++k)
      mx = mx.max(ConstPlaneMap(logits.channel(n, k), plane));
    sum.setZero();
    for (int k = 0; k < logits.channels(); ++k) {
      PlaneMap e(p.channel(n, k), plane);
      e = (ConstPlaneMap(logits.channel(n, k), plane) - mx).exp();
      sum += e;
    }
    sum = sum.inverse();
    for (int k = 0; k < logits.channels(); ++k) PlaneMap(p.channel(n, k), plane) *= sum;
  }
  return p;
}

/// h(i,j) = argmax_k P(i,j,k) for one sample; ties go to the smallest k.
template <typename T>
Heatmap argmax_depth(const Tensor<T>& p, int sample = 0) {
  if (p.channels() > 256) throw DimensionError("more than 256 classes cannot form a heatmap");
  Heatmap hm(p.width(), p.height());
  const std::size_t plane = p.plane();
  std::vector<T> best(p.channel(sample, 0), p.channel(sample, 0) + plane);
  for (int k = 1; k < p.channels(); ++k) {
    const T* v = p.channel(sample, k);
    for (std::size_t i = 0; i < plane; ++i) {
      if (v[i] > best[i]) {
        best[i] = v[i];
        hm.values[i] = static_cast<std::uint8_t>(k);
      }
    }
  }
  return hm;
}

}  // namespace tracknet
