#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include <unistd.h>

#include "tracknet/checkpoint.hpp"
#include "tracknet/training.hpp"

using namespace tracknet;

namespace {

NetworkConfig tiny_config(int frames = 1) {
  NetworkConfig cfg;
  cfg.input_frames = frames;
  cfg.width = 16;
  cfg.height = 16;
  cfg.width_multiplier = 1.0 / 64;
  return cfg;
}

// conv(3 -> 4) -> conv(4 -> classes) -> softmax, both with ReLU + BN.
WeightState<double> two_conv_net(int classes, Rng& rng) {
  NetworkConfig cfg = tiny_config();
  cfg.class_count = classes;
  std::vector<LayerSpec> layers(3);
  layers[0] = {LayerKind::conv, "ConvA", 3, 3, 4, 1, 1, Activation::relu_bn};
  layers[1] = {LayerKind::conv, "ConvB", 3, 3, classes, 1, 1, Activation::relu_bn};
  layers[2] = {LayerKind::softmax, "Softmax", 1, 1, 0, 0, 1, Activation::none};
  auto w = WeightState<double>::from_layers(cfg, layers);
  for (auto& c : w.convs) {
    for (auto& v : c.weight) v = rng.uniform(-0.5, 0.5);
    for (auto& v : c.bias) v = rng.uniform(-0.1, 0.1);
    for (auto& v : c.gamma) v = rng.uniform(0.5, 1.5);
    for (auto& v : c.beta) v = rng.uniform(-0.2, 0.2);
  }
  return w;
}

std::vector<ClassMap> random_targets(int n, int w, int h, int classes, Rng& rng) {
  std::vector<ClassMap> t;
  for (int i = 0; i < n; ++i) {
    ClassMap m{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h)};
    for (auto& c : m.classes) c = static_cast<std::uint8_t>(rng.below(classes));
    t.push_back(std::move(m));
  }
  return t;
}

Tensor<double> random_input(int n, int c, int h, int w, Rng& rng) {
  Tensor<double> t(n, c, h, w);
  for (auto& v : t.values()) v = rng.uniform();
  return t;
}

}  // namespace

TEST(GroundTruth, ClassesEqualHeatmapValues) {
  const auto zero = ground_truth_classes(zero_heatmap(8, 8));
  for (auto c : zero.classes) EXPECT_EQ(c, 0);
  const auto g = ground_truth_classes(gaussian_heatmap(16, 16, 8, 8, 10.0));
  EXPECT_EQ(g.classes[8 * 16 + 8], 255);
  EXPECT_EQ(g.classes[8 * 16 + 11], 162);
}

TEST(GroundTruth, AbsentBallGivesZeroTarget) {
  FrameLabel l{"f", 0, 5, 5, std::nullopt};
  EXPECT_EQ(target_heatmap(l, 8, 8), zero_heatmap(8, 8));
  l.visibility = 3;
  EXPECT_EQ(target_heatmap(l, 16, 16).at(5, 5), 255);
}

TEST(Loss, OneHotIsZero) {
  Tensor<float> p(1, 4, 2, 2, 0.0f);
  const ClassMap t{2, 2, {0, 1, 2, 3}};
  for (int i = 0; i < 4; ++i) p.channel(0, i)[i] = 1.0f;
  EXPECT_EQ(cross_entropy_loss(p, {t}), 0.0);
}

TEST(Loss, HalfProbabilityIsLn2) {
  Tensor<double> p(1, 2, 1, 1, 0.5);
  EXPECT_NEAR(cross_entropy_loss(p, {ClassMap{1, 1, {1}}}), std::numbers::ln2, 1e-15);
}

TEST(Loss, ClampsZeroProbability) {
  Tensor<double> p(1, 2, 1, 1, 0.0);
  p.values()[0] = 1.0;
  EXPECT_NEAR(cross_entropy_loss(p, {ClassMap{1, 1, {1}}}), -std::log(1e-12), 1e-9);
}

TEST(Loss, UniformPredictionOverFullFrame) {
  const auto p = softmax_depth(Tensor<float>(1, 256, 360, 640, 0.0f));
  const double expected = 230400.0 * 8.0 * std::numbers::ln2;
  const double loss = cross_entropy_loss(p, {ground_truth_classes(gaussian_heatmap(640, 360, 100, 100, 10))});
  EXPECT_NEAR(loss / expected, 1.0, 1e-6);
}

TEST(Loss, ShapeMismatch) {
  Tensor<float> p(1, 4, 2, 2, 0.25f);
  EXPECT_THROW(cross_entropy_loss(p, {ClassMap{3, 2, std::vector<std::uint8_t>(6)}}), DimensionError);
  EXPECT_THROW(cross_entropy_loss(p, {}), DimensionError);
}

TEST(Loss, MaterialisedOneHotAgrees) {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> logits(2, 256, 3, 5);
    for (auto& v : logits.values()) v = rng.uniform(-4, 4);
    const auto p = softmax_depth(logits);
    const auto t = random_targets(2, 5, 3, 256, rng);
    double dense = 0.0;  // -sum_k Q log P over all 256 planes
    for (int n = 0; n < 2; ++n)
      for (int k = 0; k < 256; ++k)
        for (std::size_t i = 0; i < p.plane(); ++i) {
          const double q = t[n].classes[i] == k ? 1.0 : 0.0;
          dense -= q * std::log(std::max(p.channel(n, k)[i], 1e-12));
        }
    EXPECT_NEAR(cross_entropy_loss(p, t), dense, 1e-9);
  }
}

TEST(Loss, NonNegative) {
  Rng rng(29);
  Tensor<double> logits(1, 8, 4, 4);
  for (auto& v : logits.values()) v = rng.uniform(-10, 10);
  EXPECT_GE(cross_entropy_loss(softmax_depth(logits), random_targets(1, 4, 4, 8, rng)), 0.0);
}

TEST(Init, RangeMeanAndDeterminism) {
  const auto cfg = tiny_config(3);
  const auto a = init_weights<float>(cfg, -0.05, 0.05, 42);
  const auto b = init_weights<float>(cfg, -0.05, 0.05, 42);
  double sum = 0, n = 0;
  for (std::size_t i = 0; i < a.convs.size(); ++i) {
    EXPECT_EQ(a.convs[i].weight, b.convs[i].weight);
    for (float v : a.convs[i].weight) {
      EXPECT_GE(v, -0.05f);
      EXPECT_LE(v, 0.05f);
      sum += v;
      ++n;
    }
    for (float v : a.convs[i].bias) EXPECT_EQ(v, 0.0f);
    for (float v : a.convs[i].gamma) EXPECT_EQ(v, 1.0f);
  }
  const double sigma = 0.1 / std::sqrt(12.0);
  EXPECT_LT(std::abs(sum / n), 3 * sigma / std::sqrt(n));
  EXPECT_NE(init_weights<float>(cfg, -0.05, 0.05, 43).convs[0].weight, a.convs[0].weight);
  EXPECT_THROW(init_weights<float>(cfg, 0.0, 0.0, 1), ArgumentError);
  EXPECT_THROW(init_weights<float>(cfg, 0.1, -0.1, 1), ArgumentError);
}

TEST(Adadelta, ZeroGradientLeavesWeights) {
  auto w = init_weights<double>(tiny_config(), -0.05, 0.05, 1);
  const auto before = w.convs;
  auto s = AdadeltaState<double>::for_weights(w, 1.0, 0.95, 1e-6);
  adadelta_step(w, s, zero_grads(w));
  for (std::size_t i = 0; i < w.convs.size(); ++i) EXPECT_EQ(w.convs[i].weight, before[i].weight);
  EXPECT_EQ(w.version, 1u);
}

TEST(Adadelta, ScalarQuadraticMatchesSimulation) {
  // Oracle: textbook Adadelta on f(w) = w^2 written out independently.
  double w_ref = 1.0, eg = 0.0, ex = 0.0;
  std::vector<double> w{1.0}, g{0.0}, a{0.0}, u{0.0};
  double prev = 1.0;
  for (int t = 0; t < 200; ++t) {
    const double grad = 2.0 * w_ref;
    eg = 0.95 * eg + 0.05 * grad * grad;
    const double dx = -std::sqrt(ex + 1e-6) / std::sqrt(eg + 1e-6) * grad;
    ex = 0.95 * ex + 0.05 * dx * dx;
    w_ref += dx;

    g[0] = 2.0 * w[0];
    detail::adadelta_tensor(w, g, a, u, 1.0, 0.95, 1e-6);
    EXPECT_NEAR(w[0], w_ref, 1e-12);
    EXPECT_LT(std::abs(w[0]), prev);
    prev = std::abs(w[0]);
  }
  EXPECT_LT(prev, 1.0);
}

TEST(Adadelta, NonFiniteGradientNamesLayer) {
  auto w = init_weights<float>(tiny_config(), -0.05, 0.05, 1);
  auto s = AdadeltaState<float>::for_weights(w, 1.0, 0.95, 1e-6);
  auto g = zero_grads(w);
  g[2].weight[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    adadelta_step(w, s, g);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("Conv3"), std::string::npos);
  }
  g.pop_back();
  EXPECT_THROW(adadelta_step(w, s, g), DimensionError);
}

TEST(GradientCheck, TwoConvNet) {
  Rng rng(31);
  const auto w = two_conv_net(6, rng);
  const auto x = random_input(2, 3, 16, 16, rng);
  const auto r = gradient_check(w, x, random_targets(2, 16, 16, 6, rng), 1e-4, 120, 7);
  EXPECT_GE(r.checked, 100u);
  EXPECT_LE(r.max_relative_error, 1e-3);
}

TEST(GradientCheck, ScaledTrackNet) {
  Rng rng(37);
  auto w = init_weights<double>(tiny_config(1), -0.3, 0.3, 5);
  for (auto& c : w.convs)
    for (auto& v : c.beta) v = rng.uniform(-0.2, 0.2);
  const auto x = random_input(2, 3, 16, 16, rng);
  std::vector<ClassMap> t{ground_truth_classes(gaussian_heatmap(16, 16, 6, 9, 10)),
                          ground_truth_classes(gaussian_heatmap(16, 16, 11, 4, 10))};
  const auto r = gradient_check(w, x, t, 1e-6, 150, 3);
  EXPECT_GE(r.checked, 100u);
  EXPECT_LE(r.max_relative_error, 1e-3);
}

TEST(GradientCheck, SymmetricZeroCaseIsFinite) {
  const auto w = WeightState<double>::shaped(tiny_config(1));
  const Tensor<double> x(1, 3, 16, 16);
  ForwardTrace<double> trace;
  std::vector<ConvGrads<double>> g;
  const double loss = loss_and_gradients(w, x, {ground_truth_classes(zero_heatmap(16, 16))}, g, trace);
  EXPECT_TRUE(std::isfinite(loss));
  for (const auto& c : g)
    for (const auto* v : {&c.weight, &c.bias, &c.gamma, &c.beta})
      for (double d : *v) EXPECT_TRUE(std::isfinite(d));
  EXPECT_EQ(relative_error(0.37, 0.37), 0.0);
  EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
}

namespace {

struct TinyData {
  FrameStore frames;
  std::vector<FrameWindow> windows;
};

TinyData tiny_data(int k) {
  TinyData d;
  d.frames.emplace_back();
  for (int f = 0; f < 6; ++f) {
    cv::Mat img(16, 16, CV_8UC3, cv::Scalar(30, 90, 30));
    cv::circle(img, cv::Point(3 + 2 * f, 8), 2, cv::Scalar(230, 240, 60), cv::FILLED);
    d.frames[0].push_back(img);
  }
  for (int last = k - 1; last < 6; ++last) {
    FrameWindow w;
    for (int f = last - k + 1; f <= last; ++f) w.frames.push_back(static_cast<std::size_t>(f));
    w.target = {std::to_string(last), 1, 3.0 + 2 * last, 8.0, 0};
    d.windows.push_back(w);
  }
  return d;
}

}  // namespace

TEST(Train, ZeroEpochsReturnsInitialWeights) {
  const auto data = tiny_data(1);
  TrainConfig tc;
  tc.epochs = 0;
  tc.seed = 4;
  const auto r = train(data.frames, {}, tiny_config(1), tc);
  EXPECT_TRUE(r.loss_curve.empty());
  EXPECT_EQ(r.weights.convs[0].weight, init_weights<float>(tiny_config(1), -0.05, 0.05, 4).convs[0].weight);
}

TEST(Train, EmptyWindowsRejected) {
  const auto data = tiny_data(1);
  TrainConfig tc;
  tc.epochs = 1;
  EXPECT_THROW(train(data.frames, {}, tiny_config(1), tc), ArgumentError);
}

TEST(Train, ConsumesStepsTimesBatchAndIsDeterministic) {
  const auto data = tiny_data(3);
  TrainConfig tc;
  tc.epochs = 3;
  tc.steps_per_epoch = 4;
  tc.batch_size = 2;
  tc.checkpoint_every = 2;
  std::vector<int> saved;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](int epoch, const WeightState<float>&) { saved.push_back(epoch); };
  const auto a = train(data.frames, data.windows, tiny_config(3), tc, hooks);
  EXPECT_EQ(a.windows_consumed, 3u * 4u * 2u);
  EXPECT_EQ(a.loss_curve.size(), 3u);
  EXPECT_EQ(a.weights.version, 12u);
  EXPECT_EQ(saved, (std::vector<int>{2, 3}));
  const auto b = train(data.frames, data.windows, tiny_config(3), tc);
  EXPECT_EQ(a.weights.convs.back().weight, b.weights.convs.back().weight);
  EXPECT_EQ(a.loss_curve.back().mean_loss, b.loss_curve.back().mean_loss);
}

TEST(Train, LossDecreasesOnTinyProblem) {
  const auto data = tiny_data(1);
  TrainConfig tc;
  tc.epochs = 10;
  tc.steps_per_epoch = 10;
  const auto r = train(data.frames, data.windows, tiny_config(1), tc);
  EXPECT_LT(r.loss_curve.back().mean_loss, r.loss_curve.front().mean_loss);
}

TEST(Train, NonFiniteLossAborts) {
  const auto data = tiny_data(1);
  TrainConfig tc;
  tc.epochs = 1;
  tc.steps_per_epoch = 1;
  tc.init_lo = -1e38;
  tc.init_hi = 1e38;
  EXPECT_THROW(train(data.frames, data.windows, tiny_config(1), tc), TrainingError);
}

TEST(Checkpoint, RoundTripAndValidation) {
  const auto dir = fs::temp_directory_path() / ("tracknet_ckpt_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  auto w = init_weights<float>(tiny_config(3), -0.05, 0.05, 9);
  w.convs[4].running_mean[0] = 0.75f;
  w.version = 17;
  save_checkpoint(dir / "a.ckpt", w, "epochs=3\n");
  EXPECT_FALSE(fs::exists(dir / "a.ckpt.tmp"));
  const auto ck = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(ck.weights.config, w.config);
  EXPECT_EQ(ck.weights.version, 17u);
  EXPECT_EQ(ck.config_echo, "epochs=3\n");
  EXPECT_TRUE(ck.bn_running_stats_at_inference);
  for (std::size_t i = 0; i < w.convs.size(); ++i) {
    EXPECT_EQ(ck.weights.convs[i].weight, w.convs[i].weight);
    EXPECT_EQ(ck.weights.convs[i].running_mean, w.convs[i].running_mean);
  }

  auto bytes = encode_checkpoint(w, "");
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  EXPECT_THROW(decode_checkpoint(std::vector<char>(bytes.begin(), bytes.end() - 5)), FormatError);
  bytes.push_back(0);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
  // Shape header disagreeing with the config.
  auto other = init_weights<float>(tiny_config(1), -0.05, 0.05, 9);
  auto mixed = encode_checkpoint(other, "");
  mixed[12] = 3;  // claim k = 3 while blobs are for k = 1
  EXPECT_THROW(decode_checkpoint(mixed), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  fs::remove_all(dir);
}
