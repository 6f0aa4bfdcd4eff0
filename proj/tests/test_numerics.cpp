// SPDX-License-Identifier: Apache-2.0
// Gradient checks and reference computations for layers, losses and Adam.

#include <gtest/gtest.h>

#include <cctype>
#include <cmath>
#include <memory>

#include "platemark/layers.hpp"
#include "platemark/loss.hpp"
#include "platemark/model.hpp"
#include "platemark/optimizer.hpp"

#include "gradient_cases.hpp"

using namespace platemark;
using namespace pmtest;

class Gradients : public ::testing::TestWithParam<GradientCase> {};

TEST_P(Gradients, MatchFiniteDifferences) {
  for (int inst = 0; inst < kGradientInstances; ++inst)
    EXPECT_LT(GetParam().error(inst), kGradientTolerance) << GetParam().name << " instance " << inst;
}

INSTANTIATE_TEST_SUITE_P(EveryLayerAndLoss, Gradients, ::testing::ValuesIn(gradient_cases()),
                         [](const auto& info) {
                           std::string n = info.param.name;
                           for (char& c : n)
                             if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
                           return n;
                         });

TEST(Losses, WeightNormalizationInvariance) {
  Rng rng(9);
  Tensor pred = random_tensor({8}, rng), target = random_tensor({8}, rng), w = random_tensor({8}, rng, 0.1, 2);
  Tensor w2 = w;
  for (auto& v : w2.values()) v *= 2.0;
  EXPECT_NEAR(loss_weighted_mse(pred.values(), target.values(), w.values()).value,
              loss_weighted_mse(pred.values(), target.values(), w2.values()).value, 1e-14);
  Tensor prob = random_tensor({8}, rng, 0.1, 0.9);
  EXPECT_NEAR(loss_bce(prob.values(), target.values(), w.values()).value,
              loss_bce(prob.values(), target.values(), w2.values()).value, 1e-14);
  Tensor raw = random_tensor({8, 6}, rng);
  EXPECT_NEAR(loss_mdn_nll(raw, target.values(), w.values(), 1e-3).value,
              loss_mdn_nll(raw, target.values(), w2.values(), 1e-3).value, 1e-13);
}

TEST(Losses, MixtureNllMatchesNaiveSum) {
  Rng rng(21);
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t K = 1 + rng() % 6;
    Tensor raw = random_tensor({1, 3 * K}, rng, -2, 2);
    double x = random_tensor({1}, rng, -3, 3)[0];
    double zmax = -1e300, zsum = 0.0;
    for (std::size_t k = 0; k < K; ++k) zmax = std::max(zmax, raw[k]);
    for (std::size_t k = 0; k < K; ++k) zsum += std::exp(raw[k] - zmax);
    double lik = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      double w = std::exp(raw[k] - zmax) / zsum;
      double s = std::exp(raw[2 * K + k]);
      double z = (x - raw[K + k]) / s;
      lik += w * std::exp(-0.5 * z * z) / (s * std::sqrt(2.0 * M_PI));
    }
    double one[1] = {x}, w1[1] = {1.0};
    double got = loss_mdn_nll(raw, one, w1, 1e-3).value;
    EXPECT_NEAR(got, -std::log(lik), 1e-10 * std::abs(std::log(lik)) + 1e-15);
  }
}

TEST(Losses, ClampedProbabilityHasZeroGradient) {
  double p[2] = {0.0, 1.0}, t[2] = {1.0, 0.0}, w[2] = {1.0, 1.0};
  auto r = loss_bce(p, t, w);
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_EQ(r.grad[0], 0.0);
  EXPECT_EQ(r.grad[1], 0.0);
}

TEST(Losses, FlooredSigmaHasZeroGradient) {
  Tensor raw({1, 3}, std::vector<double>{0.0, 0.1, -20.0});
  double t[1] = {0.1005}, w[1] = {1.0};
  auto r = loss_mdn_nll(raw, t, w, 1e-3);
  EXPECT_EQ(r.grad[2], 0.0);
  EXPECT_TRUE(std::isfinite(r.value));
}

TEST(Adam, HandComputedSequence) {
  // f(theta) = theta^2 / 2, so the gradient equals theta.
  Param p("theta", Tensor({1}, 1.0));
  Adam adam({0.1, 0.9, 0.999, 1e-8});
  std::vector<Param*> ps{&p};
  p.grad[0] = p.value[0];
  adam.step(ps);
  // m = 0.1, v = 0.001; bias-corrected both give 1, step = 0.1 / (1 + 1e-8).
  EXPECT_NEAR(p.value[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  const double theta1 = p.value[0];
  p.grad[0] = theta1;
  adam.step(ps);
  const double m2 = 0.9 * 0.1 + 0.1 * theta1;
  const double v2 = 0.999 * 0.001 + 0.001 * theta1 * theta1;
  const double expected = theta1 - 0.1 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.998001)) + 1e-8);
  EXPECT_NEAR(p.value[0], expected, 1e-15);
  EXPECT_NEAR(p.value[0], 0.800412, 1e-6);
  EXPECT_EQ(adam.steps(), 2u);
}

TEST(Adam, RejectsNonFiniteGradient) {
  Param p("w", Tensor({2}, 1.0));
  p.grad[1] = std::nan("");
  Adam adam;
  EXPECT_THROW(adam.step({&p}), NumericError);
}

TEST(Adam, MinimizesQuadratic) {
  Param p("w", Tensor({3}, std::vector<double>{3.0, -2.0, 0.5}));
  Adam adam({0.05});
  for (int i = 0; i < 2000; ++i) {
    for (std::size_t k = 0; k < 3; ++k) p.grad[k] = 2.0 * (p.value[k] - double(k));
    adam.step({&p});
  }
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(p.value[k], double(k), 1e-3);
}

TEST(BatchNorm, RunningStatisticsUseUnbiasedVariance) {
  BatchNorm bn("bn", 1);
  Tensor x({4, 1}, std::vector<double>{1, 2, 3, 4});
  bn.forward(x, {Mode::Train, 0});
  auto buffers = bn.buffers();
  EXPECT_NEAR(buffers[0]->value[0], 0.1 * 2.5, 1e-15);
  EXPECT_NEAR(buffers[1]->value[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-15);
  Tensor y = bn.forward(x, {Mode::Train, 0});
  double mean = 0, var = 0;
  for (double v : y.values()) mean += v / 4;
  for (double v : y.values()) var += (v - mean) * (v - mean) / 4;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(var, 1.25 / (1.25 + 1e-5), 1e-12);
}

TEST(Dropout, EvalIsIdentityAndTrainIsInverted) {
  Dropout d(0.25, 3);
  Rng rng(1);
  Tensor x = random_tensor({200, 50}, rng, 1.0, 2.0);
  EXPECT_EQ(d.forward(x, {Mode::Eval, 0}), x);
  Tensor y = d.forward(x, {Mode::Train, 42});
  std::size_t kept = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i] != 0.0) {
      ++kept;
      EXPECT_NEAR(y[i], x[i] / 0.75, 1e-12);
    }
  }
  EXPECT_NEAR(double(kept) / double(x.size()), 0.75, 0.02);
  EXPECT_EQ(d.forward(x, {Mode::Train, 42}), y);
  EXPECT_NE(d.forward(x, {Mode::Train, 43}), y);
}

TEST(Conv1D, OutputLengths) {
  Initializer init(0);
  Conv1D s1("a", 2, 2, 3, 1, true, init), s2("b", 2, 2, 3, 2, true, init);
  for (std::size_t len = 1; len <= 12; ++len) {
    EXPECT_EQ(s1.out_length(len), len);
    EXPECT_EQ(s2.out_length(len), (len + 1) / 2);
  }
}

TEST(Conv1D, MatchesDirectConvolution) {
  Initializer init(4);
  Conv1D conv("c", 2, 3, 3, 2, true, init);
  conv.params()[1]->value = Tensor({3}, std::vector<double>{0.1, -0.2, 0.3});
  Rng rng(3);
  Tensor x = random_tensor({2, 7, 2}, rng);
  Tensor y = conv.forward(x, {});
  const Tensor& w = conv.params()[0]->value;  // [k, in, out]
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t o = 0; o < 3; ++o) {
        double s = conv.params()[1]->value[o];
        for (std::size_t k = 0; k < 3; ++k) {
          long pos = long(t * 2 + k) - 1;
          if (pos < 0 || pos >= 7) continue;
          for (std::size_t c = 0; c < 2; ++c) s += x[(b * 7 + std::size_t(pos)) * 2 + c] * w[(k * 2 + c) * 3 + o];
        }
        EXPECT_NEAR(y[(b * 4 + t) * 3 + o], s, 1e-12);
      }
}

TEST(LSTM, StepMatchesScalarReference) {
  Initializer init(8);
  LSTMCell cell("l", 2, 3, init);
  Rng rng(5);
  for (Param* p : cell.params()) p->value = random_tensor(p->value.shape(), rng);
  Tensor x = random_tensor({1, 2}, rng), h = random_tensor({1, 3}, rng), c = random_tensor({1, 3}, rng);
  auto r = lstm_step(cell, x, h, c);
  const Tensor &W = cell.kernel().value, &U = cell.recurrent().value, &B = cell.bias().value;
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t j = 0; j < 3; ++j) {
    double a[4];
    for (std::size_t g = 0; g < 4; ++g) {
      std::size_t col = g * 3 + j;
      a[g] = B[col];
      for (std::size_t k = 0; k < 2; ++k) a[g] += x[k] * W[k * 12 + col];
      for (std::size_t k = 0; k < 3; ++k) a[g] += h[k] * U[k * 12 + col];
    }
    double cn = sig(a[1]) * c[j] + sig(a[0]) * std::tanh(a[2]);
    EXPECT_NEAR(r.c[j], cn, 1e-12);
    EXPECT_NEAR(r.h[j], sig(a[3]) * std::tanh(cn), 1e-12);
  }
  EXPECT_THROW(lstm_step(cell, Tensor({1, 3}), h, c), ShapeError);
}

TEST(Model, FeatureDimensionsMatchConfiguration) {
  for (Extractor e : {Extractor::ResCNN, Extractor::RNN, Extractor::LSTM}) {
    ModelConfig cfg;
    cfg.extractor = e;
    cfg.layers = 3;
    cfg.width = 8;
    cfg.embedding_dim = 4;
    cfg.price_head = {4};
    cfg.aux_head = {4};
    if (e == Extractor::ResCNN) cfg.downsample_layers = {1, 3};
    Model m(cfg, false);
    Rng rng(1);
    Tensor tokens = random_tokens(2, kPlateLength, kVocabSize, rng);
    EXPECT_EQ(m.features(tokens).shape(), (Shape{2, cfg.feature_dim()}));
  }
  ModelConfig cnn;
  cnn.downsample_layers = {2, 4};
  EXPECT_EQ(cnn.feature_dim(), 512u);
}

TEST(Model, RejectsOutOfRangeConfigurations) {
  ModelConfig c;
  c.width = 32;
  EXPECT_THROW(Model(c, true), ConfigError);
  c.width = 128;
  c.embedding_dim = 30;
  EXPECT_THROW(Model(c, true), ConfigError);
  ModelConfig r;
  r.extractor = Extractor::RNN;
  r.width = 129;
  EXPECT_THROW(r.validate(false), ConfigError);
}

TEST(Tensor, ShapeErrors) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 3});
  EXPECT_THROW(t.reshaped({4}), ShapeError);
  Initializer init(0);
  Dense d("d", 3, 2, true, init);
  EXPECT_THROW(d.forward(Tensor({2, 4}), {}), ShapeError);
  EXPECT_THROW(d.backward(Tensor({2, 2})), Error);
}
