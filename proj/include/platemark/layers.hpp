// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "platemark/random.hpp"
#include "platemark/tensor.hpp"

namespace platemark {

enum class Mode { Train, Eval };

struct ForwardContext {
  Mode mode = Mode::Eval;
  std::uint64_t seed = 0;  // drives dropout masks
};

/// Common contract for every differentiable layer.
///
/// Shapes passed to `output_shape` are per-sample (no batch dimension); the
/// tensors passed to `forward` carry the batch as their leading dimension.
/// `backward` consumes the cache of the most recent `forward`, accumulates
/// parameter gradients into `Param::grad` and returns the input gradient.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string kind() const = 0;
  virtual Shape output_shape(const Shape& sample) const = 0;
  virtual Tensor forward(const Tensor& x, const ForwardContext& ctx) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::vector<Param*> params() { return {}; }
  virtual std::vector<Buffer*> buffers() { return {}; }

 protected:
  /// Validates a batched input and returns the batched output shape.
  Shape batched_output(const Tensor& x) const {
    if (x.rank() < 1) throw ShapeError(kind() + ": input has no batch dimension");
    Shape sample(x.shape().begin() + 1, x.shape().end());
    Shape out = output_shape(sample);
    out.insert(out.begin(), x.dim(0));
    return out;
  }
  void require_cache(bool cached) const {
    if (!cached) throw Error(kind() + ": backward called before forward");
  }
  void require_grad_shape(const Tensor& g, const Shape& expected) const {
    if (g.shape() != expected)
      throw ShapeError(kind() + ": gradient shape " + shape_str(g.shape()) + " != " +
                       shape_str(expected));
  }
};

using LayerPtr = std::unique_ptr<Layer>;

/// Seeded parameter initializer. Values are rounded through float so a
/// freshly built model is exactly representable in the persisted format.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor uniform(Shape shape, double limit) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
      double u = (2.0 * uniform01(rng_) - 1.0) * limit;
      t[i] = double(float(u));
    }
    return t;
  }
  Tensor he_uniform(Shape shape, std::size_t fan_in) {
    return uniform(std::move(shape), std::sqrt(6.0 / double(fan_in)));
  }

 private:
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Token front ends

class Embedding final : public Layer {
 public:
  Embedding(const std::string& name, std::size_t vocab, std::size_t dim, Initializer& init)
      : vocab_(vocab), dim_(dim),
        table_(name + "/table", init.uniform({vocab, dim}, std::sqrt(3.0 / double(dim)))) {}

  std::string kind() const override { return "Embedding"; }
  Shape output_shape(const Shape& s) const override {
    if (s.size() != 1) throw ShapeError("Embedding expects [length] token input, got " + shape_str(s));
    return {s[0], dim_};
  }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    Tensor y(batched_output(x));
    tokens_.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto t = static_cast<long long>(x[i]);
      if (t < 0 || std::size_t(t) >= vocab_ || double(t) != x[i])
        throw ShapeError("Embedding: token id out of vocabulary");
      tokens_[i] = std::size_t(t);
      std::copy_n(table_.value.data() + tokens_[i] * dim_, dim_, y.data() + i * dim_);
    }
    in_shape_ = x.shape();
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      for (std::size_t d = 0; d < dim_; ++d) table_.grad[tokens_[i] * dim_ + d] += g[i * dim_ + d];
    return Tensor(in_shape_);
  }
  std::vector<Param*> params() override { return {&table_}; }

 private:
  std::size_t vocab_, dim_;
  Param table_;
  std::vector<std::size_t> tokens_;
  Shape in_shape_;
  bool cached_ = false;
};

class OneHot final : public Layer {
 public:
  explicit OneHot(std::size_t vocab) : vocab_(vocab) {}

  std::string kind() const override { return "OneHot"; }
  Shape output_shape(const Shape& s) const override {
    if (s.size() != 1) throw ShapeError("OneHot expects [length] token input, got " + shape_str(s));
    return {s[0], vocab_};
  }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    Tensor y(batched_output(x));
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto t = static_cast<long long>(x[i]);
      if (t < 0 || std::size_t(t) >= vocab_) throw ShapeError("OneHot: token id out of vocabulary");
      y[i * vocab_ + std::size_t(t)] = 1.0;
    }
    in_shape_ = x.shape();
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor&) override {
    require_cache(cached_);
    return Tensor(in_shape_);
  }

 private:
  std::size_t vocab_;
  Shape in_shape_;
  bool cached_ = false;
};

// ---------------------------------------------------------------------------
// Affine maps

/// y = x W + b over the last dimension (time-distributed for rank-3 input).
class Dense final : public Layer {
 public:
  Dense(const std::string& name, std::size_t in, std::size_t out, bool bias, Initializer& init)
      : in_(in), out_(out), weight_(name + "/kernel", init.he_uniform({in, out}, in)) {
    if (bias) bias_ = Param(name + "/bias", Tensor({out}));
    has_bias_ = bias;
  }

  std::string kind() const override { return "Dense"; }
  Shape output_shape(const Shape& s) const override {
    if (s.empty() || s.back() != in_)
      throw ShapeError("Dense expects last dimension " + std::to_string(in_) + ", got " + shape_str(s));
    Shape out = s;
    out.back() = out_;
    return out;
  }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    Tensor y(batched_output(x));
    y.matrix().noalias() = x.matrix() * weight_.value.matrix();
    if (has_bias_) y.matrix().rowwise() += bias_.value.matrix().row(0);
    input_ = x;
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    Shape expected = batched_output(input_);
    require_grad_shape(g, expected);
    weight_.grad.matrix().noalias() += input_.matrix().transpose() * g.matrix();
    if (has_bias_) bias_.grad.matrix().row(0) += g.matrix().colwise().sum();
    Tensor dx(input_.shape());
    dx.matrix().noalias() = g.matrix() * weight_.value.matrix().transpose();
    return dx;
  }
  std::vector<Param*> params() override {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
  }

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  std::size_t in_, out_;
  Param weight_;
  Param bias_;
  bool has_bias_ = false;
  Tensor input_;
  bool cached_ = false;
};

/// 1-D convolution over [length, channels] with symmetric zero padding of
/// (kernel-1)/2, giving "same" length at stride 1 and ceil(L/2) at stride 2.
/// Implemented as im2col followed by a single matrix product.
class Conv1D final : public Layer {
 public:
  Conv1D(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
         std::size_t stride, bool bias, Initializer& init)
      : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride),
        weight_(name + "/kernel", init.he_uniform({kernel, in_ch, out_ch}, kernel * in_ch)) {
    if (kernel % 2 == 0 || stride == 0) throw ConfigError("Conv1D needs odd kernel and stride >= 1");
    if (bias) bias_ = Param(name + "/bias", Tensor({out_ch}));
    has_bias_ = bias;
  }

  std::string kind() const override { return "Conv1D"; }
  std::size_t out_length(std::size_t len) const {
    std::size_t pad = (kernel_ - 1) / 2;
    return (len + 2 * pad - kernel_) / stride_ + 1;
  }
  Shape output_shape(const Shape& s) const override {
    if (s.size() != 2 || s[1] != in_ch_)
      throw ShapeError("Conv1D expects [length," + std::to_string(in_ch_) + "], got " + shape_str(s));
    if (s[0] == 0) throw ShapeError("Conv1D: empty sequence");
    return {out_length(s[0]), out_ch_};
  }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    Shape out = batched_output(x);
    const std::size_t batch = x.dim(0), len = x.dim(1), out_len = out[1];
    cols_ = Tensor({batch * out_len, kernel_ * in_ch_});
    const long pad = long(kernel_ - 1) / 2;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < out_len; ++t) {
        double* row = cols_.data() + (b * out_len + t) * kernel_ * in_ch_;
        for (std::size_t k = 0; k < kernel_; ++k) {
          long src = long(t * stride_) + long(k) - pad;
          if (src < 0 || src >= long(len)) continue;
          std::copy_n(x.data() + (b * len + std::size_t(src)) * in_ch_, in_ch_, row + k * in_ch_);
        }
      }
    Tensor y(out);
    auto w = ConstMatrixMap(weight_.value.data(), Eigen::Index(kernel_ * in_ch_), Eigen::Index(out_ch_));
    MatrixMap(y.data(), Eigen::Index(batch * out_len), Eigen::Index(out_ch_)).noalias() =
        cols_.matrix() * w;
    if (has_bias_) y.matrix().rowwise() += bias_.value.matrix().row(0);
    in_shape_ = x.shape();
    out_shape_ = out;
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    require_grad_shape(g, out_shape_);
    const std::size_t batch = in_shape_[0], len = in_shape_[1], out_len = out_shape_[1];
    auto gm = ConstMatrixMap(g.data(), Eigen::Index(batch * out_len), Eigen::Index(out_ch_));
    MatrixMap(weight_.grad.data(), Eigen::Index(kernel_ * in_ch_), Eigen::Index(out_ch_)).noalias() +=
        cols_.matrix().transpose() * gm;
    if (has_bias_) bias_.grad.matrix().row(0) += gm.colwise().sum();
    RowMatrix dcols = gm * ConstMatrixMap(weight_.value.data(), Eigen::Index(kernel_ * in_ch_),
                                          Eigen::Index(out_ch_))
                               .transpose();
    Tensor dx(in_shape_);
    const long pad = long(kernel_ - 1) / 2;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < out_len; ++t) {
        const double* row = dcols.data() + (b * out_len + t) * kernel_ * in_ch_;
        for (std::size_t k = 0; k < kernel_; ++k) {
          long src = long(t * stride_) + long(k) - pad;
          if (src < 0 || src >= long(len)) continue;
          double* dst = dx.data() + (b * len + std::size_t(src)) * in_ch_;
          for (std::size_t c = 0; c < in_ch_; ++c) dst[c] += row[k * in_ch_ + c];
        }
      }
    return dx;
  }
  std::vector<Param*> params() override {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
  }

 private:
  std::size_t in_ch_, out_ch_, kernel_, stride_;
  Param weight_;
  Param bias_;
  bool has_bias_ = false;
  Tensor cols_;
  Shape in_shape_, out_shape_;
  bool cached_ = false;
};

// ---------------------------------------------------------------------------
// Normalization

/// Per-channel batch normalization over every dimension but the last.
class BatchNorm final : public Layer {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm(const std::string& name, std::size_t channels)
      : channels_(channels),
        gamma_(name + "/gamma", Tensor({channels}, 1.0)),
        beta_(name + "/beta", Tensor({channels})),
        running_mean_{name + "/running_mean", Tensor({channels})},
        running_var_{name + "/running_var", Tensor({channels}, 1.0)} {}

  std::string kind() const override { return "BatchNorm"; }
  Shape output_shape(const Shape& s) const override {
    if (s.empty() || s.back() != channels_)
      throw ShapeError("BatchNorm expects " + std::to_string(channels_) + " channels, got " + shape_str(s));
    return s;
  }
  Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
    batched_output(x);
    const auto n = Eigen::Index(x.rows());
    if (n == 0) throw ShapeError("BatchNorm: empty batch");
    Eigen::RowVectorXd mean, inv_std;
    if (ctx.mode == Mode::Train) {
      mean = x.matrix().colwise().mean();
      RowMatrix centered = x.matrix().rowwise() - mean;
      Eigen::RowVectorXd var = centered.array().square().colwise().sum() / double(n);
      inv_std = (var.array() + kEps).rsqrt();
      double unbias = n > 1 ? double(n) / double(n - 1) : 1.0;
      running_mean_.value.matrix().row(0) =
          (1.0 - kMomentum) * running_mean_.value.matrix().row(0) + kMomentum * mean;
      running_var_.value.matrix().row(0) =
          (1.0 - kMomentum) * running_var_.value.matrix().row(0) + kMomentum * unbias * var;
    } else {
      mean = running_mean_.value.matrix().row(0);
      inv_std = (running_var_.value.matrix().row(0).array() + kEps).rsqrt();
    }
    xhat_ = Tensor(x.shape());
    xhat_.matrix() = (x.matrix().rowwise() - mean).array().rowwise() * inv_std.array();
    Tensor y(x.shape());
    y.matrix() = (xhat_.matrix().array().rowwise() * gamma_.value.matrix().row(0).array()).rowwise() +
                 beta_.value.matrix().row(0).array();
    inv_std_ = inv_std;
    train_mode_ = ctx.mode == Mode::Train;
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    require_grad_shape(g, xhat_.shape());
    const double n = double(g.rows());
    auto gm = g.matrix();
    auto xh = xhat_.matrix();
    gamma_.grad.matrix().row(0) += (gm.array() * xh.array()).colwise().sum().matrix();
    beta_.grad.matrix().row(0) += gm.colwise().sum();
    RowMatrix dxhat = gm.array().rowwise() * gamma_.value.matrix().row(0).array();
    Tensor dx(g.shape());
    if (!train_mode_) {
      dx.matrix() = dxhat.array().rowwise() * inv_std_.array();
      return dx;
    }
    Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
    Eigen::RowVectorXd sum_dx = (dxhat.array() * xh.array()).colwise().sum();
    dx.matrix() = ((dxhat.array() * n).rowwise() - sum_d.array() -
                   (xh.array().rowwise() * sum_dx.array()))
                      .rowwise() *
                  (inv_std_.array() / n);
    return dx;
  }
  std::vector<Param*> params() override { return {&gamma_, &beta_}; }
  std::vector<Buffer*> buffers() override { return {&running_mean_, &running_var_}; }

 private:
  std::size_t channels_;
  Param gamma_, beta_;
  Buffer running_mean_, running_var_;
  Tensor xhat_;
  Eigen::RowVectorXd inv_std_;
  bool train_mode_ = false;
  bool cached_ = false;
};

// ---------------------------------------------------------------------------
// Pointwise

enum class ActivationKind { ELU, ReLU, Logistic, Tanh, Linear, Exponential };

inline std::string to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::ELU: return "ELU";
    case ActivationKind::ReLU: return "ReLU";
    case ActivationKind::Logistic: return "Logistic";
    case ActivationKind::Tanh: return "Tanh";
    case ActivationKind::Linear: return "Linear";
    case ActivationKind::Exponential: return "Exponential";
  }
  return "?";
}

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double activate(ActivationKind k, double x) {
  switch (k) {
    case ActivationKind::ELU: return x >= 0 ? x : std::expm1(x);
    case ActivationKind::ReLU: return x > 0 ? x : 0.0;
    case ActivationKind::Logistic: return logistic(x);
    case ActivationKind::Tanh: return std::tanh(x);
    case ActivationKind::Linear: return x;
    case ActivationKind::Exponential: return std::exp(x);
  }
  return x;
}

/// Derivative expressed through the input x and output y = f(x).
inline double activate_grad(ActivationKind k, double x, double y) {
  switch (k) {
    case ActivationKind::ELU: return x >= 0 ? 1.0 : y + 1.0;
    case ActivationKind::ReLU: return x > 0 ? 1.0 : 0.0;
    case ActivationKind::Logistic: return y * (1.0 - y);
    case ActivationKind::Tanh: return 1.0 - y * y;
    case ActivationKind::Linear: return 1.0;
    case ActivationKind::Exponential: return y;
  }
  return 1.0;
}

class Activation final : public Layer {
 public:
  explicit Activation(ActivationKind k) : act_(k) {}

  std::string kind() const override { return "Activation(" + to_string(act_) + ")"; }
  Shape output_shape(const Shape& s) const override { return s; }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(act_, x[i]);
    input_ = x;
    output_ = y;
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    require_grad_shape(g, input_.shape());
    Tensor dx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * activate_grad(act_, input_[i], output_[i]);
    return dx;
  }

 private:
  ActivationKind act_;
  Tensor input_, output_;
  bool cached_ = false;
};

/// Logistic on the first `count` entries of the last dimension, identity on
/// the rest. Used by the auxiliary head (binary flags, then counts).
class PartialLogistic final : public Layer {
 public:
  explicit PartialLogistic(std::size_t count) : count_(count) {}

  std::string kind() const override { return "PartialLogistic"; }
  Shape output_shape(const Shape& s) const override {
    if (s.empty() || s.back() < count_) throw ShapeError("PartialLogistic: too few columns");
    return s;
  }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    batched_output(x);
    Tensor y = x;
    const std::size_t cols = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < count_; ++c) y[r * cols + c] = logistic(x[r * cols + c]);
    output_ = y;
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    require_grad_shape(g, output_.shape());
    Tensor dx = g;
    const std::size_t cols = g.cols();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < count_; ++c) {
        double y = output_[r * cols + c];
        dx[r * cols + c] *= y * (1.0 - y);
      }
    return dx;
  }

 private:
  std::size_t count_;
  Tensor output_;
  bool cached_ = false;
};

/// Inverted dropout: Train mode keeps each element with probability 1-rate
/// and scales survivors by 1/(1-rate); Eval mode is the identity.
class Dropout final : public Layer {
 public:
  Dropout(double rate, std::uint64_t salt) : rate_(rate), salt_(salt) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
  }

  std::string kind() const override { return "Dropout"; }
  Shape output_shape(const Shape& s) const override { return s; }
  double rate() const { return rate_; }

  Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
    cached_ = true;
    shape_ = x.shape();
    if (ctx.mode == Mode::Eval || rate_ == 0.0) {
      mask_ = Tensor();
      return x;
    }
    Rng rng(derive_seed(ctx.seed, salt_));
    mask_ = Tensor(x.shape());
    const double keep_scale = 1.0 / (1.0 - rate_);
    for (std::size_t i = 0; i < x.size(); ++i) mask_[i] = uniform01(rng) >= rate_ ? keep_scale : 0.0;
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask_[i];
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    require_grad_shape(g, shape_);
    if (mask_.empty()) return g;
    Tensor dx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * mask_[i];
    return dx;
  }

 private:
  double rate_;
  std::uint64_t salt_;
  Tensor mask_;
  Shape shape_;
  bool cached_ = false;
};

/// Row-wise softmax over the last dimension.
class Softmax final : public Layer {
 public:
  std::string kind() const override { return "Softmax"; }
  Shape output_shape(const Shape& s) const override {
    if (s.empty()) throw ShapeError("Softmax needs at least one dimension");
    return s;
  }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    batched_output(x);
    Tensor y(x.shape());
    const std::size_t cols = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) softmax_row(x.data() + r * cols, y.data() + r * cols, cols);
    output_ = y;
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    require_grad_shape(g, output_.shape());
    Tensor dx(g.shape());
    const std::size_t cols = g.cols();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const double* s = output_.data() + r * cols;
      const double* gr = g.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * s[c];
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] = s[c] * (gr[c] - dot);
    }
    return dx;
  }

  static void softmax_row(const double* in, double* out, std::size_t n) {
    double mx = *std::max_element(in, in + n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += (out[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < n; ++i) out[i] /= sum;
  }

 private:
  Tensor output_;
  bool cached_ = false;
};

// ---------------------------------------------------------------------------
// Sequence reductions

/// [length, C] -> [C] by averaging over positions.
class GlobalAveragePool final : public Layer {
 public:
  std::string kind() const override { return "GlobalAveragePool"; }
  Shape output_shape(const Shape& s) const override {
    if (s.size() != 2 || s[0] == 0) throw ShapeError("GlobalAveragePool expects [length,C], got " + shape_str(s));
    return {s[1]};
  }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    Tensor y(batched_output(x));
    const std::size_t batch = x.dim(0), len = x.dim(1), ch = x.dim(2);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t c = 0; c < ch; ++c) y[b * ch + c] += x[(b * len + t) * ch + c] / double(len);
    in_shape_ = x.shape();
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    const std::size_t batch = in_shape_[0], len = in_shape_[1], ch = in_shape_[2];
    require_grad_shape(g, {batch, ch});
    Tensor dx(in_shape_);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t c = 0; c < ch; ++c) dx[(b * len + t) * ch + c] = g[b * ch + c] / double(len);
    return dx;
  }

 private:
  Shape in_shape_;
  bool cached_ = false;
};

/// [length, C] -> [C] by summing over positions.
class SumOverTime final : public Layer {
 public:
  std::string kind() const override { return "SumOverTime"; }
  Shape output_shape(const Shape& s) const override {
    if (s.size() != 2) throw ShapeError("SumOverTime expects [length,C], got " + shape_str(s));
    return {s[1]};
  }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    Tensor y(batched_output(x));
    const std::size_t batch = x.dim(0), len = x.dim(1), ch = x.dim(2);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t c = 0; c < ch; ++c) y[b * ch + c] += x[(b * len + t) * ch + c];
    in_shape_ = x.shape();
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    const std::size_t batch = in_shape_[0], len = in_shape_[1], ch = in_shape_[2];
    require_grad_shape(g, {batch, ch});
    Tensor dx(in_shape_);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t c = 0; c < ch; ++c) dx[(b * len + t) * ch + c] = g[b * ch + c];
    return dx;
  }

 private:
  Shape in_shape_;
  bool cached_ = false;
};

/// Takes the forward direction's output at the last position and the
/// backward direction's output at the first position of a [length, 2H]
/// bidirectional sequence: the final state of each direction.
class BiDirFinalStep final : public Layer {
 public:
  explicit BiDirFinalStep(std::size_t hidden) : hidden_(hidden) {}

  std::string kind() const override { return "BiDirFinalStep"; }
  Shape output_shape(const Shape& s) const override {
    if (s.size() != 2 || s[0] == 0 || s[1] != 2 * hidden_)
      throw ShapeError("BiDirFinalStep expects [length," + std::to_string(2 * hidden_) + "], got " + shape_str(s));
    return {2 * hidden_};
  }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    Tensor y(batched_output(x));
    const std::size_t batch = x.dim(0), len = x.dim(1), w = 2 * hidden_;
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(x.data() + (b * len + len - 1) * w, hidden_, y.data() + b * w);
      std::copy_n(x.data() + (b * len) * w + hidden_, hidden_, y.data() + b * w + hidden_);
    }
    in_shape_ = x.shape();
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    const std::size_t batch = in_shape_[0], len = in_shape_[1], w = 2 * hidden_;
    require_grad_shape(g, {batch, w});
    Tensor dx(in_shape_);
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(g.data() + b * w, hidden_, dx.data() + (b * len + len - 1) * w);
      std::copy_n(g.data() + b * w + hidden_, hidden_, dx.data() + (b * len) * w + hidden_);
    }
    return dx;
  }

 private:
  std::size_t hidden_;
  Shape in_shape_;
  bool cached_ = false;
};

// ---------------------------------------------------------------------------
// Recurrent cells

/// Standard LSTM cell with gate order [input, forget, candidate, output]:
/// logistic gates, tanh candidate and output squashing.
class LSTMCell {
 public:
  struct StepCache {
    RowMatrix x, h_prev, c_prev, i, f, g, o, tanh_c;
  };

  LSTMCell(const std::string& name, std::size_t in, std::size_t hidden, Initializer& init)
      : in_(in), hidden_(hidden),
        w_(name + "/kernel", init.he_uniform({in, 4 * hidden}, in)),
        u_(name + "/recurrent", init.uniform({hidden, 4 * hidden}, 1.0 / std::sqrt(double(hidden)))),
        b_(name + "/bias", Tensor({4 * hidden})) {}

  std::size_t input_size() const { return in_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t state_size() const { return hidden_; }
  static std::string name() { return "LSTMCell"; }

  void step(const RowMatrix& x, const RowMatrix& h_prev, const RowMatrix& c_prev, RowMatrix& h,
            RowMatrix& c, StepCache& cache) const {
    const auto H = Eigen::Index(hidden_);
    RowMatrix a = x * w_.value.matrix() + h_prev * u_.value.matrix();
    a.rowwise() += b_.value.matrix().row(0);
    auto sig = [](double v) { return logistic(v); };
    cache.i = a.leftCols(H).unaryExpr(sig);
    cache.f = a.middleCols(H, H).unaryExpr(sig);
    cache.g = a.middleCols(2 * H, H).array().tanh();
    cache.o = a.rightCols(H).unaryExpr(sig);
    c = cache.f.cwiseProduct(c_prev) + cache.i.cwiseProduct(cache.g);
    cache.tanh_c = c.array().tanh();
    h = cache.o.cwiseProduct(cache.tanh_c);
    cache.x = x;
    cache.h_prev = h_prev;
    cache.c_prev = c_prev;
  }

  /// dh, dc: total gradients reaching this step's h and c outputs.
  void step_backward(const StepCache& k, const RowMatrix& dh, const RowMatrix& dc_in, RowMatrix& dx,
                     RowMatrix& dh_prev, RowMatrix& dc_prev) {
    const auto H = Eigen::Index(hidden_);
    RowMatrix dc = dc_in.array() + dh.array() * k.o.array() * (1.0 - k.tanh_c.array().square());
    RowMatrix da(dh.rows(), 4 * H);
    da.leftCols(H) = (dc.array() * k.g.array() * k.i.array() * (1.0 - k.i.array())).matrix();
    da.middleCols(H, H) = (dc.array() * k.c_prev.array() * k.f.array() * (1.0 - k.f.array())).matrix();
    da.middleCols(2 * H, H) = (dc.array() * k.i.array() * (1.0 - k.g.array().square())).matrix();
    da.rightCols(H) = (dh.array() * k.tanh_c.array() * k.o.array() * (1.0 - k.o.array())).matrix();
    dc_prev = dc.cwiseProduct(k.f);
    w_.grad.matrix().noalias() += k.x.transpose() * da;
    u_.grad.matrix().noalias() += k.h_prev.transpose() * da;
    b_.grad.matrix().row(0) += da.colwise().sum();
    dx.noalias() = da * w_.value.matrix().transpose();
    dh_prev.noalias() = da * u_.value.matrix().transpose();
  }

  std::vector<Param*> params() { return {&w_, &u_, &b_}; }
  Param& kernel() { return w_; }
  Param& recurrent() { return u_; }
  Param& bias() { return b_; }

 private:
  std::size_t in_, hidden_;
  Param w_, u_, b_;
};

/// Simple recurrent cell h_t = ReLU(x W + h_{t-1} U + b).
class RNNCell {
 public:
  struct StepCache {
    RowMatrix x, h_prev, pre;
  };

  RNNCell(const std::string& name, std::size_t in, std::size_t hidden, Initializer& init)
      : in_(in), hidden_(hidden),
        w_(name + "/kernel", init.he_uniform({in, hidden}, in)),
        u_(name + "/recurrent", init.uniform({hidden, hidden}, 1.0 / std::sqrt(double(hidden)))),
        b_(name + "/bias", Tensor({hidden})) {}

  std::size_t input_size() const { return in_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t state_size() const { return 0; }
  static std::string name() { return "RNNCell"; }

  void step(const RowMatrix& x, const RowMatrix& h_prev, const RowMatrix&, RowMatrix& h, RowMatrix&,
            StepCache& cache) const {
    cache.pre = x * w_.value.matrix() + h_prev * u_.value.matrix();
    cache.pre.rowwise() += b_.value.matrix().row(0);
    h = cache.pre.cwiseMax(0.0);
    cache.x = x;
    cache.h_prev = h_prev;
  }

  void step_backward(const StepCache& k, const RowMatrix& dh, const RowMatrix&, RowMatrix& dx,
                     RowMatrix& dh_prev, RowMatrix& dc_prev) {
    RowMatrix da = (k.pre.array() > 0.0).select(dh.array(), 0.0).matrix();
    w_.grad.matrix().noalias() += k.x.transpose() * da;
    u_.grad.matrix().noalias() += k.h_prev.transpose() * da;
    b_.grad.matrix().row(0) += da.colwise().sum();
    dx.noalias() = da * w_.value.matrix().transpose();
    dh_prev.noalias() = da * u_.value.matrix().transpose();
    dc_prev.resize(dh.rows(), 0);
  }

  std::vector<Param*> params() { return {&w_, &u_, &b_}; }

 private:
  std::size_t in_, hidden_;
  Param w_, u_, b_;
};

struct LstmStepResult {
  Tensor h, c;
};

/// One LSTM recurrence step on [batch, in] input with [batch, hidden] states.
inline LstmStepResult lstm_step(const LSTMCell& cell, const Tensor& x, const Tensor& h_prev,
                                const Tensor& c_prev) {
  const std::size_t batch = x.rows();
  if (x.rank() != 2 || x.cols() != cell.input_size())
    throw ShapeError("lstm_step: input shape " + shape_str(x.shape()));
  Shape state{batch, cell.hidden()};
  if (h_prev.shape() != state || c_prev.shape() != state)
    throw ShapeError("lstm_step: state shape mismatch");
  RowMatrix h, c;
  LSTMCell::StepCache cache;
  cell.step(x.matrix(), h_prev.matrix(), c_prev.matrix(), h, c, cache);
  LstmStepResult r{Tensor(state), Tensor(state)};
  r.h.matrix() = h;
  r.c.matrix() = c;
  return r;
}

/// Runs two independent cells over a [length, in] sequence, one forward and
/// one over the reversed sequence, and concatenates their per-position
/// outputs into [length, 2H].
template <typename Cell>
class BiDirectional final : public Layer {
 public:
  BiDirectional(const std::string& name, std::size_t in, std::size_t hidden, Initializer& init)
      : fwd_(name + "/fwd", in, hidden, init), bwd_(name + "/bwd", in, hidden, init) {}

  std::string kind() const override { return "BiDir(" + Cell::name() + ")"; }
  Shape output_shape(const Shape& s) const override {
    if (s.size() != 2 || s[0] == 0 || s[1] != fwd_.input_size())
      throw ShapeError(kind() + " expects [length," + std::to_string(fwd_.input_size()) + "], got " +
                       shape_str(s));
    return {s[0], 2 * fwd_.hidden()};
  }

  Tensor forward(const Tensor& x, const ForwardContext&) override {
    Shape out = batched_output(x);
    batch_ = x.dim(0);
    len_ = x.dim(1);
    const std::size_t H = fwd_.hidden();
    Tensor y(out);
    fwd_cache_.assign(len_, {});
    bwd_cache_.assign(len_, {});
    run_direction(fwd_, x, y, 0, false, fwd_cache_);
    run_direction(bwd_, x, y, H, true, bwd_cache_);
    in_shape_ = x.shape();
    cached_ = true;
    return y;
  }

  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    require_grad_shape(g, {batch_, len_, 2 * fwd_.hidden()});
    Tensor dx(in_shape_);
    backprop_direction(fwd_, g, dx, 0, false, fwd_cache_);
    backprop_direction(bwd_, g, dx, fwd_.hidden(), true, bwd_cache_);
    return dx;
  }

  std::vector<Param*> params() override {
    auto p = fwd_.params();
    auto q = bwd_.params();
    p.insert(p.end(), q.begin(), q.end());
    return p;
  }

  Cell& forward_cell() { return fwd_; }
  Cell& backward_cell() { return bwd_; }

 private:
  using Strided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;

  void run_direction(const Cell& cell, const Tensor& x, Tensor& y, std::size_t offset, bool reverse,
                     std::vector<typename Cell::StepCache>& caches) const {
    const std::size_t in = cell.input_size(), H = cell.hidden(), W = 2 * H;
    RowMatrix h = RowMatrix::Zero(Eigen::Index(batch_), Eigen::Index(H));
    RowMatrix c = RowMatrix::Zero(Eigen::Index(batch_), Eigen::Index(cell.state_size()));
    RowMatrix h_next, c_next;
    for (std::size_t s = 0; s < len_; ++s) {
      std::size_t t = reverse ? len_ - 1 - s : s;
      Strided xt(x.data() + t * in, Eigen::Index(batch_), Eigen::Index(in), Eigen::OuterStride<>(len_ * in));
      cell.step(xt, h, c, h_next, c_next, caches[t]);
      StridedMut(y.data() + t * W + offset, Eigen::Index(batch_), Eigen::Index(H),
                 Eigen::OuterStride<>(len_ * W)) = h_next;
      h.swap(h_next);
      c.swap(c_next);
    }
  }

  void backprop_direction(Cell& cell, const Tensor& g, Tensor& dx, std::size_t offset, bool reverse,
                          const std::vector<typename Cell::StepCache>& caches) {
    const std::size_t in = cell.input_size(), H = cell.hidden(), W = 2 * H;
    RowMatrix dh_next = RowMatrix::Zero(Eigen::Index(batch_), Eigen::Index(H));
    RowMatrix dc_next = RowMatrix::Zero(Eigen::Index(batch_), Eigen::Index(cell.state_size()));
    RowMatrix dxt, dh_prev, dc_prev;
    for (std::size_t s = len_; s-- > 0;) {
      std::size_t t = reverse ? len_ - 1 - s : s;
      RowMatrix dh = Strided(g.data() + t * W + offset, Eigen::Index(batch_), Eigen::Index(H),
                             Eigen::OuterStride<>(len_ * W));
      dh += dh_next;
      cell.step_backward(caches[t], dh, dc_next, dxt, dh_prev, dc_prev);
      StridedMut dst(dx.data() + t * in, Eigen::Index(batch_), Eigen::Index(in),
                     Eigen::OuterStride<>(len_ * in));
      dst += dxt;
      dh_next.swap(dh_prev);
      dc_next.swap(dc_prev);
    }
  }

  Cell fwd_, bwd_;
  std::vector<typename Cell::StepCache> fwd_cache_, bwd_cache_;
  std::size_t batch_ = 0, len_ = 0;
  Shape in_shape_;
  bool cached_ = false;
};

// ---------------------------------------------------------------------------
// Containers

class Sequential final : public Layer {
 public:
  Sequential() = default;

  Layer& add(LayerPtr layer) {
    layers_.push_back(std::move(layer));
    return *layers_.back();
  }
  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }

  std::size_t size() const { return layers_.size(); }
  Layer& operator[](std::size_t i) { return *layers_[i]; }

  std::string kind() const override { return "Sequential"; }
  Shape output_shape(const Shape& s) const override {
    Shape cur = s;
    for (const auto& l : layers_) cur = l->output_shape(cur);
    return cur;
  }
  Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
    Tensor cur = x;
    for (auto& l : layers_) cur = l->forward(cur, ctx);
    return cur;
  }
  Tensor backward(const Tensor& g) override {
    Tensor cur = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
    return cur;
  }
  std::vector<Param*> params() override {
    std::vector<Param*> out;
    for (auto& l : layers_) {
      auto p = l->params();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }
  std::vector<Buffer*> buffers() override {
    std::vector<Buffer*> out;
    for (auto& l : layers_) {
      auto b = l->buffers();
      out.insert(out.end(), b.begin(), b.end());
    }
    return out;
  }

 private:
  std::vector<LayerPtr> layers_;
};

/// y = main(x) + shortcut(x); the shortcut is the identity when absent.
/// With `enabled` false the shortcut term is dropped entirely.
class ResidualAdd final : public Layer {
 public:
  ResidualAdd(LayerPtr main, LayerPtr projection, bool enabled = true)
      : main_(std::move(main)), projection_(std::move(projection)), enabled_(enabled) {}

  std::string kind() const override { return "ResidualAdd"; }
  Shape output_shape(const Shape& s) const override {
    Shape out = main_->output_shape(s);
    if (enabled_) {
      Shape sc = projection_ ? projection_->output_shape(s) : s;
      if (sc != out)
        throw ShapeError("ResidualAdd: shortcut shape " + shape_str(sc) + " != main shape " + shape_str(out));
    }
    return out;
  }
  Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
    batched_output(x);
    Tensor y = main_->forward(x, ctx);
    if (enabled_) {
      Tensor sc = projection_ ? projection_->forward(x, ctx) : x;
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += sc[i];
    }
    cached_ = true;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    require_cache(cached_);
    Tensor dx = main_->backward(g);
    if (enabled_) {
      Tensor ds = projection_ ? projection_->backward(g) : g;
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += ds[i];
    }
    return dx;
  }
  std::vector<Param*> params() override {
    auto p = main_->params();
    if (projection_) {
      auto q = projection_->params();
      p.insert(p.end(), q.begin(), q.end());
    }
    return p;
  }
  std::vector<Buffer*> buffers() override {
    auto b = main_->buffers();
    if (projection_) {
      auto q = projection_->buffers();
      b.insert(b.end(), q.begin(), q.end());
    }
    return b;
  }

 private:
  LayerPtr main_;
  LayerPtr projection_;
  bool enabled_;
  bool cached_ = false;
};

}  // namespace platemark
