// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "platemark/layers.hpp"
#include "platemark/loss.hpp"
#include "platemark/optimizer.hpp"
#include "platemark/random.hpp"

namespace platemark {

inline constexpr double kSigmaFloor = 1e-3;

/// Gaussian mixture over realized log prices.
struct MixtureParams {
  std::vector<double> weights, means, sigmas;

  std::size_t components() const { return weights.size(); }

  void validate() const {
    const std::size_t K = weights.size();
    if (K == 0 || means.size() != K || sigmas.size() != K) throw ShapeError("mixture: inconsistent component counts");
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      if (!(weights[k] >= 0.0) || !std::isfinite(means[k]) || !(sigmas[k] > 0.0) || !std::isfinite(sigmas[k]))
        throw NumericError("mixture: non-finite or invalid parameters");
      sum += weights[k];
    }
    if (std::abs(sum - 1.0) > 1e-9) throw NumericError("mixture: weights do not sum to 1");
  }
};

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double mixture_pdf(const MixtureParams& p, double x) {
  double s = 0.0;
  for (std::size_t k = 0; k < p.components(); ++k)
    s += p.weights[k] * normal_pdf((x - p.means[k]) / p.sigmas[k]) / p.sigmas[k];
  return s;
}

inline double mixture_cdf(const MixtureParams& p, double x) {
  double s = 0.0;
  for (std::size_t k = 0; k < p.components(); ++k) s += p.weights[k] * normal_cdf((x - p.means[k]) / p.sigmas[k]);
  return std::clamp(s, 0.0, 1.0);
}

inline double mixture_log_pdf(const MixtureParams& p, double x) {
  double mx = -INFINITY;
  std::vector<double> lc(p.components());
  for (std::size_t k = 0; k < p.components(); ++k) {
    double z = (x - p.means[k]) / p.sigmas[k];
    lc[k] = std::log(p.weights[k]) - kHalfLogTwoPi - std::log(p.sigmas[k]) - 0.5 * z * z;
    mx = std::max(mx, lc[k]);
  }
  double s = 0.0;
  for (double v : lc) s += std::exp(v - mx);
  return mx + std::log(s);
}

inline double mixture_mean(const MixtureParams& p) {
  double m = 0.0;
  for (std::size_t k = 0; k < p.components(); ++k) m += p.weights[k] * p.means[k];
  return m;
}

inline double mixture_variance(const MixtureParams& p) {
  const double m = mixture_mean(p);
  double v = 0.0;
  for (std::size_t k = 0; k < p.components(); ++k)
    v += p.weights[k] * (p.sigmas[k] * p.sigmas[k] + (p.means[k] - m) * (p.means[k] - m));
  return v;
}

/// Bisection on the cdf, bracketed by [min mu - 12 max sigma, max mu + 12 max sigma].
inline double mixture_quantile(const MixtureParams& p, double q) {
  if (!(q > 0.0 && q < 1.0)) throw ConfigError("mixture_quantile: q must be in (0,1)");
  const double smax = *std::max_element(p.sigmas.begin(), p.sigmas.end());
  double lo = *std::min_element(p.means.begin(), p.means.end()) - 12.0 * smax;
  double hi = *std::max_element(p.means.begin(), p.means.end()) + 12.0 * smax;
  for (int it = 0; it < 400; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;  // bracket at floating-point resolution
    if (mixture_cdf(p, mid) < q) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

inline std::vector<double> mixture_sample(const MixtureParams& p, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("mixture_sample: n must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> cumulative(p.components());
  double acc = 0.0;
  for (std::size_t k = 0; k < p.components(); ++k) cumulative[k] = (acc += p.weights[k]);
  std::vector<double> out(n);
  for (auto& x : out) {
    double u = uniform01(rng) * acc;
    auto k = std::size_t(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    k = std::min(k, p.components() - 1);
    x = p.means[k] + p.sigmas[k] * normal(rng);
  }
  return out;
}

/// Maps a predicted log price to a mixture: input -> hidden (ELU) -> [z, mu, s].
/// The input and the target are standardized internally; the affine
/// constants are stored as buffers so the mapping stays a plain function of
/// the predicted log price.
class MDNModel {
 public:
  MDNModel(std::size_t components, std::size_t hidden, std::uint64_t seed)
      : K_(components), H_(hidden) {
    if (components < 1 || hidden < 1) throw ConfigError("MDN needs K >= 1 and H >= 1");
    Initializer init(seed);
    net_.emplace<Dense>("mdn/hidden", 1, hidden, true, init);
    net_.emplace<Activation>(ActivationKind::ELU);
    net_.emplace<Dense>("mdn/output", hidden, 3 * components, true, init);
    scaler_ = Buffer{"mdn/scaler", Tensor({4}, 0.0)};
    scaler_.value[1] = 1.0;
    scaler_.value[3] = 1.0;
  }

  std::size_t components() const { return K_; }
  std::size_t hidden() const { return H_; }

  double input_shift() const { return scaler_.value[0]; }
  double input_scale() const { return scaler_.value[1]; }
  double target_shift() const { return scaler_.value[2]; }
  double target_scale() const { return scaler_.value[3]; }
  void set_scalers(double in_shift, double in_scale, double t_shift, double t_scale) {
    scaler_.value[0] = in_shift;
    scaler_.value[1] = in_scale;
    scaler_.value[2] = t_shift;
    scaler_.value[3] = t_scale;
  }

  /// Raw outputs [B, 3K] in standardized target units.
  Tensor raw(std::span<const double> predicted, Mode mode = Mode::Eval) {
    Tensor x({predicted.size(), 1});
    for (std::size_t i = 0; i < predicted.size(); ++i) x[i] = (predicted[i] - input_shift()) / input_scale();
    return net_.forward(x, {mode, 0});
  }
  void backward(const Tensor& d_raw) { net_.backward(d_raw); }

  /// Mixture in original log-price units for one predicted log price.
  MixtureParams params(double predicted) {
    if (!std::isfinite(predicted)) throw NumericError("mdn: non-finite input");
    double in[1] = {predicted};
    Tensor r = raw(in);
    return params_from_raw(r.data());
  }

  MixtureParams params_from_raw(const double* row) const {
    MixtureParams p;
    p.weights.resize(K_);
    Softmax::softmax_row(row, p.weights.data(), K_);
    for (std::size_t k = 0; k < K_; ++k) {
      p.means.push_back(target_shift() + target_scale() * row[K_ + k]);
      p.sigmas.push_back(std::max(target_scale() * std::exp(row[2 * K_ + k]), kSigmaFloor));
    }
    p.validate();
    return p;
  }

  std::vector<Param*> params() { return net_.params(); }
  std::vector<std::pair<std::string, Tensor*>> named_state() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (Param* p : net_.params()) out.emplace_back(p->name, &p->value);
    out.emplace_back(scaler_.name, &scaler_.value);
    return out;
  }
  void zero_grad() {
    for (Param* p : net_.params()) p->zero_grad();
  }
  void quantize() {
    for (auto& [n, t] : named_state())
      for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = double(float((*t)[i]));
  }
  Dense& output_layer() { return static_cast<Dense&>(net_[2]); }

 private:
  std::size_t K_, H_;
  Sequential net_;
  Buffer scaler_;
};

/// Weighted mean NLL in original log-price units.
inline double mdn_nll(MDNModel& m, std::span<const double> predicted, std::span<const double> actual) {
  Tensor r = m.raw(predicted);
  std::vector<double> z(actual.size()), w(actual.size(), 1.0);
  for (std::size_t i = 0; i < actual.size(); ++i) z[i] = (actual[i] - m.target_shift()) / m.target_scale();
  return loss_mdn_nll(r, z, w, kSigmaFloor / m.target_scale()).value + std::log(m.target_scale());
}

struct MdnFitOptions {
  std::size_t components = 6;
  std::size_t hidden = 256;
  std::size_t epochs = 300;
  std::size_t batch_size = 256;
  std::size_t patience = 50;
  double learning_rate = 1e-3;
  double valid_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct MdnFitResult {
  MDNModel model;
  double best_valid_nll;
  std::size_t best_epoch;
  std::vector<double> valid_history;
};

/// Fits the mixture network on (predicted, actual) log-price pairs by Adam
/// on the mixture NLL; a seeded hold-out slice selects the best epoch, whose
/// state is returned.
inline MdnFitResult fit_mdn(std::span<const double> predicted, std::span<const double> actual,
                            const MdnFitOptions& opt) {
  if (predicted.size() != actual.size()) throw ShapeError("fit_mdn: length mismatch");
  {
    std::vector<std::pair<double, double>> distinct;
    for (std::size_t i = 0; i < predicted.size(); ++i) distinct.emplace_back(predicted[i], actual[i]);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < std::max<std::size_t>(opt.components, 2))
      throw DataError("fit_mdn: need at least K distinct pairs");
  }
  const std::size_t n = predicted.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(opt.seed, 0x3d17));
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_valid = std::max<std::size_t>(1, std::size_t(std::llround(opt.valid_fraction * double(n))));
  if (n_valid >= n) n_valid = n / 2;
  std::vector<double> fit_x, fit_y, val_x, val_y;
  for (std::size_t i = 0; i < n; ++i) {
    auto& xs = i < n_valid ? val_x : fit_x;
    auto& ys = i < n_valid ? val_y : fit_y;
    xs.push_back(predicted[order[i]]);
    ys.push_back(actual[order[i]]);
  }

  auto mean_std = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= double(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    s = std::sqrt(s / double(v.size()));
    return std::pair{m, s > 0 ? s : 1.0};
  };
  auto [xm, xs] = mean_std(fit_x);
  auto [ym, ys] = mean_std(fit_y);

  MDNModel model(opt.components, opt.hidden, derive_seed(opt.seed, 0x7a11));
  model.set_scalers(xm, xs, ym, ys);
  {
    // Component means start at evenly spaced quantiles of the targets.
    std::vector<double> sorted = fit_y;
    std::sort(sorted.begin(), sorted.end());
    Dense& out = model.output_layer();
    const std::size_t K = opt.components;
    for (std::size_t k = 0; k < K; ++k) {
      double q = sorted[std::min(sorted.size() - 1, std::size_t((double(k) + 0.5) / double(K) * double(sorted.size())))];
      out.bias().value[K + k] = double(float((q - ym) / ys));
      out.bias().value[2 * K + k] = double(float(std::log(1.0 / std::sqrt(double(K)))));
    }
  }
  model.quantize();

  Adam adam({opt.learning_rate});
  const double floor_std = kSigmaFloor / ys;
  std::vector<double> fit_z(fit_y.size());
  for (std::size_t i = 0; i < fit_y.size(); ++i) fit_z[i] = (fit_y[i] - ym) / ys;

  double best_nll = INFINITY;
  std::size_t best_epoch = 0;
  std::vector<double> history;
  std::vector<std::pair<std::string, Tensor>> best;
  auto snapshot = [&]() {
    best.clear();
    for (auto& [name, t] : model.named_state()) best.emplace_back(name, *t);
  };
  std::size_t stale = 0;
  std::vector<std::size_t> idx(fit_x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    Rng erng(derive_seed(opt.seed, 0x1000 + epoch));
    std::shuffle(idx.begin(), idx.end(), erng);
    for (std::size_t start = 0; start < idx.size(); start += opt.batch_size) {
      const std::size_t end = std::min(idx.size(), start + opt.batch_size);
      std::vector<double> bx, bz, bw(end - start, 1.0);
      for (std::size_t i = start; i < end; ++i) {
        bx.push_back(fit_x[idx[i]]);
        bz.push_back(fit_z[idx[i]]);
      }
      Tensor r = model.raw(bx, Mode::Train);
      LossResult loss = loss_mdn_nll(r, bz, bw, floor_std);
      if (!std::isfinite(loss.value)) throw NumericError("fit_mdn: non-finite loss");
      model.zero_grad();
      model.backward(Tensor(r.shape(), std::move(loss.grad)));
      adam.step(model.params());
    }
    model.quantize();
    const double v = mdn_nll(model, val_x, val_y);
    history.push_back(v);
    if (v < best_nll) {
      best_nll = v;
      best_epoch = epoch;
      snapshot();
      stale = 0;
    } else if (++stale >= opt.patience) {
      break;
    }
  }
  auto named = model.named_state();
  for (std::size_t i = 0; i < named.size(); ++i) *named[i].second = best[i].second;
  return MdnFitResult{std::move(model), best_nll, best_epoch, std::move(history)};
}

}  // namespace platemark
