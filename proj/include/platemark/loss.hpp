// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "platemark/tensor.hpp"

namespace platemark {

/// Loss value together with its gradient with respect to the predictions.
struct LossResult {
  double value = 0.0;
  std::vector<double> grad;
};

namespace detail {
inline double weight_total(std::span<const double> w, std::size_t n) {
  if (w.size() != n) throw ShapeError("sample weight count does not match predictions");
  double total = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw NumericError("sample weights must be finite and >= 0");
    total += v;
  }
  if (total <= 0.0) throw NumericError("sample weights are all zero");
  return total;
}
}  // namespace detail

/// Σ w_i (pred_i - target_i)^2 / Σ w_i.
inline LossResult loss_weighted_mse(std::span<const double> pred, std::span<const double> target,
                                    std::span<const double> weights) {
  if (pred.size() != target.size()) throw ShapeError("loss_weighted_mse: length mismatch");
  const double total = detail::weight_total(weights, pred.size());
  LossResult r{0.0, std::vector<double>(pred.size())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double e = pred[i] - target[i];
    r.value += weights[i] * e * e;
    r.grad[i] = 2.0 * weights[i] * e / total;
  }
  r.value /= total;
  return r;
}

inline constexpr double kProbClamp = 1e-7;

/// Weighted mean binary cross entropy on probabilities clamped to
/// [1e-7, 1 - 1e-7]. The gradient is zero where the clamp is active.
inline LossResult loss_bce(std::span<const double> prob, std::span<const double> target,
                           std::span<const double> weights) {
  if (prob.size() != target.size()) throw ShapeError("loss_bce: length mismatch");
  const double total = detail::weight_total(weights, prob.size());
  LossResult r{0.0, std::vector<double>(prob.size())};
  for (std::size_t i = 0; i < prob.size(); ++i) {
    double p = std::clamp(prob[i], kProbClamp, 1.0 - kProbClamp);
    double t = target[i];
    r.value -= weights[i] * (t * std::log(p) + (1.0 - t) * std::log1p(-p));
    bool clamped = prob[i] <= kProbClamp || prob[i] >= 1.0 - kProbClamp;
    r.grad[i] = clamped ? 0.0 : weights[i] * (p - t) / (p * (1.0 - p)) / total;
  }
  r.value /= total;
  return r;
}

inline constexpr double kHalfLogTwoPi = 0.91893853320467274178;

/// Weighted mean mixture negative log-likelihood, evaluated with
/// log-sum-exp over components. `raw` is [batch, 3K]. The gradient is with
/// respect to the raw outputs.
inline LossResult loss_mdn_nll(const Tensor& raw, std::span<const double> target,
                               std::span<const double> weights, double sigma_floor) {
  if (raw.rank() != 2 || raw.cols() % 3 != 0) throw ShapeError("loss_mdn_nll: raw must be [batch, 3K]");
  const std::size_t n = raw.rows(), K = raw.cols() / 3;
  if (target.size() != n) throw ShapeError("loss_mdn_nll: length mismatch");
  const double total = detail::weight_total(weights, n);
  LossResult r{0.0, std::vector<double>(raw.size())};
  std::vector<double> logw(K), logc(K), sigma(K), zeta(K);
  for (std::size_t b = 0; b < n; ++b) {
    const double* row = raw.data() + b * 3 * K;
    double zmax = *std::max_element(row, row + K);
    double zsum = 0.0;
    for (std::size_t k = 0; k < K; ++k) zsum += std::exp(row[k] - zmax);
    const double log_norm = zmax + std::log(zsum);
    double cmax = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) {
      logw[k] = row[k] - log_norm;
      sigma[k] = std::max(std::exp(row[2 * K + k]), sigma_floor);
      zeta[k] = (target[b] - row[K + k]) / sigma[k];
      logc[k] = logw[k] - kHalfLogTwoPi - std::log(sigma[k]) - 0.5 * zeta[k] * zeta[k];
      cmax = std::max(cmax, logc[k]);
    }
    double csum = 0.0;
    for (std::size_t k = 0; k < K; ++k) csum += std::exp(logc[k] - cmax);
    const double loglik = cmax + std::log(csum);
    if (!std::isfinite(loglik)) throw NumericError("loss_mdn_nll: non-finite likelihood");
    r.value -= weights[b] * loglik;
    const double scale = weights[b] / total;
    double* g = r.grad.data() + b * 3 * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double resp = std::exp(logc[k] - loglik);  // posterior responsibility
      const double wk = std::exp(logw[k]);
      g[k] = scale * (wk - resp);
      g[K + k] = -scale * resp * zeta[k] / sigma[k];
      const bool floored = std::exp(row[2 * K + k]) < sigma_floor;
      g[2 * K + k] = floored ? 0.0 : scale * resp * (1.0 - zeta[k] * zeta[k]);
    }
  }
  r.value /= total;
  return r;
}

}  // namespace platemark
