// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "platemark/layers.hpp"
#include "platemark/random.hpp"
#include "platemark/tensor.hpp"

namespace pmtest {

using namespace platemark;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

inline Tensor random_tokens(std::size_t batch, std::size_t len, std::size_t vocab, Rng& rng) {
  Tensor t({batch, len});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = double(rng() % vocab);
  return t;
}

/// ||a - b|| / (||a|| + ||b||), zero when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nb);
  return denom < 1e-14 ? 0.0 : std::sqrt(diff) / denom;
}

inline constexpr double kFdStep = 1e-5;

/// Central differences of f with respect to every element of `t`.
inline std::vector<double> numeric_gradient(Tensor& t, const std::function<double()>& f,
                                            const std::vector<std::size_t>& indices = {}) {
  std::vector<std::size_t> idx = indices;
  if (idx.empty())
    for (std::size_t i = 0; i < t.size(); ++i) idx.push_back(i);
  std::vector<double> g;
  for (std::size_t i : idx) {
    const double saved = t[i];
    t[i] = saved + kFdStep;
    const double up = f();
    t[i] = saved - kFdStep;
    const double down = f();
    t[i] = saved;
    g.push_back((up - down) / (2.0 * kFdStep));
  }
  return g;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct LayerCheck {
  double input_error = 0.0;
  double param_error = 0.0;
};

/// Checks `backward` against central differences of <R, forward(x)> for a
/// random projection R, over the input (when `check_input`) and every
/// parameter. `ctx` is fixed so stochastic layers reuse one mask.
inline LayerCheck check_layer(Layer& layer, Tensor x, const ForwardContext& ctx, Rng& rng,
                              bool check_input = true) {
  Tensor y = layer.forward(x, ctx);
  Tensor r = random_tensor(y.shape(), rng);
  for (Param* p : layer.params()) p->zero_grad();
  layer.forward(x, ctx);
  Tensor dx = layer.backward(r);
  LayerCheck out;
  auto objective = [&]() { return dot(r, layer.forward(x, ctx)); };
  if (check_input) out.input_error = relative_error(dx.values(), numeric_gradient(x, objective));
  std::vector<double> analytic, numeric;
  for (Param* p : layer.params()) {
    analytic.insert(analytic.end(), p->grad.values().begin(), p->grad.values().end());
    auto n = numeric_gradient(p->value, objective);
    numeric.insert(numeric.end(), n.begin(), n.end());
  }
  out.param_error = relative_error(analytic, numeric);
  return out;
}

}  // namespace pmtest
