// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "platemark/tensor.hpp"

namespace platemark {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moment accumulators are allocated lazily to
/// match the parameter list handed to the first `step`.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : opt_(options) {}

  const AdamOptions& options() const { return opt_; }
  std::uint64_t steps() const { return t_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  void step(const std::vector<Param*>& params) {
    if (m_.empty()) {
      for (const Param* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
    if (m_.size() != params.size()) throw ShapeError("Adam: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i]->grad.shape() != m_[i].shape()) throw ShapeError("Adam: shape mismatch for " + params[i]->name);
      if (!params[i]->grad.all_finite()) throw NumericError("Adam: non-finite gradient in " + params[i]->name);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& w = params[i]->value;
      const Tensor& g = params[i]->grad;
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g[j];
        v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g[j] * g[j];
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        w[j] -= opt_.learning_rate * mhat / (std::sqrt(vhat) + opt_.epsilon);
      }
    }
  }

 private:
  AdamOptions opt_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace platemark
