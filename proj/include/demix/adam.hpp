#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "demix/autograd.hpp"

namespace demix::ad {

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(const std::vector<Var<T>>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

/// One bias-corrected Adam update applied in place to the leaf values of
/// `params`. No weight decay.
template <class T>
void adam_step(std::vector<Var<T>>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("tensorops", "adam_step: parameter/gradient/state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].shape() != params[i].shape() || state.m[i].shape() != params[i].shape() ||
        state.v[i].shape() != params[i].shape())
      throw ShapeError("tensorops", "adam_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                                        shape_str(params[i].shape()) + " vs grad " + shape_str(grads[i].shape()));

  ++state.t;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].mutable_value();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p[j] = static_cast<T>(p[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps));
    }
  }
}

}  // namespace demix::ad
