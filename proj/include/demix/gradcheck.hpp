#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "demix/autograd.hpp"

namespace demix::ad {

struct GradProbe {
  std::size_t param;
  std::size_t index;
  double analytic;
  double numeric;
  double rel_error;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<GradProbe> probes;
};

struct GradCheckOptions {
  std::size_t probes = 20;
  std::uint64_t seed = 0;
  double step = 1e-3;  // relative to max(|p|, 1)
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares analytic gradients against central differences computed by
/// `perturbed_loss(param, index, delta)`, which must return the loss with one
/// scalar parameter shifted by `delta`.
template <class T>
GradCheckResult check_gradients(const std::vector<Var<T>>& params, const std::vector<Tensor<T>>& analytic,
                                const std::function<double(std::size_t, std::size_t, double)>& perturbed_loss,
                                const GradCheckOptions& opt) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.value().size();
  if (total == 0 || opt.probes == 0) throw ShapeError("tensorops", "finite_diff_check needs at least one probe");

  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  GradCheckResult res;
  for (std::size_t k = 0; k < opt.probes; ++k) {
    std::size_t flat = pick(rng), pi = 0;
    while (flat >= params[pi].value().size()) flat -= params[pi++].value().size();
    const double p = params[pi].value()[flat];
    const double h = opt.step * std::max(std::abs(p), 1.0);
    const double numeric = (perturbed_loss(pi, flat, h) - perturbed_loss(pi, flat, -h)) / (2.0 * h);
    const double a = analytic[pi][flat];
    const double e = relative_error(a, numeric);
    res.probes.push_back({pi, flat, a, numeric, e});
    res.max_rel_error = std::max(res.max_rel_error, e);
  }
  return res;
}

/// Finite-difference check of `loss_fn` (a nullary callable returning a
/// scalar Var built from `params`) at the precision of T.
template <class T, class LossFn>
GradCheckResult finite_diff_check(LossFn&& loss_fn, std::vector<Var<T>>& params, const GradCheckOptions& opt = {}) {
  const auto analytic = grad(Var<T>(loss_fn()), std::span<const Var<T>>(params));
  return check_gradients<T>(
      params, analytic,
      [&](std::size_t pi, std::size_t idx, double delta) {
        T& slot = params[pi].mutable_value()[idx];
        const T saved = slot;
        slot = static_cast<T>(saved + delta);
        const double l = static_cast<double>(Var<T>(loss_fn()).value().item());
        slot = saved;
        return l;
      },
      opt);
}

/// As above, but central differences are taken on `reference_loss`, which
/// evaluates the same function in double precision from a copy of the
/// parameter values. Used to check 32-bit gradients against an oracle whose
/// rounding noise does not swamp the difference quotient.
template <class T, class LossFn, class RefLossFn>
GradCheckResult finite_diff_check(LossFn&& loss_fn, std::vector<Var<T>>& params, RefLossFn&& reference_loss,
                                  const GradCheckOptions& opt = {}) {
  const auto analytic = grad(Var<T>(loss_fn()), std::span<const Var<T>>(params));
  std::vector<Tensor<double>> values;
  for (const auto& p : params) values.push_back(p.value().template cast<double>());
  return check_gradients<T>(
      params, analytic,
      [&](std::size_t pi, std::size_t idx, double delta) {
        const double saved = values[pi][idx];
        values[pi][idx] = saved + delta;
        const double l = reference_loss(values);
        values[pi][idx] = saved;
        return l;
      },
      opt);
}

}  // namespace demix::ad
