#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hst/tensor.hpp"

namespace hst::testing {

/// Central finite differences of f() with respect to the data of x.
/// f must rerun the forward pass from scratch on every call.
inline std::vector<double> finite_diff(Tensor x, const std::function<double()>& f,
                                       double step = 1e-5) {
  auto& v = x.mutable_values();
  std::vector<double> g(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + step;
    const double fp = f();
    v[i] = orig - step;
    const double fm = f();
    v[i] = orig;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Runs backward through loss_fn() once, then compares the gradient of x
/// against central finite differences. Returns the worst relative error.
inline double max_grad_rel_err(Tensor x, const std::function<Tensor()>& loss_fn,
                               double step = 1e-5) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  const std::vector<double> analytic = x.grad();
  const std::vector<double> fd = finite_diff(
      x,
      [&] {
        NoGradGuard ng;
        return loss_fn().item();
      },
      step);
  double worst = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, rel_err(analytic[i], fd[i]));
  }
  return worst;
}

}  // namespace hst::testing
