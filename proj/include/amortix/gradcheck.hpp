#pragma once

#include "amortix/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace amortix {

/// Loss callback: returns the scalar loss for the current parameters and, when
/// `grads` is non-null, adds the analytic gradient into it.
using LossFn = std::function<double(const Mlp&, ParamSet* grads)>;

/// Max over parameters of |analytic - central difference| / max(1, |analytic|).
inline double finite_diff_check(Mlp model, const LossFn& loss_fn, double eps = 1e-5) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("finite_diff_check: eps outside [1e-7, 1e-3]");
  ParamSet analytic = model.zeros_like();
  loss_fn(model, &analytic);

  double worst = 0.0;
  auto& params = model.layers();
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto probe = [&](double* data, const double* grad, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        const double saved = data[i];
        data[i] = saved + eps;
        const double up = loss_fn(model, nullptr);
        data[i] = saved - eps;
        const double down = loss_fn(model, nullptr);
        data[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        worst = std::max(worst, std::abs(grad[i] - numeric) / std::max(1.0, std::abs(grad[i])));
      }
    };
    probe(params[l].weight.data(), analytic[l].weight.data(), static_cast<std::size_t>(params[l].weight.size()));
    probe(params[l].bias.data(), analytic[l].bias.data(), static_cast<std::size_t>(params[l].bias.size()));
  }
  return worst;
}

}  // namespace amortix
