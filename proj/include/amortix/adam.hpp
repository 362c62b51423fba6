#pragma once

#include "amortix/mlp.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

namespace amortix {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments for one network. Steps descend along the supplied gradient.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const Mlp& model, AdamConfig cfg) : cfg_(cfg), m_(model.zeros_like()), v_(model.zeros_like()) {}

  /// Applies one bias-corrected update. A non-finite gradient leaves both the
  /// parameters and the moments untouched; the offending parameter path is
  /// returned instead.
  [[nodiscard]] std::optional<std::string> step(Mlp& model, const ParamSet& grads) {
    std::optional<std::string> bad;
    for_each_param(grads, [&](const std::string& path, const double* g, std::size_t n) {
      if (bad) return;
      for (std::size_t i = 0; i < n; ++i)
        if (!std::isfinite(g[i])) {
          bad = path + "[" + std::to_string(i) + "]";
          return;
        }
    });
    if (bad) return bad;

    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto& params = model.layers();
    for (std::size_t l = 0; l < params.size(); ++l) {
      update(params[l].weight.data(), grads[l].weight.data(), m_[l].weight.data(), v_[l].weight.data(),
             static_cast<std::size_t>(params[l].weight.size()), c1, c2);
      update(params[l].bias.data(), grads[l].bias.data(), m_[l].bias.data(), v_[l].bias.data(),
             static_cast<std::size_t>(params[l].bias.size()), c1, c2);
    }
    return std::nullopt;
  }

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const ParamSet& first_moment() const { return m_; }
  const ParamSet& second_moment() const { return v_; }

 private:
  void update(double* p, const double* g, double* m, double* v, std::size_t n, double c1, double c2) const {
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      p[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }

  AdamConfig cfg_;
  ParamSet m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace amortix
