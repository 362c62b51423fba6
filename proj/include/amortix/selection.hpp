#pragma once

#include "amortix/loss.hpp"
#include "amortix/masking.hpp"
#include "amortix/mlp.hpp"
#include "amortix/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace amortix {

inline constexpr double kSelectorProbClamp = 1e-6;
inline constexpr double kDefaultTemperature = 0.1;

/// Independent Bernoulli selector: s_i ~ B(f(x)_i) with f a sigmoid-head MLP.
struct BernoulliSelector {
  Mlp net;
  double tau = kDefaultTemperature;
};

/// L2X-style selector: k Concrete draws over softmax logits, merged by max.
struct ConcreteTopK {
  Mlp net;  // Linear head over D features
  int k = 1;
  double tau = kDefaultTemperature;
};

/// One draw of (s, z, z~) per instance and feature, plus the noise used.
struct CoupledSample {
  Matrix p;        // clamped selection probabilities
  Matrix inside;   // 1 where the clamp was inactive (p differentiable in the logit)
  Matrix u, v;     // uniform draws for z and for z~
  Matrix z;        // (logit p + logit u) / tau
  Matrix s;        // 1(z > 0)
  Matrix z_tilde;  // z conditioned on s
  double tau = kDefaultTemperature;
};

namespace detail {

struct Clamped {
  double p;
  double logit_p;
  bool inside;
};

inline Clamped clamp_prob_from_logit(double a) {
  static const double bound = logit(1.0 - kSelectorProbClamp);
  if (a > bound) return {1.0 - kSelectorProbClamp, bound, false};
  if (a < -bound) return {kSelectorProbClamp, -bound, false};
  return {sigmoid(a), a, true};
}

/// logit(v') with v' from the two-case conditional draw, and d logit(v') / dp.
/// 1 - v' is formed directly in the s = 1 branch to avoid cancellation.
inline std::pair<double, double> conditional_logit(double v, double p, bool s) {
  double vp, one_minus_vp, dvp_dp;
  if (s) {
    vp = v * p + (1.0 - p);
    one_minus_vp = p * (1.0 - v);
    dvp_dp = v - 1.0;
  } else {
    vp = v * (1.0 - p);
    one_minus_vp = 1.0 - vp;
    dvp_dp = -v;
  }
  return {std::log(vp) - std::log(one_minus_vp), dvp_dp / (vp * one_minus_vp)};
}

}  // namespace detail

/// Coupled relaxed sampling from pre-sigmoid selector logits.
inline CoupledSample sample_coupled_from_logits(const Matrix& logits, double tau, RngStream& rng) {
  CoupledSample c;
  c.tau = tau;
  const auto n = logits.rows(), d = logits.cols();
  c.p.resize(n, d);
  c.inside.resize(n, d);
  c.u.resize(n, d);
  c.v.resize(n, d);
  c.z.resize(n, d);
  c.s.resize(n, d);
  c.z_tilde.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto cp = detail::clamp_prob_from_logit(logits(i, j));
      const double u = rng.uniform();
      const double v = rng.uniform();
      const double z = (cp.logit_p + logit(u)) / tau;
      const bool s = z > 0.0;
      c.p(i, j) = cp.p;
      c.inside(i, j) = cp.inside ? 1.0 : 0.0;
      c.u(i, j) = u;
      c.v(i, j) = v;
      c.z(i, j) = z;
      c.s(i, j) = s ? 1.0 : 0.0;
      c.z_tilde(i, j) = (cp.logit_p + detail::conditional_logit(v, cp.p, s).first) / tau;
    }
  return c;
}

inline CoupledSample sample_coupled(const BernoulliSelector& selector, const Matrix& x, RngStream& rng) {
  return sample_coupled_from_logits(selector.net.logits(x), selector.tau, rng);
}

/// h(S) = log q(y | m(x, S)) under a fixed predictor; S may be relaxed.
struct MaskedLikelihood {
  const Mlp& predictor;
  MaskScheme scheme = MaskScheme::HardToken;

  struct Result {
    Vector loglik;
    Matrix dmask;  // row i: d loglik_i / d S_i (empty unless requested)
  };

  Result evaluate(const Matrix& x, const Matrix& s, std::span<const int> y, bool with_grad) const {
    Mlp::Cache cache;
    const Matrix input = encode_masked(scheme, x, s);
    const Matrix probs = predictor.apply_head(predictor.logits(input, with_grad ? &cache : nullptr));
    Result r{log_likelihood_rows(probs, y), {}};
    if (with_grad) {
      Matrix dlogits = -probs;
      for (Eigen::Index i = 0; i < x.rows(); ++i) dlogits(i, y[static_cast<std::size_t>(i)]) += 1.0;
      const Matrix dinput = predictor.backward(cache, dlogits, nullptr, true);
      r.dmask = encode_masked_grad(scheme, x, dinput);
    }
    return r;
  }
};

enum class EstimatorKind : std::uint8_t { Rebar = 0, ScoreCv = 1, ScorePlain = 2, Reparam = 3 };

inline const char* estimator_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::Rebar: return "rebar";
    case EstimatorKind::ScoreCv: return "score-cv";
    case EstimatorKind::ScorePlain: return "score";
    case EstimatorKind::Reparam: return "reparam";
  }
  return "?";
}

/// Ascent direction for the selector parameters, averaged over the batch.
struct GradientEstimate {
  EstimatorKind kind = EstimatorKind::Rebar;
  ParamSet grads;
  Matrix logit_grad;  // per-instance estimate w.r.t. the selector logits
  Matrix s;           // sampled selections
  Vector h_s;         // log q(y | m(x, s))
  double cv_residual = 0.0;  // mean (h(s) - baseline)^2, the variance proxy
  bool finite = true;
};

namespace detail {

inline GradientEstimate finish_estimate(const BernoulliSelector& sel, const Mlp::Cache& cache, GradientEstimate est) {
  est.finite = est.logit_grad.allFinite();
  est.grads = sel.net.zeros_like();
  if (!est.finite || est.logit_grad.rows() == 0) return est;
  sel.net.backward(cache, est.logit_grad / static_cast<double>(est.logit_grad.rows()), &est.grads);
  return est;
}

}  // namespace detail

/// REBAR estimate of
///   d/dbeta E_{s ~ B(f(x))}[ log q(y | m(x, s)) - lambda ||s||_0 ]
/// with control variate scale fixed to 1:
///   [h(s) - h(z~)] dlog q(s) - lambda df + dh(z) - dh(z~),
/// where relaxed selections enter the predictor as sigmoid(z).
inline GradientEstimate rebar_gradient(const BernoulliSelector& sel, const MaskedLikelihood& h, const Matrix& x,
                                       std::span<const int> y, double lambda, RngStream& rng) {
  Mlp::Cache cache;
  const Matrix logits = sel.net.logits(x, &cache);
  const CoupledSample c = sample_coupled_from_logits(logits, sel.tau, rng);
  const Matrix sig_z = sigmoid_elementwise(c.z);
  const Matrix sig_zt = sigmoid_elementwise(c.z_tilde);

  const auto hs = h.evaluate(x, c.s, y, false);
  const auto hz = h.evaluate(x, sig_z, y, true);
  const auto hzt = h.evaluate(x, sig_zt, y, true);

  GradientEstimate est;
  est.kind = EstimatorKind::Rebar;
  est.s = c.s;
  est.h_s = hs.loglik;
  const auto n = x.rows(), d = logits.cols();
  est.logit_grad.resize(n, d);
  double resid = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double coeff = hs.loglik(i) - hzt.loglik(i);
    resid += coeff * coeff;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double p = c.p(i, j);
      const double in = c.inside(i, j);
      const double dp_da = in * p * (1.0 - p);
      const double dz_da = in / c.tau;
      const double dzt_da =
          (in + detail::conditional_logit(c.v(i, j), p, c.s(i, j) > 0.5).second * dp_da) / c.tau;
      const double dsig_z = sig_z(i, j) * (1.0 - sig_z(i, j));
      const double dsig_zt = sig_zt(i, j) * (1.0 - sig_zt(i, j));
      est.logit_grad(i, j) = coeff * (c.s(i, j) - p) * in - lambda * dp_da +
                             hz.dmask(i, j) * dsig_z * dz_da - hzt.dmask(i, j) * dsig_zt * dzt_da;
    }
  }
  est.cv_residual = n ? resid / static_cast<double>(n) : 0.0;
  return detail::finish_estimate(sel, cache, std::move(est));
}

/// Plain Bernoulli draw s = 1(logit p + logit u > 0), the same convention as
/// the coupled sampler.
inline Matrix sample_bernoulli(const Matrix& logits, RngStream& rng, Matrix* probs = nullptr) {
  Matrix s(logits.rows(), logits.cols());
  if (probs) probs->resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i)
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const auto cp = detail::clamp_prob_from_logit(logits(i, j));
      s(i, j) = (cp.logit_p + logit(rng.uniform()) > 0.0) ? 1.0 : 0.0;
      if (probs) (*probs)(i, j) = cp.p;
    }
  return s;
}

namespace detail {

/// Score-function estimate with an s-independent per-instance baseline.
inline GradientEstimate score_estimate(const BernoulliSelector& sel, const MaskedLikelihood& h, const Matrix& x,
                                       std::span<const int> y, double lambda, const Vector* baseline,
                                       RngStream& rng) {
  Mlp::Cache cache;
  const Matrix logits = sel.net.logits(x, &cache);
  Matrix p;
  const Matrix s = sample_bernoulli(logits, rng, &p);
  const auto hs = h.evaluate(x, s, y, false);

  GradientEstimate est;
  est.kind = baseline ? EstimatorKind::ScoreCv : EstimatorKind::ScorePlain;
  est.s = s;
  est.h_s = hs.loglik;
  const auto n = x.rows(), d = logits.cols();
  est.logit_grad.resize(n, d);
  double resid = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double reward = hs.loglik(i) - (baseline ? (*baseline)(i) : 0.0) - lambda * s.row(i).sum();
    resid += reward * reward;
    for (Eigen::Index j = 0; j < d; ++j) {
      const bool in = p(i, j) > kSelectorProbClamp && p(i, j) < 1.0 - kSelectorProbClamp;
      est.logit_grad(i, j) = in ? reward * (s(i, j) - p(i, j)) : 0.0;
    }
  }
  est.cv_residual = n ? resid / static_cast<double>(n) : 0.0;
  return finish_estimate(sel, cache, std::move(est));
}

}  // namespace detail

/// INVASE estimate:
///   [log q_pred(y | m(x, s)) - log q_control(y | x) - lambda ||s||_0] dlog q(s).
inline GradientEstimate score_cv_gradient(const BernoulliSelector& sel, const MaskedLikelihood& h,
                                          const Mlp& control, const Matrix& x, std::span<const int> y,
                                          double lambda, RngStream& rng) {
  const Vector baseline = log_likelihood_rows(control.forward(x), y);
  return detail::score_estimate(sel, h, x, y, lambda, &baseline, rng);
}

/// Score-function estimate without any control variate (variance reference).
inline GradientEstimate score_plain_gradient(const BernoulliSelector& sel, const MaskedLikelihood& h,
                                             const Matrix& x, std::span<const int> y, double lambda,
                                             RngStream& rng) {
  return detail::score_estimate(sel, h, x, y, lambda, nullptr, rng);
}

/// Deterministic selections: p > 0.5.
inline Matrix threshold_selections(const BernoulliSelector& sel, const Matrix& x) {
  const Matrix logits = sel.net.logits(x);
  return (logits.array() > 0.0).cast<double>().matrix();
}

// ---------------------------------------------------------------------------
// Concrete top-k (L2X)

struct TopKSample {
  Matrix relaxed;  // max over the k Concrete draws
  std::vector<Matrix> draws;           // k matrices, each B x D
  std::vector<std::vector<int>> owner;  // owner[i][j]: which draw attained the max
  double tau = kDefaultTemperature;
};

/// Exactly k ones per row at the largest logits (ties: lower index first).
inline Matrix topk_hard(const Matrix& logits, int k) {
  require_dims(k >= 1 && k <= logits.cols(), "topk: k outside [1, D]");
  Matrix hard = Matrix::Zero(logits.rows(), logits.cols());
  std::vector<int> idx(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
      return logits(i, a) > logits(i, b) || (logits(i, a) == logits(i, b) && a < b);
    });
    for (int t = 0; t < k; ++t) hard(i, idx[static_cast<std::size_t>(t)]) = 1.0;
  }
  return hard;
}

inline TopKSample sample_topk_from_logits(const Matrix& logits, int k, double tau, RngStream& rng) {
  require_dims(k >= 1 && k <= logits.cols(), "topk: k outside [1, D]");
  TopKSample out;
  out.tau = tau;
  const auto n = logits.rows(), d = logits.cols();
  out.relaxed = Matrix::Zero(n, d);
  out.owner.assign(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(d), 0));
  for (int j = 0; j < k; ++j) {
    Matrix g(n, d);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = -std::log(-std::log(rng.uniform()));
    out.draws.push_back(softmax_rows((logits + g) / tau));
  }
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index f = 0; f < d; ++f) {
      int best = 0;
      for (int j = 1; j < k; ++j)
        if (out.draws[static_cast<std::size_t>(j)](i, f) > out.draws[static_cast<std::size_t>(best)](i, f)) best = j;
      out.owner[static_cast<std::size_t>(i)][static_cast<std::size_t>(f)] = best;
      out.relaxed(i, f) = out.draws[static_cast<std::size_t>(best)](i, f);
    }
  return out;
}

struct TopKResult {
  Matrix relaxed;
  Matrix hard;
};

/// Relaxed mask for training and the deterministic top-k mask for evaluation.
inline TopKResult sample_topk(const ConcreteTopK& sel, const Matrix& x, RngStream& rng) {
  const Matrix logits = sel.net.logits(x);
  return {sample_topk_from_logits(logits, sel.k, sel.tau, rng).relaxed, topk_hard(logits, sel.k)};
}

/// Pathwise gradient: d/d(logits) given d/d(relaxed mask).
inline Matrix topk_logit_grad(const TopKSample& sample, const Matrix& drelaxed) {
  const auto n = drelaxed.rows(), d = drelaxed.cols();
  Matrix dlogits = Matrix::Zero(n, d);
  RowVector up(d);
  for (std::size_t j = 0; j < sample.draws.size(); ++j) {
    const Matrix& c = sample.draws[j];
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index f = 0; f < d; ++f)
        up(f) = sample.owner[static_cast<std::size_t>(i)][static_cast<std::size_t>(f)] == static_cast<int>(j)
                    ? drelaxed(i, f)
                    : 0.0;
      const double dot = c.row(i).dot(up);
      dlogits.row(i) += (c.row(i).array() * (up.array() - dot)).matrix() / sample.tau;
    }
  }
  return dlogits;
}

}  // namespace amortix
