#pragma once

#include "amortix/adam.hpp"
#include "amortix/datasets.hpp"
#include "amortix/loss.hpp"
#include "amortix/masking.hpp"
#include "amortix/metrics.hpp"
#include "amortix/mlp.hpp"
#include "amortix/rng.hpp"
#include "amortix/selection.hpp"
#include "amortix/training.hpp"

#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace amortix {

enum class MethodId : std::uint8_t { Full, EvalX, RealX, RealXStep, L2X, Invase, NotRealX };

inline const char* method_name(MethodId m) {
  switch (m) {
    case MethodId::Full: return "full";
    case MethodId::EvalX: return "evalx";
    case MethodId::RealX: return "realx";
    case MethodId::RealXStep: return "realx-step";
    case MethodId::L2X: return "l2x";
    case MethodId::Invase: return "invase";
    case MethodId::NotRealX: return "notrealx";
  }
  return "?";
}

inline std::optional<MethodId> parse_method(const std::string& s) {
  for (auto m : {MethodId::Full, MethodId::EvalX, MethodId::RealX, MethodId::RealXStep, MethodId::L2X,
                 MethodId::Invase, MethodId::NotRealX})
    if (s == method_name(m)) return m;
  return std::nullopt;
}

inline bool uses_lambda(MethodId m) {
  return m == MethodId::RealX || m == MethodId::RealXStep || m == MethodId::Invase || m == MethodId::NotRealX;
}

inline bool has_selector(MethodId m) { return uses_lambda(m) || m == MethodId::L2X; }

/// How lambda multiplies ||s||_0 in the training objective. Mean divides by D
/// so one lambda grid carries across feature counts.
enum class PenaltyNorm : std::uint8_t { Sum, Mean };

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct MethodConfig {
  MethodId method = MethodId::RealX;
  std::optional<double> lambda;
  std::optional<int> k;
  double lr = 1e-4;
  std::optional<double> selector_lr;  // defaults to lr
  int batch = 100;
  int epochs = 1000;    // training steps T, in epochs
  int patience = 20;    // for the converge-style phases
  std::uint64_t seed = 0;
  std::vector<int> selector_hidden{200, 200, 200};
  std::vector<int> predictor_hidden{200, 200};
  double tau = kDefaultTemperature;
  PenaltyNorm penalty = PenaltyNorm::Mean;
  bool sampled_eval = false;       // Bernoulli selectors: sample instead of thresholding at 0.5
  bool control_pretrained = false;  // INVASE: fit q_control first instead of alongside
  double selector_bias = 0.0;       // initial output logit of Bernoulli selectors
  int eval_every = 10;

  MaskScheme scheme() const {
    return method == MethodId::L2X ? MaskScheme::Multiplicative : MaskScheme::HardToken;
  }

  void validate() const {
    if (uses_lambda(method)) {
      if (!lambda || k) throw ConfigError(std::string(method_name(method)) + " takes --lambda and no --k");
      if (*lambda < 0) throw ConfigError("lambda must be non-negative");
    } else if (method == MethodId::L2X) {
      if (!k || lambda) throw ConfigError("l2x takes --k and no --lambda");
      if (*k < 1) throw ConfigError("k must be >= 1");
    } else if (lambda || k) {
      throw ConfigError(std::string(method_name(method)) + " takes neither lambda nor k");
    }
    if (selector_lr && *selector_lr <= 0) throw ConfigError("selector_lr must be positive");
    if (lr <= 0 || batch < 1 || epochs < 1) throw ConfigError("lr, batch and epochs must be positive");
    if (tau <= 0) throw ConfigError("tau must be positive");
  }

  double selector_step() const { return selector_lr.value_or(lr); }

  double penalty_weight(int d) const {
    const double l = lambda.value_or(0.0);
    return penalty == PenaltyNorm::Mean ? l / d : l;
  }

  /// Stable key=value text; the config hash is taken over this.
  std::string serialize() const {
    std::ostringstream o;
    o << std::setprecision(17);
    o << "method=" << method_name(method) << '\n';
    if (lambda) o << "lambda=" << *lambda << '\n';
    if (k) o << "k=" << *k << '\n';
    o << "lr=" << lr << '\n';
    if (selector_lr) o << "selector_lr=" << *selector_lr << '\n';
    o << "batch=" << batch << '\n' << "epochs=" << epochs << '\n';
    o << "patience=" << patience << '\n' << "seed=" << seed << '\n';
    auto list = [&](const char* key, const std::vector<int>& v) {
      o << key << '=';
      for (std::size_t i = 0; i < v.size(); ++i) o << (i ? "," : "") << v[i];
      o << '\n';
    };
    list("selector_hidden", selector_hidden);
    list("predictor_hidden", predictor_hidden);
    o << "tau=" << tau << '\n' << "penalty=" << (penalty == PenaltyNorm::Mean ? "mean" : "sum") << '\n';
    o << "sampled_eval=" << sampled_eval << '\n' << "control_pretrained=" << control_pretrained << '\n';
    o << "eval_every=" << eval_every << '\n' << "selector_bias=" << selector_bias << '\n';
    return o.str();
  }

  static MethodConfig parse(const std::string& text) {
    MethodConfig c;
    std::istringstream in(text);
    std::string line;
    auto ints = [](const std::string& v) {
      std::vector<int> out;
      std::stringstream ss(v);
      std::string t;
      while (std::getline(ss, t, ','))
        if (!t.empty()) out.push_back(std::stoi(t));
      return out;
    };
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq), v = line.substr(eq + 1);
      if (key == "method") {
        auto m = parse_method(v);
        if (!m) throw ConfigError("unknown method " + v);
        c.method = *m;
      } else if (key == "lambda") c.lambda = std::stod(v);
      else if (key == "k") c.k = std::stoi(v);
      else if (key == "lr") c.lr = std::stod(v);
      else if (key == "selector_lr") c.selector_lr = std::stod(v);
      else if (key == "batch") c.batch = std::stoi(v);
      else if (key == "epochs") c.epochs = std::stoi(v);
      else if (key == "patience") c.patience = std::stoi(v);
      else if (key == "seed") c.seed = std::stoull(v);
      else if (key == "selector_hidden") c.selector_hidden = ints(v);
      else if (key == "predictor_hidden") c.predictor_hidden = ints(v);
      else if (key == "tau") c.tau = std::stod(v);
      else if (key == "penalty") c.penalty = v == "sum" ? PenaltyNorm::Sum : PenaltyNorm::Mean;
      else if (key == "sampled_eval") c.sampled_eval = v == "1";
      else if (key == "control_pretrained") c.control_pretrained = v == "1";
      else if (key == "eval_every") c.eval_every = std::stoi(v);
      else if (key == "selector_bias") c.selector_bias = std::stod(v);
    }
    return c;
  }

  std::string hash() const {
    const std::string s = serialize();
    std::ostringstream o;
    o << std::hex << std::setw(16) << std::setfill('0') << detail::mix64(detail::fnv1a(s));
    return o.str();
  }
};

inline std::vector<int> chain_widths(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

/// EVAL-X evaluator: q(y | m(x, r)) trained on uniformly random r.
struct Evaluator {
  Mlp net;
  MaskScheme scheme = MaskScheme::HardToken;
  int features = 0;

  Matrix predict(const Matrix& x, const Matrix& masks) const { return net.forward(encode_masked(scheme, x, masks)); }
};

struct CurveRow {
  int epoch = 0;
  double train_objective = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  double mean_selected = std::numeric_limits<double>::quiet_NaN();
};

struct DiagnosticRow {
  std::uint64_t step = 0;
  double grad_norm = 0.0;
  double cv_residual = 0.0;
};

/// Instrumentation for the disjointness property.
struct TrainingCounters {
  std::uint64_t predictor_updates = 0;
  std::uint64_t selector_updates = 0;
  std::uint64_t predictor_selector_bytes = 0;  // selector output bytes consumed by predictor updates
  std::uint64_t rejected_steps = 0;
};

struct TrainedExplainer {
  MethodConfig config;
  int features = 0;
  int classes = 2;
  std::optional<BernoulliSelector> bernoulli;
  std::optional<ConcreteTopK> topk;
  Mlp predictor;
  std::optional<Mlp> control;
  std::vector<CurveRow> curve;
  std::vector<DiagnosticRow> diagnostics;
  TrainingCounters counters;

  /// Binary selections used for reporting.
  Matrix select(const Matrix& x, RngStream* sample_rng = nullptr) const {
    if (bernoulli) {
      if (config.sampled_eval && sample_rng) return sample_bernoulli(bernoulli->net.logits(x), *sample_rng);
      return threshold_selections(*bernoulli, x);
    }
    if (topk) return topk_hard(topk->net.logits(x), topk->k);
    return Matrix::Ones(x.rows(), x.cols());
  }

  Matrix selection_probabilities(const Matrix& x) const {
    if (bernoulli) return bernoulli->net.forward(x);
    return select(x);
  }

  Matrix predict(const Matrix& x, const Matrix& masks) const {
    if (config.method == MethodId::Full) return predictor.forward(x);
    return predictor.forward(encode_masked(config.scheme(), x, masks));
  }
};

namespace detail {

inline Matrix random_half_masks(Eigen::Index n, Eigen::Index d, RngStream& rng) {
  Matrix r(n, d);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
  return r;
}

inline void negate(ParamSet& g) { scale(g, -1.0); }

/// One cross-entropy Adam step; returns the batch loss or NaN on rejection.
inline double predictor_step(Mlp& net, AdamState& adam, const Matrix& input, const std::vector<int>& y,
                             TrainingCounters& counters) {
  Mlp::Cache cache;
  const Matrix probs = net.apply_head(net.logits(input, &cache));
  const auto ce = cross_entropy(probs, y);
  auto g = net.zeros_like();
  net.backward(cache, ce.dlogits, &g);
  if (adam.step(net, g)) {
    ++counters.rejected_steps;
    return std::numeric_limits<double>::quiet_NaN();
  }
  ++counters.predictor_updates;
  return ce.loss;
}

class RejectionGuard {
 public:
  void record(bool ok) {
    consecutive_ = ok ? 0 : consecutive_ + 1;
    if (consecutive_ > 10) throw TrainingAborted("more than 10 consecutive rejected selector steps");
  }

 private:
  int consecutive_ = 0;
};

struct Streams {
  explicit Streams(std::uint64_t seed)
      : init(seed, "init"), shuffle(seed, "shuffle"), selector(seed, "selector-sampling"), r(seed, "r-sampling"),
        val(seed, "validation-masks") {}
  RngStream init, shuffle, selector, r, val;
};

inline void log_curve(TrainedExplainer& te, const Dataset& val, int epoch, double objective) {
  CurveRow row{epoch, objective};
  if (val.size() > 0) {
    const Matrix masks = te.select(val.x);
    const Matrix probs = te.predict(val.x, masks);
    row.val_loss = cross_entropy(probs, val.y).loss;
    row.val_acc = accuracy(probs, val.y);
    row.mean_selected = mean_selection_size(masks);
  }
  te.curve.push_back(row);
}

inline bool curve_due(const MethodConfig& c, int epoch) {
  return epoch == c.epochs || (c.eval_every > 0 && epoch % c.eval_every == 0);
}

}  // namespace detail

/// EVAL-X: maximize E_r~B(0.5) log q(y | m(x, r)) until validation loss stalls.
inline Evaluator train_evalx(const Dataset& train, const Dataset& val, const MethodConfig& cfg,
                             FitResult* fit_out = nullptr) {
  const int d = train.features();
  detail::Streams rs(cfg.seed);
  auto init = rs.init.substream("evaluator");
  Evaluator ev{Mlp::he_uniform(chain_widths(2 * d, cfg.predictor_hidden, train.num_classes), Head::Softmax, init),
               MaskScheme::HardToken, d};
  const Matrix val_inputs = encode_masked(ev.scheme, val.x, detail::random_half_masks(val.x.rows(), d, rs.val));
  FitOptions opt{{cfg.lr}, cfg.batch, cfg.epochs, cfg.patience};
  auto fit = fit_classifier(
      ev.net, train,
      [&](const Matrix& x, RngStream& rng) { return encode_masked(ev.scheme, x, detail::random_half_masks(x.rows(), d, rng)); },
      opt, rs.shuffle, rs.r, val.size() ? &val_inputs : nullptr, &val.y);
  if (fit.diverged && fit.epochs_run == 0) throw TrainingAborted("evalx diverged before the first epoch");
  if (fit_out) *fit_out = std::move(fit);
  return ev;
}

/// FULL: the same predictor architecture on raw, unmasked features.
inline TrainedExplainer train_full(const Dataset& train, const Dataset& val, const MethodConfig& cfg) {
  TrainedExplainer te;
  te.config = cfg;
  te.config.method = MethodId::Full;
  te.features = train.features();
  te.classes = train.num_classes;
  detail::Streams rs(cfg.seed);
  auto init = rs.init.substream("predictor");
  te.predictor = Mlp::he_uniform(chain_widths(te.features, cfg.predictor_hidden, te.classes), Head::Softmax, init);
  FitOptions opt{{cfg.lr}, cfg.batch, cfg.epochs, cfg.patience};
  auto fit = fit_classifier(
      te.predictor, train, [](const Matrix& x, RngStream&) { return x; }, opt, rs.shuffle, rs.r, val.size() ? &val.x : nullptr, &val.y);
  for (const auto& e : fit.curve) te.curve.push_back({e.epoch, -e.train_loss, e.val_loss, e.val_acc, 1.0 * te.features});
  return te;
}

namespace detail {

inline TrainedExplainer init_bernoulli_explainer(const Dataset& train, const MethodConfig& cfg, Streams& rs) {
  TrainedExplainer te;
  te.config = cfg;
  te.features = train.features();
  te.classes = train.num_classes;
  auto sel_init = rs.init.substream("selector");
  auto pred_init = rs.init.substream("predictor");
  te.bernoulli = BernoulliSelector{
      Mlp::he_uniform(chain_widths(te.features, cfg.selector_hidden, te.features), Head::Sigmoid, sel_init), cfg.tau};
  te.bernoulli->net.layers().back().bias.setConstant(cfg.selector_bias);
  te.predictor =
      Mlp::he_uniform(chain_widths(2 * te.features, cfg.predictor_hidden, te.classes), Head::Softmax, pred_init);
  return te;
}

inline double batch_objective(const GradientEstimate& est, double penalty) {
  if (est.h_s.size() == 0) return 0.0;
  return est.h_s.mean() - penalty * est.s.sum() / static_cast<double>(est.s.rows());
}

/// Applies an ascent estimate to the selector, with rejection bookkeeping.
inline void apply_selector_estimate(TrainedExplainer& te, AdamState& adam, GradientEstimate& est,
                                    RejectionGuard& guard) {
  bool ok = est.finite;
  if (ok) {
    const double norm = std::sqrt(squared_norm(est.grads));
    negate(est.grads);
    ok = !adam.step(te.bernoulli->net, est.grads);
    if (ok) te.diagnostics.push_back({te.counters.selector_updates + 1, norm, est.cv_residual});
  }
  if (ok)
    ++te.counters.selector_updates;
  else
    ++te.counters.rejected_steps;
  guard.record(ok);
}

inline RngStream batch_stream(const RngStream& parent, int epoch, int b) {
  return parent.substream(std::to_string(epoch) + "/" + std::to_string(b));
}

}  // namespace detail

/// Where the predictor's training masks come from in the REBAR family.
enum class PredictorMaskSource : std::uint8_t { RandomHalf, SelectorSamples };

/// REAL-X and its JAM ablation. Per mini-batch the predictor takes a step on
/// `source` masks and the selector takes a REBAR step; both gradients are
/// evaluated at the parameters from the start of the batch.
inline TrainedExplainer train_rebar_family(const Dataset& train, const Dataset& val, const MethodConfig& cfg,
                                           PredictorMaskSource source) {
  cfg.validate();
  detail::Streams rs(cfg.seed);
  TrainedExplainer te = detail::init_bernoulli_explainer(train, cfg, rs);
  const double penalty = cfg.penalty_weight(te.features);
  AdamState sel_adam(te.bernoulli->net, {cfg.selector_step()});
  AdamState pred_adam(te.predictor, {cfg.lr});
  BatchSchedule sched(train.size(), cfg.batch);
  detail::RejectionGuard guard;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    sched.reshuffle(rs.shuffle);
    double objective = 0.0;
    for (int b = 0; b < sched.batches(); ++b) {
      const auto idx = sched.batch(b);
      const Matrix xb = rows_of(train.x, idx);
      const auto yb = labels_of(train.y, idx);

      auto est_rng = detail::batch_stream(rs.selector, epoch, b);
      auto est = rebar_gradient(*te.bernoulli, MaskedLikelihood{te.predictor, MaskScheme::HardToken}, xb, yb,
                                penalty, est_rng);
      objective += detail::batch_objective(est, penalty) * static_cast<double>(idx.size());

      Matrix masks;
      if (source == PredictorMaskSource::RandomHalf) {
        masks = detail::random_half_masks(xb.rows(), te.features, rs.r);
      } else {
        auto s_rng = est_rng.substream("predictor-masks");
        masks = sample_bernoulli(te.bernoulli->net.logits(xb), s_rng);
        te.counters.predictor_selector_bytes += static_cast<std::uint64_t>(masks.size());
      }
      detail::predictor_step(te.predictor, pred_adam, encode_masked(MaskScheme::HardToken, xb, masks), yb,
                             te.counters);
      detail::apply_selector_estimate(te, sel_adam, est, guard);
    }
    if (detail::curve_due(cfg, epoch)) detail::log_curve(te, val, epoch, objective / train.size());
  }
  return te;
}

inline TrainedExplainer train_realx(const Dataset& train, const Dataset& val, MethodConfig cfg) {
  cfg.method = MethodId::RealX;
  return train_rebar_family(train, val, cfg, PredictorMaskSource::RandomHalf);
}

inline TrainedExplainer train_notrealx(const Dataset& train, const Dataset& val, MethodConfig cfg) {
  cfg.method = MethodId::NotRealX;
  return train_rebar_family(train, val, cfg, PredictorMaskSource::SelectorSamples);
}

/// REAL-X-STEP: the predictor is fit to convergence on random masks first,
/// then the selector is trained for `epochs` against the frozen predictor.
inline TrainedExplainer train_realx_step(const Dataset& train, const Dataset& val, MethodConfig cfg) {
  cfg.method = MethodId::RealXStep;
  cfg.validate();
  detail::Streams rs(cfg.seed);
  TrainedExplainer te = detail::init_bernoulli_explainer(train, cfg, rs);
  const int d = te.features;
  const Matrix val_inputs = encode_masked(MaskScheme::HardToken, val.x, detail::random_half_masks(val.x.rows(), d, rs.val));
  FitOptions opt{{cfg.lr}, cfg.batch, 1000, cfg.patience};
  auto fit = fit_classifier(
      te.predictor, train,
      [&](const Matrix& x, RngStream& rng) {
        return encode_masked(MaskScheme::HardToken, x, detail::random_half_masks(x.rows(), d, rng));
      },
      opt, rs.shuffle.substream("predictor-phase"), rs.r, val.size() ? &val_inputs : nullptr, &val.y);
  if (fit.diverged && fit.epochs_run == 0) throw TrainingAborted("realx-step predictor phase diverged");
  te.counters.predictor_updates += static_cast<std::uint64_t>(fit.epochs_run) *
                                   static_cast<std::uint64_t>(BatchSchedule(train.size(), cfg.batch).batches());

  const double penalty = cfg.penalty_weight(d);
  AdamState sel_adam(te.bernoulli->net, {cfg.selector_step()});
  BatchSchedule sched(train.size(), cfg.batch);
  detail::RejectionGuard guard;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    sched.reshuffle(rs.shuffle);
    double objective = 0.0;
    for (int b = 0; b < sched.batches(); ++b) {
      const auto idx = sched.batch(b);
      const Matrix xb = rows_of(train.x, idx);
      auto est_rng = detail::batch_stream(rs.selector, epoch, b);
      auto est = rebar_gradient(*te.bernoulli, MaskedLikelihood{te.predictor, MaskScheme::HardToken}, xb,
                                labels_of(train.y, idx), penalty, est_rng);
      objective += detail::batch_objective(est, penalty) * static_cast<double>(idx.size());
      detail::apply_selector_estimate(te, sel_adam, est, guard);
    }
    if (detail::curve_due(cfg, epoch)) detail::log_curve(te, val, epoch, objective / train.size());
  }
  return te;
}

/// L2X: joint reparameterized ascent of log q(y | x * s) through the
/// Concrete top-k relaxation.
inline TrainedExplainer train_l2x(const Dataset& train, const Dataset& val, MethodConfig cfg) {
  cfg.method = MethodId::L2X;
  cfg.validate();
  if (*cfg.k > train.features()) throw ConfigError("k exceeds the number of features");
  detail::Streams rs(cfg.seed);
  TrainedExplainer te;
  te.config = cfg;
  te.features = train.features();
  te.classes = train.num_classes;
  auto sel_init = rs.init.substream("selector");
  auto pred_init = rs.init.substream("predictor");
  te.topk = ConcreteTopK{
      Mlp::he_uniform(chain_widths(te.features, cfg.selector_hidden, te.features), Head::Linear, sel_init), *cfg.k,
      cfg.tau};
  te.predictor = Mlp::he_uniform(chain_widths(te.features, cfg.predictor_hidden, te.classes), Head::Softmax, pred_init);
  AdamState sel_adam(te.topk->net, {cfg.selector_step()});
  AdamState pred_adam(te.predictor, {cfg.lr});
  BatchSchedule sched(train.size(), cfg.batch);
  detail::RejectionGuard guard;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    sched.reshuffle(rs.shuffle);
    double objective = 0.0;
    for (int b = 0; b < sched.batches(); ++b) {
      const auto idx = sched.batch(b);
      const Matrix xb = rows_of(train.x, idx);
      const auto yb = labels_of(train.y, idx);
      auto rng = detail::batch_stream(rs.selector, epoch, b);

      Mlp::Cache sel_cache, pred_cache;
      const Matrix logits = te.topk->net.logits(xb, &sel_cache);
      const TopKSample sample = sample_topk_from_logits(logits, te.topk->k, te.topk->tau, rng);
      const Matrix input = encode_masked(MaskScheme::Multiplicative, xb, sample.relaxed);
      const Matrix probs = te.predictor.apply_head(te.predictor.logits(input, &pred_cache));
      const auto ce = cross_entropy(probs, yb);
      objective -= ce.loss * static_cast<double>(idx.size());

      auto pred_grads = te.predictor.zeros_like();
      const Matrix dinput = te.predictor.backward(pred_cache, ce.dlogits, &pred_grads, true);
      const Matrix dmask = encode_masked_grad(MaskScheme::Multiplicative, xb, dinput);
      auto sel_grads = te.topk->net.zeros_like();
      te.topk->net.backward(sel_cache, topk_logit_grad(sample, dmask), &sel_grads);

      const bool ok = std::isfinite(ce.loss) && !sel_adam.step(te.topk->net, sel_grads);
      if (ok && !pred_adam.step(te.predictor, pred_grads)) {
        ++te.counters.predictor_updates;
        ++te.counters.selector_updates;
      } else {
        ++te.counters.rejected_steps;
      }
      guard.record(ok);
    }
    if (detail::curve_due(cfg, epoch)) detail::log_curve(te, val, epoch, objective / train.size());
  }
  return te;
}

/// INVASE: predictor and control net ascend their log-likelihoods while the
/// selector follows the score-function estimate with the control baseline.
inline TrainedExplainer train_invase(const Dataset& train, const Dataset& val, MethodConfig cfg) {
  cfg.method = MethodId::Invase;
  cfg.validate();
  detail::Streams rs(cfg.seed);
  TrainedExplainer te = detail::init_bernoulli_explainer(train, cfg, rs);
  auto ctl_init = rs.init.substream("control");
  te.control = Mlp::he_uniform(chain_widths(te.features, cfg.predictor_hidden, te.classes), Head::Softmax, ctl_init);
  if (cfg.control_pretrained) {
    FitOptions opt{{cfg.lr}, cfg.batch, 1000, cfg.patience};
    fit_classifier(
        *te.control, train, [](const Matrix& x, RngStream&) { return x; }, opt, rs.shuffle.substream("control"),
        rs.r, val.size() ? &val.x : nullptr, &val.y);
  }
  const double penalty = cfg.penalty_weight(te.features);
  AdamState sel_adam(te.bernoulli->net, {cfg.selector_step()});
  AdamState pred_adam(te.predictor, {cfg.lr});
  AdamState ctl_adam(*te.control, {cfg.lr});
  BatchSchedule sched(train.size(), cfg.batch);
  detail::RejectionGuard guard;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    sched.reshuffle(rs.shuffle);
    double objective = 0.0;
    for (int b = 0; b < sched.batches(); ++b) {
      const auto idx = sched.batch(b);
      const Matrix xb = rows_of(train.x, idx);
      const auto yb = labels_of(train.y, idx);
      auto rng = detail::batch_stream(rs.selector, epoch, b);

      auto est = score_cv_gradient(*te.bernoulli, MaskedLikelihood{te.predictor, MaskScheme::HardToken}, *te.control,
                                   xb, yb, penalty, rng);
      objective += detail::batch_objective(est, penalty) * static_cast<double>(idx.size());

      auto s_rng = rng.substream("predictor-masks");
      const Matrix masks = sample_bernoulli(te.bernoulli->net.logits(xb), s_rng);
      te.counters.predictor_selector_bytes += static_cast<std::uint64_t>(masks.size());
      detail::predictor_step(te.predictor, pred_adam, encode_masked(MaskScheme::HardToken, xb, masks), yb,
                             te.counters);
      if (!cfg.control_pretrained) {
        TrainingCounters scratch;
        detail::predictor_step(*te.control, ctl_adam, xb, yb, scratch);
        te.counters.rejected_steps += scratch.rejected_steps;
      }
      detail::apply_selector_estimate(te, sel_adam, est, guard);
    }
    if (detail::curve_due(cfg, epoch)) detail::log_curve(te, val, epoch, objective / train.size());
  }
  return te;
}

/// Dispatches on cfg.method. EVAL-X is trained through train_evalx instead.
inline TrainedExplainer train_method(const Dataset& train, const Dataset& val, const MethodConfig& cfg) {
  switch (cfg.method) {
    case MethodId::Full: return train_full(train, val, cfg);
    case MethodId::RealX: return train_realx(train, val, cfg);
    case MethodId::RealXStep: return train_realx_step(train, val, cfg);
    case MethodId::L2X: return train_l2x(train, val, cfg);
    case MethodId::Invase: return train_invase(train, val, cfg);
    case MethodId::NotRealX: return train_notrealx(train, val, cfg);
    case MethodId::EvalX: break;
  }
  throw ConfigError("evalx is an evaluator, not an explainer; use train_evalx");
}

// ---------------------------------------------------------------------------
// Hyperparameter selection

enum class SelectionRule : std::uint8_t { MaxValAccuracy, WithinFivePoints };

struct SweepEntry {
  MethodConfig config;
  double val_acc = 0.0;
  double val_loss = 0.0;
  double mean_selected = 0.0;
};

struct SweepChoice {
  std::size_t index = 0;
  bool fallback = false;  // the 5-point rule had no admissible config
};

/// Sparser first: larger lambda, smaller k.
inline bool sparser(const MethodConfig& a, const MethodConfig& b) {
  if (a.k && b.k) return *a.k < *b.k;
  return a.lambda.value_or(0.0) > b.lambda.value_or(0.0);
}

inline bool same_sparsity(const MethodConfig& a, const MethodConfig& b) { return !sparser(a, b) && !sparser(b, a); }

inline SweepChoice choose_config(const std::vector<SweepEntry>& entries, SelectionRule rule, double full_val_acc = 0.0) {
  if (entries.empty()) throw ConfigError("empty sweep");
  auto argmax_acc = [&] {
    std::size_t best = 0;
    for (std::size_t i = 1; i < entries.size(); ++i)
      if (entries[i].val_acc > entries[best].val_acc ||
          (entries[i].val_acc == entries[best].val_acc && entries[i].val_loss < entries[best].val_loss))
        best = i;
    return best;
  };
  if (rule == SelectionRule::MaxValAccuracy) return {argmax_acc(), false};
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].val_acc < full_val_acc - 0.05) continue;
    if (!best || sparser(entries[i].config, entries[*best].config) ||
        (same_sparsity(entries[i].config, entries[*best].config) && entries[i].val_loss < entries[*best].val_loss))
      best = i;
  }
  if (best) return {*best, false};
  return {argmax_acc(), true};
}

struct SweepResult {
  std::vector<SweepEntry> entries;
  SweepChoice choice;
  TrainedExplainer chosen;
};

inline SweepEntry summarize_validation(const TrainedExplainer& te, const Dataset& val) {
  SweepEntry e{te.config};
  const Matrix masks = te.select(val.x);
  const Matrix probs = te.predict(val.x, masks);
  e.val_acc = accuracy(probs, val.y);
  e.val_loss = cross_entropy(probs, val.y).loss;
  e.mean_selected = mean_selection_size(masks);
  return e;
}

/// Trains every config in order and keeps the one the rule picks.
inline SweepResult sweep_and_select(const Dataset& train, const Dataset& val, const std::vector<MethodConfig>& grid,
                                    SelectionRule rule, double full_val_acc = 0.0) {
  SweepResult res;
  std::vector<TrainedExplainer> models;
  for (const auto& cfg : grid) {
    models.push_back(train_method(train, val, cfg));
    res.entries.push_back(summarize_validation(models.back(), val));
  }
  res.choice = choose_config(res.entries, rule, full_val_acc);
  res.chosen = std::move(models[res.choice.index]);
  return res;
}

}  // namespace amortix
