#pragma once

#include "amortix/datasets.hpp"
#include "amortix/masking.hpp"
#include "amortix/methods.hpp"
#include "amortix/metrics.hpp"
#include "amortix/training.hpp"

#include <cstdint>
#include <future>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace amortix {

struct AuditRefused : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct AuditResult {
  double e_acc = 0.0;
  std::optional<double> e_auroc;
  Matrix probs;
};

/// Scores fixed masks with a frozen evaluator. The evaluator is taken by
/// const reference: auditing can never update it.
inline AuditResult audit_with_evalx(const Evaluator& evaluator, const Dataset& test, const Matrix& masks,
                                    MaskScheme scheme = MaskScheme::HardToken) {
  if (scheme != evaluator.scheme)
    throw AuditRefused(std::string("evaluator uses ") + scheme_name(evaluator.scheme) + " masking, masks are " +
                       scheme_name(scheme));
  if (test.features() != evaluator.features) throw AuditRefused("evaluator feature space differs from the dataset");
  require_dims(masks.rows() == test.x.rows() && masks.cols() == test.x.cols(), "audit: mask shape");
  AuditResult r;
  r.probs = evaluator.predict(test.x, masks);
  r.e_acc = accuracy(r.probs, test.y);
  r.e_auroc = auroc_probs(r.probs, test.y);
  return r;
}

// ---------------------------------------------------------------------------
// Per-subset model collection

using SubsetKey = std::uint32_t;  // bit j set = feature j revealed

inline SubsetKey subset_key(const Matrix& masks, Eigen::Index row) {
  SubsetKey k = 0;
  for (Eigen::Index j = 0; j < masks.cols(); ++j)
    if (masks(row, j) > 0.5) k |= SubsetKey{1} << j;
  return k;
}

inline std::vector<int> subset_features(SubsetKey key, int d) {
  std::vector<int> f;
  for (int j = 0; j < d; ++j)
    if (key >> j & 1U) f.push_back(j);
  return f;
}

inline Matrix restrict_columns(const Matrix& x, const std::vector<int>& cols) {
  Matrix out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = x.col(cols[c]);
  return out;
}

enum class CoveragePolicy : std::uint8_t { Exhaustive, OnDemand };

struct OracleOptions {
  CoveragePolicy policy = CoveragePolicy::Exhaustive;
  std::vector<int> hidden{200, 200};
  FitOptions fit{{1e-3}, 100, 200, 20};
  std::size_t max_models = 0;            // 0 = no budget
  std::vector<SubsetKey> requested;      // on-demand: subsets realized in audited masks
  std::size_t random_controls = 0;       // on-demand: extra uniformly random subsets
  int threads = 1;
  std::uint64_t seed = 0;
};

/// One model per feature subset, each trained on x restricted to the subset.
/// The empty subset is a class-marginal model.
struct SubsetOracle {
  int features = 0;
  int classes = 2;
  std::map<SubsetKey, Mlp> models;
  RowVector marginal;
  std::vector<SubsetKey> uncovered;

  bool covers(SubsetKey k) const { return k == 0 || models.count(k) > 0; }

  /// Class probabilities for one instance from its own subset's model.
  std::optional<RowVector> predict_row(const Matrix& x, Eigen::Index row, SubsetKey k) const {
    if (k == 0) return marginal;
    auto it = models.find(k);
    if (it == models.end()) return std::nullopt;
    const Matrix xi = restrict_columns(x.row(row), subset_features(k, features));
    return RowVector(it->second.forward(xi).row(0));
  }
};

inline SubsetOracle build_subset_oracle(const Dataset& train, const Dataset& val, const OracleOptions& opt) {
  const int d = train.features();
  SubsetOracle oracle;
  oracle.features = d;
  oracle.classes = train.num_classes;
  oracle.marginal = RowVector::Zero(train.num_classes);
  for (int y : train.y) oracle.marginal(y) += 1.0;
  oracle.marginal /= std::max(1, train.size());

  std::vector<SubsetKey> wanted;
  if (opt.policy == CoveragePolicy::Exhaustive) {
    if (d > 14) throw ConfigError("exhaustive oracle needs D <= 14");
    for (SubsetKey k = 1; k < (SubsetKey{1} << d); ++k) wanted.push_back(k);
  } else {
    if (d > 31) throw ConfigError("subset oracle supports D <= 31");
    std::vector<SubsetKey> keys = opt.requested;
    RngStream rng(opt.seed, "oracle-controls");
    for (std::size_t i = 0; i < opt.random_controls; ++i) keys.push_back(static_cast<SubsetKey>(rng.below(SubsetKey{1} << d)));
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    for (SubsetKey k : keys)
      if (k != 0) wanted.push_back(k);
  }
  if (opt.max_models && wanted.size() > opt.max_models) {
    oracle.uncovered.assign(wanted.begin() + static_cast<std::ptrdiff_t>(opt.max_models), wanted.end());
    wanted.resize(opt.max_models);
  }

  auto train_one = [&](SubsetKey k) {
    const auto cols = subset_features(k, d);
    Dataset sub = train;
    sub.x = restrict_columns(train.x, cols);
    const Matrix vx = restrict_columns(val.x, cols);
    RngStream base(opt.seed, "oracle/" + std::to_string(k));
    auto init = base.substream("init");
    Mlp net = Mlp::he_uniform(chain_widths(static_cast<int>(cols.size()), opt.hidden, train.num_classes), Head::Softmax,
                              init);
    fit_classifier(
        net, sub, [](const Matrix& x, RngStream&) { return x; }, opt.fit, base.substream("shuffle"),
        base.substream("unused"), val.size() ? &vx : nullptr, &val.y);
    return net;
  };

  // Models are independent; results are gathered in subset order.
  const std::size_t workers = static_cast<std::size_t>(std::max(1, opt.threads));
  for (std::size_t lo = 0; lo < wanted.size(); lo += workers) {
    const std::size_t hi = std::min(wanted.size(), lo + workers);
    std::vector<std::future<Mlp>> jobs;
    for (std::size_t i = lo; i < hi; ++i)
      jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, train_one, wanted[i]));
    for (std::size_t i = lo; i < hi; ++i) oracle.models.emplace(wanted[i], jobs[i - lo].get());
  }
  return oracle;
}

struct OracleScore {
  std::optional<double> c_auroc;
  std::size_t excluded = 0;
};

/// AUROC with every instance scored by the model of its own mask's subset.
inline OracleScore c_auroc(const SubsetOracle& oracle, const Dataset& test, const Matrix& masks) {
  require_dims(masks.rows() == test.x.rows() && masks.cols() == oracle.features, "c_auroc: mask shape");
  OracleScore out;
  std::vector<Eigen::Index> kept;
  std::vector<RowVector> rows;
  for (Eigen::Index i = 0; i < test.x.rows(); ++i) {
    auto p = oracle.predict_row(test.x, i, subset_key(masks, i));
    if (!p) {
      ++out.excluded;
      continue;
    }
    kept.push_back(i);
    rows.push_back(*p);
  }
  Matrix probs(static_cast<Eigen::Index>(rows.size()), oracle.classes);
  std::vector<int> labels;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    probs.row(static_cast<Eigen::Index>(r)) = rows[r];
    labels.push_back(test.y[static_cast<std::size_t>(kept[r])]);
  }
  out.c_auroc = auroc_probs(probs, labels);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
  std::string method;
  std::string dataset;
  std::string config_hash;
  std::optional<double> lambda;
  std::optional<int> k;
  std::uint64_t seed = 0;
  double acc = 0.0;
  std::optional<double> auroc;
  std::optional<double> e_acc;
  std::optional<double> e_auroc;
  std::optional<double> c_auroc;
  std::optional<double> cfsr;
  std::optional<double> tpr;
  std::optional<double> fdr;
  double mean_selected = 0.0;
};

/// Column order of report.csv and table.csv.
inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{"method", "dataset", "config_hash", "lambda", "k",    "seed",
                                             "acc",    "auroc",   "e_acc",       "e_auroc", "c_auroc", "cfsr",
                                             "tpr",    "fdr",     "mean_selected"};
  return cols;
}

inline std::vector<SelectionVector> selections_of(const Matrix& masks) { return to_selections(masks); }

/// Everything except the oracle column, which needs a collection built separately.
inline MetricReport evaluate_explainer(const TrainedExplainer& te, const Dataset& test, const Evaluator* evaluator,
                                       const std::string& dataset_name) {
  MetricReport r;
  r.method = method_name(te.config.method);
  r.dataset = dataset_name;
  r.config_hash = te.config.hash();
  r.lambda = te.config.lambda;
  r.k = te.config.k;
  r.seed = te.config.seed;
  RngStream eval_rng(te.config.seed, "evaluation-sampling");
  const Matrix masks = te.select(test.x, &eval_rng);
  const Matrix probs = te.predict(test.x, masks);
  r.acc = accuracy(probs, test.y);
  r.auroc = auroc_probs(probs, test.y);
  r.mean_selected = mean_selection_size(masks);
  if (evaluator) {
    const auto audit = audit_with_evalx(*evaluator, test, masks);
    r.e_acc = audit.e_acc;
    r.e_auroc = audit.e_auroc;
  }
  if (test.has_ground_truth()) {
    const auto sm = selection_metrics(selections_of(masks), test.ground_truth, test.control_features);
    r.cfsr = sm.cfsr;
    r.tpr = sm.tpr;
    r.fdr = sm.fdr;
  }
  return r;
}

}  // namespace amortix
