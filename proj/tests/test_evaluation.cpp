#include "oracles.hpp"

#include "amortix/evaluation.hpp"

#include <gtest/gtest.h>

using namespace amortix;

namespace {

// y = 1(x0 > 0) on three features; x1 and x2 are noise.
Dataset first_feature_task(int n, std::uint64_t seed) {
  Dataset ds;
  ds.num_classes = 2;
  ds.x.resize(n, 3);
  RngStream rng(seed, "first-feature");
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) ds.x(i, j) = rng.normal();
    ds.y.push_back(ds.x(i, 0) > 0 ? 1 : 0);
  }
  return ds;
}

OracleOptions small_oracle() {
  OracleOptions o;
  o.hidden = {8};
  o.fit = FitOptions{{1e-2}, 50, 30, 5};
  o.seed = 4;
  return o;
}

MethodConfig small_evalx() {
  MethodConfig c;
  c.method = MethodId::EvalX;
  c.lr = 1e-3;
  c.epochs = 5;
  c.seed = 8;
  c.predictor_hidden = {16};
  return c;
}

}  // namespace

TEST(Audit, RefusesMismatchedSchemeAndFeatureSpace) {
  const auto train = first_feature_task(400, 1);
  const auto test = first_feature_task(100, 2);
  const Evaluator ev = train_evalx(train, test, small_evalx());
  const Matrix masks = Matrix::Ones(test.size(), 3);
  EXPECT_NO_THROW(audit_with_evalx(ev, test, masks));
  EXPECT_THROW(audit_with_evalx(ev, test, masks, MaskScheme::Multiplicative), AuditRefused);
  Dataset wider = test;
  wider.x = Matrix::Zero(test.size(), 4);
  EXPECT_THROW(audit_with_evalx(ev, wider, Matrix::Ones(test.size(), 4)), AuditRefused);
  EXPECT_THROW(audit_with_evalx(ev, test, Matrix::Ones(test.size() - 1, 3)), DimensionError);
}

TEST(Audit, LeavesEvaluatorUntouchedAndMatchesDirectPrediction) {
  const auto train = first_feature_task(400, 1);
  const auto test = first_feature_task(200, 2);
  const Evaluator ev = train_evalx(train, test, small_evalx());
  const Evaluator before = ev;
  RngStream rng(5, "masks");
  const Matrix masks = detail::random_half_masks(test.size(), 3, rng);
  const auto r = audit_with_evalx(ev, test, masks);
  EXPECT_TRUE(params_equal(ev.net.layers(), before.net.layers()));
  EXPECT_EQ(r.probs, ev.predict(test.x, masks));
  EXPECT_DOUBLE_EQ(r.e_acc, accuracy(r.probs, test.y));
  EXPECT_EQ(*r.e_auroc, *auroc_probs(r.probs, test.y));
}

TEST(Subsets, KeyAndFeatureListRoundTrip) {
  for (SubsetKey k = 0; k < 64; ++k) {
    const auto f = subset_features(k, 6);
    Matrix m = Matrix::Zero(1, 6);
    for (int j : f) m(0, j) = 1;
    EXPECT_EQ(subset_key(m, 0), k);
  }
  Matrix x(2, 4);
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  Matrix want(2, 2);
  want << 2, 4, 6, 8;
  EXPECT_EQ(restrict_columns(x, {1, 3}), want);
}

TEST(SubsetOracle, ExhaustiveCoversEveryNonEmptySubset) {
  const auto train = first_feature_task(600, 1);
  const auto val = first_feature_task(100, 3);
  const auto o = build_subset_oracle(train, val, small_oracle());
  EXPECT_EQ(o.models.size(), 7U);
  for (SubsetKey k = 0; k < 8; ++k) EXPECT_TRUE(o.covers(k));
  for (const auto& [k, net] : o.models) EXPECT_EQ(net.input_width(), static_cast<int>(subset_features(k, 3).size()));
  const double pos = std::count(train.y.begin(), train.y.end(), 1) / 600.0;
  EXPECT_DOUBLE_EQ(o.marginal(1), pos);
  EXPECT_DOUBLE_EQ(o.marginal(0), 1 - pos);
}

TEST(SubsetOracle, CAurocUsesEachRowsOwnModel) {
  const auto train = first_feature_task(600, 1);
  const auto val = first_feature_task(100, 3);
  const auto test = first_feature_task(300, 4);
  const auto o = build_subset_oracle(train, val, small_oracle());

  // Empty masks: every row gets the marginal, so all scores tie.
  EXPECT_DOUBLE_EQ(*c_auroc(o, test, Matrix::Zero(test.size(), 3)).c_auroc, 0.5);

  // A constant mask reduces to that subset's model on restricted inputs.
  Matrix only_first = Matrix::Zero(test.size(), 3);
  only_first.col(0).setOnes();
  const Matrix p = o.models.at(1).forward(restrict_columns(test.x, {0}));
  EXPECT_EQ(*c_auroc(o, test, only_first).c_auroc, *auroc_probs(p, test.y));
  EXPECT_GT(*c_auroc(o, test, only_first).c_auroc, 0.95);

  // Mixed masks: compare against per-row dispatch done by hand.
  RngStream rng(6, "mixed");
  const Matrix mixed = detail::random_half_masks(test.size(), 3, rng);
  std::vector<double> scores;
  for (int i = 0; i < test.size(); ++i) {
    const SubsetKey k = subset_key(mixed, i);
    if (k == 0) {
      scores.push_back(o.marginal(1));
      continue;
    }
    const Matrix row = restrict_columns(test.x.row(i), subset_features(k, 3));
    scores.push_back(o.models.at(k).forward(row)(0, 1));
  }
  const auto want = oracle::auroc_pairs(scores, test.y);
  EXPECT_DOUBLE_EQ(*c_auroc(o, test, mixed).c_auroc, static_cast<double>(want.num) / static_cast<double>(want.den));
}

TEST(SubsetOracle, OnDemandAndBudgetExcludeUncoveredRows) {
  const auto train = first_feature_task(400, 1);
  const auto val = first_feature_task(100, 3);
  const auto test = first_feature_task(200, 4);
  auto opt = small_oracle();
  opt.policy = CoveragePolicy::OnDemand;
  opt.requested = {1, 3, 3};
  const auto o = build_subset_oracle(train, val, opt);
  EXPECT_EQ(o.models.size(), 2U);
  Matrix masks = Matrix::Zero(test.size(), 3);
  for (int i = 0; i < test.size(); ++i) {
    masks(i, 0) = 1;
    if (i % 4 == 0) masks(i, 2) = 1;  // subset {0, 2} = key 5, not built
  }
  const auto s = c_auroc(o, test, masks);
  EXPECT_EQ(s.excluded, 50U);
  EXPECT_TRUE(s.c_auroc.has_value());

  opt.policy = CoveragePolicy::Exhaustive;
  opt.max_models = 3;
  const auto capped = build_subset_oracle(train, val, opt);
  EXPECT_EQ(capped.models.size(), 3U);
  EXPECT_EQ(capped.uncovered.size(), 4U);
}

TEST(SubsetOracle, ExhaustiveRefusesWideInputs) {
  Dataset wide;
  wide.x = Matrix::Zero(4, 15);
  wide.y = {0, 1, 0, 1};
  EXPECT_THROW(build_subset_oracle(wide, wide, small_oracle()), ConfigError);
}

TEST(SubsetOracle, ThreadCountDoesNotChangeModels) {
  const auto train = first_feature_task(300, 1);
  const auto val = first_feature_task(60, 3);
  auto opt = small_oracle();
  const auto a = build_subset_oracle(train, val, opt);
  opt.threads = 3;
  const auto b = build_subset_oracle(train, val, opt);
  for (const auto& [k, net] : a.models) EXPECT_TRUE(params_equal(net.layers(), b.models.at(k).layers()));
}

TEST(Report, EvaluateExplainerFillsEveryColumn) {
  auto [train, test] = synthetic_train_test(SyntheticId::S2, 5, 1500, 400);
  RngStream split(5, "split");
  auto [tr, va] = holdout(train, 0.1, split);
  MethodConfig c;
  c.method = MethodId::RealX;
  c.lambda = 0.1;
  c.lr = 1e-3;
  c.epochs = 3;
  c.seed = 2;
  c.selector_hidden = {16};
  c.predictor_hidden = {16};
  const auto te = train_realx(tr, va, c);
  auto ec = small_evalx();
  const Evaluator ev = train_evalx(tr, va, ec);
  const auto r = evaluate_explainer(te, test, &ev, "s2");
  EXPECT_EQ(r.method, "realx");
  EXPECT_EQ(r.dataset, "s2");
  EXPECT_EQ(r.config_hash, c.hash());
  EXPECT_EQ(*r.lambda, 0.1);
  EXPECT_FALSE(r.k.has_value());
  ASSERT_TRUE(r.e_acc && r.e_auroc && r.cfsr && r.tpr && r.fdr);
  const Matrix masks = te.select(test.x);
  const auto sm = oracle::set_metrics(to_selections(masks), test.ground_truth, test.control_features);
  EXPECT_EQ(*r.cfsr, sm.cfsr);
  EXPECT_EQ(*r.tpr, sm.tpr);
  EXPECT_EQ(*r.fdr, sm.fdr);
  EXPECT_DOUBLE_EQ(*r.e_acc, audit_with_evalx(ev, test, masks).e_acc);
  EXPECT_DOUBLE_EQ(r.acc, accuracy(te.predict(test.x, masks), test.y));
  EXPECT_DOUBLE_EQ(r.mean_selected, mean_selection_size(masks));
  EXPECT_FALSE(r.c_auroc.has_value());

  const auto again = evaluate_explainer(te, test, nullptr, "s2");
  EXPECT_FALSE(again.e_acc.has_value());
  EXPECT_EQ(again.acc, r.acc);
  EXPECT_EQ(report_columns().size(), 15U);
}
