#include "amortix/methods.hpp"

#include <gtest/gtest.h>

using namespace amortix;

namespace {

struct Data {
  Dataset train, val;
};

const Data& small_s1() {
  static const Data d = [] {
    auto [tr, te] = synthetic_train_test(SyntheticId::S1, 11, 2000, 10);
    RngStream rng(11, "split");
    auto [a, b] = holdout(tr, 0.1, rng);
    return Data{a, b};
  }();
  return d;
}

MethodConfig tiny(MethodId m, std::optional<double> lambda = std::nullopt, std::optional<int> k = std::nullopt) {
  MethodConfig c;
  c.method = m;
  c.lambda = lambda;
  c.k = k;
  c.lr = 1e-3;
  c.epochs = 4;
  c.seed = 3;
  c.selector_hidden = {16, 16};
  c.predictor_hidden = {16};
  return c;
}

int batches(const Dataset& ds, int batch) { return (ds.size() + batch - 1) / batch; }

double class_prior(const std::vector<int>& y) {
  const double pos = std::count(y.begin(), y.end(), 1) / static_cast<double>(y.size());
  return std::max(pos, 1 - pos);
}

}  // namespace

TEST(MethodConfig, ValidationMatchesRegularizationStyle) {
  EXPECT_THROW(tiny(MethodId::RealX).validate(), ConfigError);
  EXPECT_THROW(tiny(MethodId::RealX, 0.1, 2).validate(), ConfigError);
  EXPECT_THROW(tiny(MethodId::L2X, 0.1).validate(), ConfigError);
  EXPECT_THROW(tiny(MethodId::L2X, std::nullopt, 0).validate(), ConfigError);
  EXPECT_THROW(tiny(MethodId::EvalX, 0.1).validate(), ConfigError);
  EXPECT_THROW(tiny(MethodId::Invase, -0.1).validate(), ConfigError);
  EXPECT_NO_THROW(tiny(MethodId::Invase, 0.2).validate());
  EXPECT_NO_THROW(tiny(MethodId::L2X, std::nullopt, 3).validate());
  EXPECT_NO_THROW(tiny(MethodId::Full).validate());
  auto c = tiny(MethodId::RealX, 0.1);
  c.selector_lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(MethodId::RealX, 0.1);
  c.tau = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(MethodConfig, SerializeParseRoundTripAndHash) {
  auto c = tiny(MethodId::Invase, 0.125);
  c.selector_lr = 2e-4;
  c.control_pretrained = true;
  c.penalty = PenaltyNorm::Sum;
  const auto back = MethodConfig::parse(c.serialize());
  EXPECT_EQ(back.serialize(), c.serialize());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(c.hash().size(), 16U);
  auto d = c;
  d.seed = 4;
  EXPECT_NE(d.hash(), c.hash());
  d = c;
  d.lambda = 0.15;
  EXPECT_NE(d.hash(), c.hash());
}

TEST(MethodConfig, AblationDiffersOnlyInMethodLine) {
  const auto a = tiny(MethodId::RealX, 0.1).serialize();
  const auto b = tiny(MethodId::NotRealX, 0.1).serialize();
  std::istringstream ia(a), ib(b);
  std::string la, lb;
  int diffs = 0;
  while (std::getline(ia, la) && std::getline(ib, lb))
    if (la != lb) {
      ++diffs;
      EXPECT_EQ(la.substr(0, 7), "method=");
    }
  EXPECT_EQ(diffs, 1);
}

TEST(MethodConfig, PenaltyNormalization) {
  auto c = tiny(MethodId::RealX, 0.5);
  EXPECT_DOUBLE_EQ(c.penalty_weight(10), 0.05);
  c.penalty = PenaltyNorm::Sum;
  EXPECT_DOUBLE_EQ(c.penalty_weight(10), 0.5);
  EXPECT_EQ(tiny(MethodId::L2X, std::nullopt, 2).scheme(), MaskScheme::Multiplicative);
  EXPECT_EQ(tiny(MethodId::Invase, 0.1).scheme(), MaskScheme::HardToken);
}

TEST(RealX, PredictorNeverConsumesSelectorOutput) {
  const auto& d = small_s1();
  const auto te = train_realx(d.train, d.val, tiny(MethodId::RealX, 0.1));
  EXPECT_EQ(te.counters.predictor_selector_bytes, 0U);
  const auto steps = static_cast<std::uint64_t>(batches(d.train, 100) * 4);
  EXPECT_EQ(te.counters.predictor_updates + te.counters.rejected_steps, 2 * steps - te.counters.selector_updates);
  EXPECT_EQ(te.counters.selector_updates, steps);
  EXPECT_EQ(te.bernoulli->net.output_width(), d.train.features());
  EXPECT_EQ(te.predictor.input_width(), 2 * d.train.features());

  const auto jam = train_notrealx(d.train, d.val, tiny(MethodId::NotRealX, 0.1));
  EXPECT_EQ(jam.counters.predictor_selector_bytes, steps * 0 + static_cast<std::uint64_t>(d.train.size()) * 4 * 11);
  const auto inv = train_invase(d.train, d.val, tiny(MethodId::Invase, 0.1));
  EXPECT_GT(inv.counters.predictor_selector_bytes, 0U);
}

TEST(RealX, DeterministicGivenConfig) {
  const auto& d = small_s1();
  for (auto m : {MethodId::RealX, MethodId::NotRealX, MethodId::Invase}) {
    const auto a = train_method(d.train, d.val, tiny(m, 0.1));
    const auto b = train_method(d.train, d.val, tiny(m, 0.1));
    EXPECT_TRUE(params_equal(a.bernoulli->net.layers(), b.bernoulli->net.layers())) << method_name(m);
    EXPECT_TRUE(params_equal(a.predictor.layers(), b.predictor.layers())) << method_name(m);
  }
  const auto a = train_l2x(d.train, d.val, tiny(MethodId::L2X, std::nullopt, 3));
  const auto b = train_l2x(d.train, d.val, tiny(MethodId::L2X, std::nullopt, 3));
  EXPECT_TRUE(params_equal(a.topk->net.layers(), b.topk->net.layers()));
  auto other = tiny(MethodId::RealX, 0.1);
  other.seed = 99;
  EXPECT_FALSE(params_equal(train_realx(d.train, d.val, other).predictor.layers(),
                            train_realx(d.train, d.val, tiny(MethodId::RealX, 0.1)).predictor.layers()));
}

TEST(RealX, ZeroLambdaSelectsEveryUsefulFeature) {
  // y = 1(sum x > 0): every feature carries signal, so without a penalty the
  // selector has no reason to drop any of them.
  Dataset ds;
  ds.x.resize(2000, 4);
  RngStream rng(21, "sum-task");
  for (int i = 0; i < 2000; ++i) {
    for (int j = 0; j < 4; ++j) ds.x(i, j) = rng.normal();
    ds.y.push_back(ds.x.row(i).sum() > 0 ? 1 : 0);
  }
  RngStream split(22, "split");
  auto [tr, va] = holdout(ds, 0.1, split);
  auto c = tiny(MethodId::RealX, 0.0);
  c.epochs = 40;
  const auto te = train_realx(tr, va, c);
  EXPECT_GE(mean_selection_size(te.select(va.x)) / 4.0, 0.9);
}

TEST(RealX, HugeLambdaSelectsNothing) {
  const auto& d = small_s1();
  auto c = tiny(MethodId::RealX, 1e3);
  c.epochs = 30;
  const auto te = train_realx(d.train, d.val, c);
  const Matrix masks = te.select(d.val.x);
  EXPECT_EQ(masks.sum(), 0.0);
  EXPECT_NEAR(accuracy(te.predict(d.val.x, masks), d.val.y), class_prior(d.val.y), 1e-12);
}

TEST(RealX, SparsityNonIncreasingInLambda) {
  const auto& d = small_s1();
  std::vector<double> sizes;
  for (double lambda : {0.0, 0.5, 2.0, 8.0}) {
    auto c = tiny(MethodId::RealX, lambda);
    c.epochs = 10;
    sizes.push_back(mean_selection_size(train_realx(d.train, d.val, c).select(d.val.x)));
  }
  int inversions = 0;
  for (std::size_t i = 1; i < sizes.size(); ++i) inversions += sizes[i] > sizes[i - 1] + 1e-12;
  EXPECT_LE(inversions, 1);
  EXPECT_GT(sizes.front(), sizes.back());
}

TEST(RealXStep, SelectorPhaseLeavesPredictorUntouched) {
  const auto& d = small_s1();
  auto one = tiny(MethodId::RealXStep, 0.1);
  one.epochs = 1;
  one.patience = 2;
  auto three = one;
  three.epochs = 3;
  const auto a = train_realx_step(d.train, d.val, one);
  const auto b = train_realx_step(d.train, d.val, three);
  EXPECT_TRUE(params_equal(a.predictor.layers(), b.predictor.layers()));
  EXPECT_FALSE(params_equal(a.bernoulli->net.layers(), b.bernoulli->net.layers()));
  EXPECT_EQ(a.counters.predictor_selector_bytes, 0U);
}

TEST(L2X, SelectsExactlyKAndFullKPassesInputThrough) {
  const auto& d = small_s1();
  const auto te = train_l2x(d.train, d.val, tiny(MethodId::L2X, std::nullopt, 3));
  const Matrix masks = te.select(d.val.x);
  for (Eigen::Index i = 0; i < masks.rows(); ++i) EXPECT_EQ(masks.row(i).sum(), 3.0);

  // With k = D every mask is all ones, so the predictor sees x unchanged and
  // behaves as a plain classifier on the full input.
  auto all = tiny(MethodId::L2X, std::nullopt, 11);
  all.epochs = 20;
  const auto full_k = train_l2x(d.train, d.val, all);
  const Matrix ones = full_k.select(d.val.x);
  EXPECT_TRUE(ones.isOnes());
  EXPECT_EQ(full_k.predict(d.val.x, ones), full_k.predictor.forward(d.val.x));
  EXPECT_THROW(train_l2x(d.train, d.val, tiny(MethodId::L2X, std::nullopt, 12)), ConfigError);
}

TEST(Invase, HugeLambdaEmptiesSelections) {
  const auto& d = small_s1();
  auto c = tiny(MethodId::Invase, 1e3);
  c.epochs = 30;
  const auto te = train_invase(d.train, d.val, c);
  EXPECT_EQ(te.select(d.val.x).sum(), 0.0);
  ASSERT_TRUE(te.control.has_value());
}

TEST(Invase, PretrainedControlIsOptional) {
  const auto& d = small_s1();
  auto c = tiny(MethodId::Invase, 0.2);
  c.control_pretrained = true;
  c.epochs = 2;
  c.patience = 2;
  EXPECT_NO_THROW(train_invase(d.train, d.val, c));
}

TEST(EvalX, EmptyMaskGivesOneConstantPrediction) {
  const auto& d = small_s1();
  auto c = tiny(MethodId::EvalX);
  c.epochs = 5;
  const auto ev = train_evalx(d.train, d.val, c);
  const Matrix probs = ev.predict(d.val.x, Matrix::Zero(d.val.size(), 11));
  for (Eigen::Index i = 1; i < probs.rows(); ++i) EXPECT_EQ(probs.row(i), probs.row(0));
  const double acc = accuracy(probs, d.val.y);
  EXPECT_TRUE(std::abs(acc - class_prior(d.val.y)) < 1e-12 || std::abs(acc - (1 - class_prior(d.val.y))) < 1e-12);
  EXPECT_EQ(ev.net.input_width(), 22);
}

TEST(EvalX, IsNotAnExplainer) {
  const auto& d = small_s1();
  EXPECT_THROW(train_method(d.train, d.val, tiny(MethodId::EvalX)), ConfigError);
}

TEST(Training, NonFiniteInputsAbortAfterRejections) {
  auto d = small_s1();
  d.train.x(0, 0) = std::numeric_limits<double>::quiet_NaN();
  for (int i = 0; i < d.train.size(); ++i) d.train.x(i, 3) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(train_realx(d.train, d.val, tiny(MethodId::RealX, 0.1)), TrainingAborted);
}

TEST(Sweep, GridOfOne) {
  std::vector<SweepEntry> e{{tiny(MethodId::RealX, 0.1), 0.6, 0.7, 3}};
  EXPECT_EQ(choose_config(e, SelectionRule::WithinFivePoints, 0.9).index, 0U);
  EXPECT_TRUE(choose_config(e, SelectionRule::WithinFivePoints, 0.9).fallback);
  EXPECT_FALSE(choose_config(e, SelectionRule::MaxValAccuracy).fallback);
  EXPECT_THROW(choose_config({}, SelectionRule::MaxValAccuracy), ConfigError);
}

TEST(Sweep, FivePointRulePicksSparsestAdmissible) {
  std::vector<SweepEntry> e;
  const std::vector<std::pair<double, double>> grid{{0.1, 0.95}, {1.0, 0.94}, {5.0, 0.93}, {10.0, 0.86}, {25.0, 0.6}, {50.0, 0.3}};
  for (auto [lambda, acc] : grid) e.push_back({tiny(MethodId::RealX, lambda), acc, 0.5, 0});
  const auto choice = choose_config(e, SelectionRule::WithinFivePoints, 0.97);
  EXPECT_EQ(*e[choice.index].config.lambda, 5.0);
  EXPECT_FALSE(choice.fallback);
  EXPECT_EQ(choose_config(e, SelectionRule::MaxValAccuracy).index, 0U);

  std::vector<SweepEntry> k;
  for (int kk : {1, 5, 15}) k.push_back({tiny(MethodId::L2X, std::nullopt, kk), kk == 1 ? 0.5 : 0.95, 0.4, 0});
  EXPECT_EQ(*k[choose_config(k, SelectionRule::WithinFivePoints, 0.97).index].config.k, 5);
}

TEST(Sweep, SparsityTieBrokenByValidationLoss) {
  std::vector<SweepEntry> e{{tiny(MethodId::RealX, 0.2), 0.9, 0.40, 2}, {tiny(MethodId::RealX, 0.2), 0.9, 0.35, 2}};
  EXPECT_EQ(choose_config(e, SelectionRule::WithinFivePoints, 0.9).index, 1U);
  std::vector<SweepEntry> acc_tie{{tiny(MethodId::RealX, 0.1), 0.8, 0.5, 2}, {tiny(MethodId::RealX, 0.2), 0.8, 0.4, 2}};
  EXPECT_EQ(choose_config(acc_tie, SelectionRule::MaxValAccuracy).index, 1U);
}

TEST(Sweep, NoAdmissibleConfigFallsBackToBestAccuracy) {
  std::vector<SweepEntry> e{{tiny(MethodId::RealX, 0.1), 0.7, 0.5, 2}, {tiny(MethodId::RealX, 1.0), 0.8, 0.6, 2}};
  const auto c = choose_config(e, SelectionRule::WithinFivePoints, 0.99);
  EXPECT_TRUE(c.fallback);
  EXPECT_EQ(c.index, 1U);
}

TEST(Sweep, TrainsEveryConfigAndKeepsTheChosenModel) {
  const auto& d = small_s1();
  std::vector<MethodConfig> grid{tiny(MethodId::RealX, 0.05), tiny(MethodId::RealX, 50.0)};
  for (auto& g : grid) g.epochs = 2;
  const auto res = sweep_and_select(d.train, d.val, grid, SelectionRule::MaxValAccuracy);
  ASSERT_EQ(res.entries.size(), 2U);
  EXPECT_EQ(res.chosen.config.hash(), grid[res.choice.index].hash());
  EXPECT_DOUBLE_EQ(summarize_validation(res.chosen, d.val).val_acc, res.entries[res.choice.index].val_acc);
}
