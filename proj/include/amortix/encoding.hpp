#pragma once

#include "amortix/datasets.hpp"
#include "amortix/evaluation.hpp"
#include "amortix/masking.hpp"
#include "amortix/methods.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

namespace amortix {

/// Smallest j with sum_{i<=j} C(D, i) >= target, or nullopt when 2^D < target.
inline std::optional<int> capacity_J(int d, std::uint64_t target) {
  if (d < 1 || target < 1) throw std::invalid_argument("capacity_J: need D >= 1 and target >= 1");
  if (d < 64 && (std::uint64_t{1} << d) < target) return std::nullopt;
  // Exact while the running binomial fits; beyond that the target is certainly met.
  unsigned __int128 binom = 1, total = 0;
  for (int j = 0; j <= d; ++j) {
    total += binom;
    if (total >= target) return j;
    binom = binom * static_cast<unsigned>(d - j) / static_cast<unsigned>(j + 1);
    if (binom > static_cast<unsigned __int128>(target)) return j + 1;
  }
  return std::nullopt;
}

/// Codebook index <-> mask. Codewords are listed by weight, then
/// lexicographically by their sorted index sets.
struct EncoderPair {
  int features = 0;
  std::vector<SelectionVector> codebook;
  std::map<SelectionVector, int> decoder;

  int max_weight() const {
    int w = 0;
    for (const auto& c : codebook) {
      int s = 0;
      for (auto b : c) s += b;
      w = std::max(w, s);
    }
    return w;
  }

  const SelectionVector& encode(int symbol) const { return codebook.at(static_cast<std::size_t>(symbol)); }

  std::optional<int> decode(const SelectionVector& mask) const {
    auto it = decoder.find(mask);
    if (it == decoder.end()) return std::nullopt;
    return it->second;
  }
};

namespace detail {

inline bool next_combination(std::vector<int>& c, int n) {
  const int k = static_cast<int>(c.size());
  int i = k - 1;
  while (i >= 0 && c[static_cast<std::size_t>(i)] == n - k + i) --i;
  if (i < 0) return false;
  ++c[static_cast<std::size_t>(i)];
  for (int j = i + 1; j < k; ++j) c[static_cast<std::size_t>(j)] = c[static_cast<std::size_t>(j - 1)] + 1;
  return true;
}

}  // namespace detail

inline EncoderPair build_encoder(int symbols, int d) {
  if (symbols < 1) throw std::invalid_argument("build_encoder: need at least one symbol");
  if (!capacity_J(d, static_cast<std::uint64_t>(symbols)))
    throw ContractError("build_encoder: 2^D masks cannot carry that many symbols");
  EncoderPair pair;
  pair.features = d;
  for (int w = 0; static_cast<int>(pair.codebook.size()) < symbols; ++w) {
    std::vector<int> comb(static_cast<std::size_t>(w));
    for (int i = 0; i < w; ++i) comb[static_cast<std::size_t>(i)] = i;
    do {
      SelectionVector s(static_cast<std::size_t>(d), 0);
      for (int j : comb) s[static_cast<std::size_t>(j)] = 1;
      pair.decoder.emplace(s, static_cast<int>(pair.codebook.size()));
      pair.codebook.push_back(std::move(s));
    } while (static_cast<int>(pair.codebook.size()) < symbols && detail::next_combination(comb, d));
  }
  return pair;
}

/// Encoder over a set of conditional class distributions: the distinct rows of
/// `conditionals` become the symbols. `symbol_of[i]` is row i's symbol.
struct DistributionEncoder {
  EncoderPair pair;
  std::vector<RowVector> distributions;
  std::vector<int> symbol_of;
};

inline DistributionEncoder build_distribution_encoder(const Matrix& conditionals, int d, double tol = 1e-12) {
  DistributionEncoder enc;
  for (Eigen::Index i = 0; i < conditionals.rows(); ++i) {
    int found = -1;
    for (std::size_t s = 0; s < enc.distributions.size(); ++s)
      if ((enc.distributions[s] - conditionals.row(i)).cwiseAbs().maxCoeff() <= tol) {
        found = static_cast<int>(s);
        break;
      }
    if (found < 0) {
      found = static_cast<int>(enc.distributions.size());
      enc.distributions.emplace_back(conditionals.row(i));
    }
    enc.symbol_of.push_back(found);
  }
  enc.pair = build_encoder(static_cast<int>(enc.distributions.size()), d);
  return enc;
}

// ---------------------------------------------------------------------------
// Encoding demonstrator: selector = classify-then-encode, predictor = decode.

struct EncodingDemo {
  EncoderPair pair;
  Matrix masks;   // test selections
  double jam_acc = 0.0;
  double mean_selected = 0.0;
  double e_acc = 0.0;
  std::optional<double> e_auroc;
  double chance = 0.0;
};

struct EncodingDemoOptions {
  int k = 10;
  int d = 20;
  int n_train = 6000;
  int n_val = 1000;
  int n_test = 2000;
  std::uint64_t seed = 0;
  MethodConfig evaluator;  // only lr, batch, epochs, patience, predictor_hidden are read
};

inline Matrix encoder_masks(const EncoderPair& pair, const DeterministicRule& rule, const Matrix& x) {
  Matrix masks(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto& code = pair.encode(rule.classify(std::span<const double>(x.row(i).data(), static_cast<std::size_t>(x.cols()))));
    for (Eigen::Index j = 0; j < x.cols(); ++j) masks(i, j) = code[static_cast<std::size_t>(j)];
  }
  return masks;
}

inline EncodingDemo run_encoding_demo(const EncodingDemoOptions& opt) {
  RngStream root(opt.seed, "encoding-demo");
  auto rule_rng = root.substream("rule");
  const DeterministicRule rule = make_deterministic_rule(opt.k, opt.d, rule_rng);
  auto tr_rng = root.substream("train"), va_rng = root.substream("val"), te_rng = root.substream("test");
  const Dataset train = gen_deterministic(rule, opt.n_train, tr_rng);
  const Dataset val = gen_deterministic(rule, opt.n_val, va_rng);
  const Dataset test = gen_deterministic(rule, opt.n_test, te_rng);

  EncodingDemo demo;
  demo.pair = build_encoder(opt.k, opt.d);
  demo.chance = 1.0 / opt.k;
  demo.masks = encoder_masks(demo.pair, rule, test.x);

  // The predictor reads only the mask bits.
  std::size_t hit = 0;
  const auto selections = to_selections(demo.masks);
  for (std::size_t i = 0; i < selections.size(); ++i) hit += demo.pair.decode(selections[i]) == test.y[i];
  demo.jam_acc = static_cast<double>(hit) / static_cast<double>(test.size());
  demo.mean_selected = mean_selection_size(demo.masks);

  MethodConfig ecfg = opt.evaluator;
  ecfg.method = MethodId::EvalX;
  ecfg.lambda.reset();
  ecfg.k.reset();
  ecfg.seed = opt.seed;
  const Evaluator ev = train_evalx(train, val, ecfg);
  const auto audit = audit_with_evalx(ev, test, demo.masks);
  demo.e_acc = audit.e_acc;
  demo.e_auroc = audit.e_auroc;
  return demo;
}

// ---------------------------------------------------------------------------
// Control-flow omission

struct ObjectiveGap {
  double case1 = 0.0;  // selector reveals the full path T(x)
  double case2 = 0.0;  // selector reveals only the leaf features S(x)
  double gap() const { return case2 - case1; }
};

/// Evaluates both selections under the joint objective with exact leaf
/// conditionals and R(s) = ||s||_0. Leaf feature sets must be distinct so a
/// predictor can recover the leaf from S(x) alone.
inline ObjectiveGap jam_objective_gap(const ControlFlowTree& tree, const Dataset& ds, double lambda) {
  if (!tree.leaf_sets_distinct()) throw std::invalid_argument("jam_objective_gap: leaf feature sets must differ");
  if (ds.size() == 0) throw std::invalid_argument("jam_objective_gap: empty dataset");
  // The decoder from a revealed leaf set back to the leaf.
  std::map<std::vector<int>, int> leaf_of_set;
  for (std::size_t l = 0; l < tree.leaves.size(); ++l) {
    auto s = tree.leaves[l].features;
    std::sort(s.begin(), s.end());
    leaf_of_set.emplace(s, static_cast<int>(l));
  }
  auto loglik = [&](int leaf, std::span<const double> x, int y) {
    const double p1 = 1.0 / (1.0 + tree.leaves[static_cast<std::size_t>(leaf)].f(x));
    return std::log(y == 1 ? p1 : 1.0 - p1);
  };

  ObjectiveGap g;
  for (int i = 0; i < ds.size(); ++i) {
    const std::span<const double> x(ds.x.row(i).data(), static_cast<std::size_t>(ds.features()));
    const int y = ds.y[static_cast<std::size_t>(i)];
    const int leaf = tree.route(x);
    const auto path = tree.path_features(leaf);
    g.case1 += loglik(leaf, x, y) - lambda * static_cast<double>(path.size());
    auto revealed = tree.leaves[static_cast<std::size_t>(leaf)].features;
    std::sort(revealed.begin(), revealed.end());
    g.case2 += loglik(leaf_of_set.at(revealed), x, y) - lambda * static_cast<double>(revealed.size());
  }
  g.case1 /= ds.size();
  g.case2 /= ds.size();
  return g;
}

}  // namespace amortix
