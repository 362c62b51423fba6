#pragma once

#include "amortix/rng.hpp"
#include "amortix/tensor.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace amortix {

enum class Split : std::uint8_t { All = 0, Train = 1, Val = 2, Test = 3 };

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::string name;
  Matrix x;  // N x D
  std::vector<int> y;
  int num_classes = 2;
  std::vector<std::vector<int>> ground_truth;  // per-instance relevant features; empty if unknown
  std::vector<int> control_features;
  Split split = Split::All;
  int image_rows = 0;
  int image_cols = 0;

  int size() const { return static_cast<int>(x.rows()); }
  int features() const { return static_cast<int>(x.cols()); }
  bool has_ground_truth() const { return !ground_truth.empty(); }
  bool is_image() const { return image_rows > 0 && image_rows * image_cols == features(); }

  Dataset subset(const std::vector<int>& idx) const {
    Dataset out = *this;
    out.x = rows_of(x, idx);
    out.y.clear();
    out.ground_truth.clear();
    for (int i : idx) {
      out.y.push_back(y[static_cast<std::size_t>(i)]);
      if (has_ground_truth()) out.ground_truth.push_back(ground_truth[static_cast<std::size_t>(i)]);
    }
    return out;
  }

  void validate() const {
    if (static_cast<std::size_t>(x.rows()) != y.size()) throw DataError("dataset: rows != labels");
    for (int v : y)
      if (v < 0 || v >= num_classes) throw DataError("dataset: label outside [0, K)");
    if (has_ground_truth()) {
      if (ground_truth.size() != y.size()) throw DataError("dataset: ground truth count mismatch");
      for (const auto& g : ground_truth)
        for (int j : g)
          if (j < 0 || j >= features()) throw DataError("dataset: ground-truth index outside [0, D)");
    }
  }
};

// ---------------------------------------------------------------------------
// Tree-structured generative processes

/// Leaf conditional: P(y = 1 | x) = 1 / (1 + f(x)) with f depending on `features` only.
struct TreeLeaf {
  std::string name;
  std::vector<int> features;
  std::function<double(std::span<const double>)> f;
};

struct TreeNode {
  int feature = -1;  // branch: go left when x[feature] < threshold
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int leaf = -1;  // >= 0 for leaf nodes
};

class ControlFlowTree {
 public:
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  std::vector<TreeLeaf> leaves;

  int route(std::span<const double> x) const {
    int n = 0;
    while (nodes[static_cast<std::size_t>(n)].leaf < 0) {
      const auto& node = nodes[static_cast<std::size_t>(n)];
      n = x[static_cast<std::size_t>(node.feature)] < node.threshold ? node.left : node.right;
    }
    return nodes[static_cast<std::size_t>(n)].leaf;
  }

  double prob_positive(std::span<const double> x) const {
    return 1.0 / (1.0 + leaves[static_cast<std::size_t>(route(x))].f(x));
  }

  /// Features on the root-to-leaf path, leaf features included (T_i).
  std::vector<int> path_features(int leaf) const {
    std::vector<int> out = leaves[static_cast<std::size_t>(leaf)].features;
    std::vector<int> branch;
    find_path(0, leaf, branch);
    out.insert(out.end(), branch.begin(), branch.end());
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  /// C_i = T_i \ S_i.
  std::vector<int> control_features(int leaf) const {
    const auto& s = leaves[static_cast<std::size_t>(leaf)].features;
    std::vector<int> out;
    for (int j : path_features(leaf))
      if (std::find(s.begin(), s.end(), j) == s.end()) out.push_back(j);
    return out;
  }

  bool leaf_sets_distinct() const {
    for (std::size_t a = 0; a < leaves.size(); ++a)
      for (std::size_t b = a + 1; b < leaves.size(); ++b) {
        auto sa = leaves[a].features, sb = leaves[b].features;
        std::sort(sa.begin(), sa.end());
        std::sort(sb.begin(), sb.end());
        if (sa == sb) return false;
      }
    return true;
  }

 private:
  bool find_path(int node, int leaf, std::vector<int>& acc) const {
    const auto& n = nodes[static_cast<std::size_t>(node)];
    if (n.leaf >= 0) return n.leaf == leaf;
    acc.push_back(n.feature);
    if (find_path(n.left, leaf, acc) || find_path(n.right, leaf, acc)) return true;
    acc.pop_back();
    return false;
  }
};

enum class SyntheticId : std::uint8_t { S1 = 1, S2 = 2, S3 = 3 };

inline constexpr int kSyntheticFeatures = 11;
inline constexpr int kSyntheticControl = 10;  // x11, zero-based

namespace synthetic {

inline TreeLeaf leaf_a() {
  return {"A", {0, 1}, [](std::span<const double> x) { return std::exp(x[0] * x[1]); }};
}

inline TreeLeaf leaf_b() {
  return {"B", {2, 3, 4, 5}, [](std::span<const double> x) {
            double s = 0;
            for (int i = 2; i <= 5; ++i) s += x[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(i)];
            return std::exp(s - 4.0);
          }};
}

inline TreeLeaf leaf_c() {
  return {"C", {6, 7, 8, 9}, [](std::span<const double> x) {
            return std::exp(-10.0 * std::sin(0.2 * x[6]) + std::abs(x[7]) + x[8] + std::exp(-x[9]) - 2.4);
          }};
}

}  // namespace synthetic

/// The two-leaf tree branching on x11 < 0.
inline ControlFlowTree synthetic_tree(SyntheticId id) {
  ControlFlowTree t;
  switch (id) {
    case SyntheticId::S1: t.leaves = {synthetic::leaf_a(), synthetic::leaf_b()}; break;
    case SyntheticId::S2: t.leaves = {synthetic::leaf_a(), synthetic::leaf_c()}; break;
    case SyntheticId::S3: t.leaves = {synthetic::leaf_b(), synthetic::leaf_c()}; break;
  }
  t.nodes = {TreeNode{kSyntheticControl, 0.0, 1, 2, -1}, TreeNode{-1, 0, -1, -1, 0}, TreeNode{-1, 0, -1, -1, 1}};
  return t;
}

struct SyntheticSpec {
  SyntheticId id = SyntheticId::S1;
  int n = 10000;
  std::uint64_t seed = 0;
  Split split = Split::Train;
};

inline std::string synthetic_name(SyntheticId id) { return "s" + std::to_string(static_cast<int>(id)); }

inline Dataset gen_synthetic(const SyntheticSpec& spec, RngStream& rng) {
  const ControlFlowTree tree = synthetic_tree(spec.id);
  Dataset ds;
  ds.name = synthetic_name(spec.id);
  ds.split = spec.split;
  ds.num_classes = 2;
  ds.control_features = {kSyntheticControl};
  ds.x.resize(spec.n, kSyntheticFeatures);
  ds.y.resize(static_cast<std::size_t>(spec.n));
  ds.ground_truth.resize(static_cast<std::size_t>(spec.n));
  for (int i = 0; i < spec.n; ++i) {
    for (int j = 0; j < kSyntheticFeatures; ++j) ds.x(i, j) = rng.normal();
    const std::span<const double> row(ds.x.row(i).data(), kSyntheticFeatures);
    const int leaf = tree.route(row);
    ds.y[static_cast<std::size_t>(i)] = rng.uniform() < tree.prob_positive(row) ? 1 : 0;
    ds.ground_truth[static_cast<std::size_t>(i)] = tree.path_features(leaf);
  }
  return ds;
}

/// Train and test sets drawn from separate sub-streams of one seed.
inline std::pair<Dataset, Dataset> synthetic_train_test(SyntheticId id, std::uint64_t seed, int n_train = 10000,
                                                        int n_test = 10000) {
  RngStream base(seed, "synthetic/" + synthetic_name(id));
  auto train_rng = base.substream("train");
  auto test_rng = base.substream("test");
  return {gen_synthetic({id, n_train, seed, Split::Train}, train_rng),
          gen_synthetic({id, n_test, seed, Split::Test}, test_rng)};
}

// ---------------------------------------------------------------------------
// Deterministic labels

/// y = argmax_k <w_k, x>, with weights supported on the trailing features.
/// When the support is wide enough the rows are orthonormal, so the K scores
/// are iid N(0, 1) and the classes are exactly balanced.
struct DeterministicRule {
  Matrix weights;  // K x D
  std::vector<int> support;
  bool within_lemma_contract = true;  // K <= D

  int num_classes() const { return static_cast<int>(weights.rows()); }

  int classify(std::span<const double> x) const {
    int best = 0;
    double best_score = -1e300;
    for (Eigen::Index k = 0; k < weights.rows(); ++k) {
      double s = 0;
      for (int j : support) s += weights(k, j) * x[static_cast<std::size_t>(j)];
      if (s > best_score) {
        best_score = s;
        best = static_cast<int>(k);
      }
    }
    return best;
  }
};

/// The first K - 1 features stay outside the rule's support, so low-weight
/// selection codewords reveal values that are independent of the label.
inline DeterministicRule make_deterministic_rule(int k, int d, RngStream& rng) {
  if (k < 2 || d < 1) throw std::invalid_argument("deterministic rule needs K >= 2 and D >= 1");
  DeterministicRule rule;
  rule.within_lemma_contract = k <= d;
  const int first = std::clamp(k - 1, 0, d - 1);
  for (int j = first; j < d; ++j) rule.support.push_back(j);
  const int m = static_cast<int>(rule.support.size());
  Matrix g(m, k);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  Matrix w(k, m);
  if (m >= k) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr{Eigen::MatrixXd(g)};
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m, k);
    w = q.transpose();
  } else {
    w = g.transpose();
  }
  rule.weights = Matrix::Zero(k, d);
  for (int c = 0; c < m; ++c) rule.weights.col(rule.support[static_cast<std::size_t>(c)]) = w.col(c);
  return rule;
}

inline Dataset gen_deterministic(const DeterministicRule& rule, int n, RngStream& rng) {
  const int d = static_cast<int>(rule.weights.cols());
  Dataset ds;
  ds.name = "det";
  ds.num_classes = rule.num_classes();
  ds.x.resize(n, d);
  ds.y.resize(static_cast<std::size_t>(n));
  ds.ground_truth.assign(static_cast<std::size_t>(n), rule.support);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) ds.x(i, j) = rng.normal();
    ds.y[static_cast<std::size_t>(i)] = rule.classify(std::span<const double>(ds.x.row(i).data(), d));
  }
  return ds;
}

struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Rejects K > D; use make_deterministic_rule directly to build such a task anyway.
inline Dataset gen_deterministic(int k, int d, int n, RngStream& rng) {
  if (k > d) throw ContractError("gen_deterministic: K > D violates the encoding lemma's hypothesis");
  auto rule_rng = rng.substream("rule");
  const auto rule = make_deterministic_rule(k, d, rule_rng);
  return gen_deterministic(rule, n, rng);
}

// ---------------------------------------------------------------------------
// Splits

inline std::array<Dataset, 3> standard_split(const Dataset& ds, std::array<double, 3> fractions, RngStream& rng) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("standard_split: fractions must sum to 1");
  const int n = ds.size();
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(std::span<int>(idx));
  const int n0 = static_cast<int>(std::llround(fractions[0] * n));
  const int n1 = static_cast<int>(std::llround(fractions[1] * n));
  const int n2 = n - n0 - n1;
  if (n0 <= 0 || n1 <= 0 || n2 <= 0) throw DataError("standard_split: empty split");
  std::array<Dataset, 3> out{
      ds.subset({idx.begin(), idx.begin() + n0}),
      ds.subset({idx.begin() + n0, idx.begin() + n0 + n1}),
      ds.subset({idx.begin() + n0 + n1, idx.end()}),
  };
  out[0].split = Split::Train;
  out[1].split = Split::Val;
  out[2].split = Split::Test;
  return out;
}

/// Carves a validation fraction off a training set; returns (train, val).
inline std::pair<Dataset, Dataset> holdout(const Dataset& ds, double val_fraction, RngStream& rng) {
  const int n = ds.size();
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(std::span<int>(idx));
  const int nv = static_cast<int>(std::llround(val_fraction * n));
  if (nv <= 0 || nv >= n) throw DataError("holdout: empty split");
  auto val = ds.subset({idx.begin(), idx.begin() + nv});
  auto train = ds.subset({idx.begin() + nv, idx.end()});
  train.split = Split::Train;
  val.split = Split::Val;
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// MNIST (IDX, optionally gzip-compressed)

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_maybe_gz(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int got;
  while ((got = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + got);
  const bool failed = got < 0;
  gzclose(f);
  if (failed) throw DataError("read error in " + path.string());
  return out;
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline std::filesystem::path find_idx(const std::filesystem::path& dir, const std::string& stem) {
  for (const auto* suffix : {"", ".gz"}) {
    auto p = dir / (stem + suffix);
    if (std::filesystem::exists(p)) return p;
  }
  throw DataError("missing IDX file " + (dir / stem).string() + "[.gz]");
}

}  // namespace detail

struct IdxImages {
  int count = 0, rows = 0, cols = 0;
  std::vector<unsigned char> pixels;
};

inline IdxImages parse_idx_images(const std::vector<unsigned char>& b) {
  if (b.size() < 16) throw DataError("idx images: truncated header");
  if (detail::be32(b, 0) != kIdxImageMagic) throw DataError("idx images: bad magic");
  IdxImages img;
  img.count = static_cast<int>(detail::be32(b, 4));
  img.rows = static_cast<int>(detail::be32(b, 8));
  img.cols = static_cast<int>(detail::be32(b, 12));
  const std::size_t need = 16 + static_cast<std::size_t>(img.count) * img.rows * img.cols;
  if (b.size() < need) throw DataError("idx images: truncated payload");
  img.pixels.assign(b.begin() + 16, b.begin() + static_cast<std::ptrdiff_t>(need));
  return img;
}

inline std::vector<int> parse_idx_labels(const std::vector<unsigned char>& b) {
  if (b.size() < 8) throw DataError("idx labels: truncated header");
  if (detail::be32(b, 0) != kIdxLabelMagic) throw DataError("idx labels: bad magic");
  const std::size_t n = detail::be32(b, 4);
  if (b.size() < 8 + n) throw DataError("idx labels: truncated payload");
  return {b.begin() + 8, b.begin() + 8 + static_cast<std::ptrdiff_t>(n)};
}

inline std::vector<unsigned char> encode_idx_images(const IdxImages& img) {
  std::vector<unsigned char> b;
  auto put = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
  };
  put(kIdxImageMagic);
  put(static_cast<std::uint32_t>(img.count));
  put(static_cast<std::uint32_t>(img.rows));
  put(static_cast<std::uint32_t>(img.cols));
  b.insert(b.end(), img.pixels.begin(), img.pixels.end());
  return b;
}

inline std::vector<unsigned char> encode_idx_labels(const std::vector<int>& labels) {
  std::vector<unsigned char> b;
  auto put = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
  };
  put(kIdxLabelMagic);
  put(static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) b.push_back(static_cast<unsigned char>(l));
  return b;
}

inline Dataset idx_to_dataset(const IdxImages& img, const std::vector<int>& labels, Split split) {
  if (static_cast<std::size_t>(img.count) != labels.size())
    throw DataError("idx: image count " + std::to_string(img.count) + " != label count " +
                    std::to_string(labels.size()));
  Dataset ds;
  ds.name = "mnist";
  ds.split = split;
  ds.num_classes = 10;
  ds.image_rows = img.rows;
  ds.image_cols = img.cols;
  const int d = img.rows * img.cols;
  ds.x.resize(img.count, d);
  for (int i = 0; i < img.count; ++i)
    for (int j = 0; j < d; ++j) ds.x(i, j) = img.pixels[static_cast<std::size_t>(i) * d + j] / 255.0;
  ds.y = labels;
  ds.validate();
  return ds;
}

/// Reads train-images-idx3-ubyte / train-labels-idx1-ubyte / t10k-* from `dir`.
/// Pixels are scaled to [0, 1].
inline std::pair<Dataset, Dataset> load_mnist(const std::filesystem::path& dir) {
  auto load = [&](const std::string& prefix, Split split) {
    const auto images = parse_idx_images(detail::read_maybe_gz(detail::find_idx(dir, prefix + "-images-idx3-ubyte")));
    const auto labels = parse_idx_labels(detail::read_maybe_gz(detail::find_idx(dir, prefix + "-labels-idx1-ubyte")));
    return idx_to_dataset(images, labels, split);
  };
  return {load("train", Split::Train), load("t10k", Split::Test)};
}

// ---------------------------------------------------------------------------
// Dataset cache: CSV and a flat binary twin ("AMDS")

inline void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  for (int j = 0; j < ds.features(); ++j) out << "x" << (j + 1) << ',';
  out << "label\n";
  for (int i = 0; i < ds.size(); ++i) {
    for (int j = 0; j < ds.features(); ++j) out << ds.x(i, j) << ',';
    out << ds.y[static_cast<std::size_t>(i)] << '\n';
  }
}

inline Dataset read_dataset_csv(const std::filesystem::path& path, int num_classes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  const int d = static_cast<int>(std::count(line.begin(), line.end(), ','));
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    for (int j = 0; j < d; ++j) {
      if (!std::getline(ss, cell, ',')) throw DataError("csv: short row");
      row.push_back(std::stod(cell));
    }
    if (!std::getline(ss, cell)) throw DataError("csv: missing label");
    labels.push_back(std::stoi(cell));
    rows.push_back(std::move(row));
  }
  Dataset ds;
  ds.name = path.stem().string();
  ds.num_classes = num_classes;
  ds.x.resize(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < d; ++j) ds.x(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  ds.y = std::move(labels);
  ds.validate();
  return ds;
}

inline void write_dataset_binary(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const std::uint32_t hdr[3] = {static_cast<std::uint32_t>(ds.size()), static_cast<std::uint32_t>(ds.features()),
                                static_cast<std::uint32_t>(ds.num_classes)};
  out.write("AMDS", 4);
  out.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
  out.write(reinterpret_cast<const char*>(ds.x.data()), static_cast<std::streamsize>(ds.x.size() * sizeof(double)));
  std::vector<std::int32_t> y(ds.y.begin(), ds.y.end());
  out.write(reinterpret_cast<const char*>(y.data()), static_cast<std::streamsize>(y.size() * sizeof(std::int32_t)));
}

inline Dataset read_dataset_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  std::uint32_t hdr[3];
  if (!in.read(magic, 4) || std::string(magic, 4) != "AMDS") throw DataError("dataset binary: bad magic");
  if (!in.read(reinterpret_cast<char*>(hdr), sizeof hdr)) throw DataError("dataset binary: truncated header");
  Dataset ds;
  ds.name = path.stem().string();
  ds.num_classes = static_cast<int>(hdr[2]);
  ds.x.resize(hdr[0], hdr[1]);
  std::vector<std::int32_t> y(hdr[0]);
  if (!in.read(reinterpret_cast<char*>(ds.x.data()), static_cast<std::streamsize>(ds.x.size() * sizeof(double))) ||
      !in.read(reinterpret_cast<char*>(y.data()), static_cast<std::streamsize>(y.size() * sizeof(std::int32_t))))
    throw DataError("dataset binary: truncated payload");
  ds.y.assign(y.begin(), y.end());
  ds.validate();
  return ds;
}

}  // namespace amortix
