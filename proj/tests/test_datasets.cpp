#include "amortix/datasets.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <zlib.h>

using namespace amortix;

namespace {

std::vector<double> row_of(const Dataset& ds, int i) { return {ds.x.row(i).data(), ds.x.row(i).data() + ds.features()}; }

std::vector<double> zero_row() { return std::vector<double>(kSyntheticFeatures, 0.0); }

}  // namespace

TEST(Synthetic, LeafValuesAtSimplePoints) {
  auto x = zero_row();
  x[10] = -1.0;
  const auto s1 = synthetic_tree(SyntheticId::S1);
  EXPECT_EQ(s1.route(x), 0);
  EXPECT_DOUBLE_EQ(s1.prob_positive(x), 0.5);
  x[10] = 1.0;
  EXPECT_EQ(s1.route(x), 1);
  EXPECT_NEAR(s1.prob_positive(x), 1.0 / (1.0 + std::exp(-4.0)), 1e-15);
  EXPECT_NEAR(s1.prob_positive(x), 0.9820, 5e-5);
}

TEST(Synthetic, LeafFormulasAgainstDirectEvaluation) {
  RngStream rng(1, "leaf");
  const auto c = synthetic::leaf_c();
  const auto b = synthetic::leaf_b();
  const auto a = synthetic::leaf_a();
  for (int t = 0; t < 100; ++t) {
    std::vector<double> x(11);
    for (auto& v : x) v = rng.normal();
    const double fa = std::exp(x[0] * x[1]);
    const double fb = std::exp(x[2] * x[2] + x[3] * x[3] + x[4] * x[4] + x[5] * x[5] - 4.0);
    EXPECT_NEAR(a.f(x), fa, 1e-12 * fa);
    EXPECT_NEAR(b.f(x), fb, 1e-12 * fb);
    const double fc = std::exp(-10.0 * std::sin(0.2 * x[6]) + std::fabs(x[7]) + x[8] + std::exp(-x[9]) - 2.4);
    EXPECT_NEAR(c.f(x), fc, 1e-12 * fc);
  }
}

TEST(Synthetic, BranchBoundaryGoesRight) {
  auto x = zero_row();
  x[10] = 0.0;
  EXPECT_EQ(synthetic_tree(SyntheticId::S2).route(x), 1);
}

TEST(Synthetic, GroundTruthIsActiveLeafPlusControl) {
  auto [tr, te] = synthetic_train_test(SyntheticId::S1, 3, 500, 10);
  for (int i = 0; i < tr.size(); ++i) {
    std::set<int> g(tr.ground_truth[static_cast<std::size_t>(i)].begin(), tr.ground_truth[static_cast<std::size_t>(i)].end());
    const std::set<int> want = tr.x(i, 10) < 0 ? std::set<int>{0, 1, 10} : std::set<int>{2, 3, 4, 5, 10};
    EXPECT_EQ(g, want);
  }
  const std::map<SyntheticId, std::pair<std::set<int>, std::set<int>>> leaves{
      {SyntheticId::S2, {{0, 1, 10}, {6, 7, 8, 9, 10}}}, {SyntheticId::S3, {{2, 3, 4, 5, 10}, {6, 7, 8, 9, 10}}}};
  for (const auto& [id, sets] : leaves) {
    auto [ds, unused] = synthetic_train_test(id, 4, 300, 10);
    for (int i = 0; i < ds.size(); ++i) {
      std::set<int> g(ds.ground_truth[static_cast<std::size_t>(i)].begin(), ds.ground_truth[static_cast<std::size_t>(i)].end());
      EXPECT_EQ(g, ds.x(i, 10) < 0 ? sets.first : sets.second);
    }
  }
}

TEST(Synthetic, ControlFeatureNeverInsideALeaf) {
  for (auto id : {SyntheticId::S1, SyntheticId::S2, SyntheticId::S3}) {
    const auto tree = synthetic_tree(id);
    EXPECT_TRUE(tree.leaf_sets_distinct());
    for (int l = 0; l < 2; ++l) {
      const auto& f = tree.leaves[static_cast<std::size_t>(l)].features;
      EXPECT_EQ(std::count(f.begin(), f.end(), kSyntheticControl), 0);
      EXPECT_EQ(tree.control_features(l), std::vector<int>{kSyntheticControl});
    }
  }
}

TEST(Synthetic, MarginalsLookStandardNormal) {
  auto [ds, unused] = synthetic_train_test(SyntheticId::S3, 5, 10000, 10);
  EXPECT_EQ(ds.features(), 11);
  for (int j = 0; j < 11; ++j) {
    const double mean = ds.x.col(j).mean();
    const double var = (ds.x.col(j).array() - mean).square().mean();
    EXPECT_NEAR(mean, 0.0, 0.05) << "feature " << j;
    EXPECT_NEAR(var, 1.0, 0.05) << "feature " << j;
  }
}

TEST(Synthetic, LabelFrequenciesTrackLeafProbabilityByDecile) {
  for (auto id : {SyntheticId::S1, SyntheticId::S2, SyntheticId::S3}) {
    auto [ds, unused] = synthetic_train_test(id, 6, 20000, 10);
    const auto tree = synthetic_tree(id);
    std::vector<std::pair<double, int>> pf;
    for (int i = 0; i < ds.size(); ++i) pf.emplace_back(tree.prob_positive(row_of(ds, i)), ds.y[static_cast<std::size_t>(i)]);
    std::sort(pf.begin(), pf.end());
    const std::size_t bin = pf.size() / 10;
    for (std::size_t b = 0; b < 10; ++b) {
      double p = 0, y = 0, var = 0;
      for (std::size_t i = b * bin; i < (b + 1) * bin; ++i) {
        p += pf[i].first;
        y += pf[i].second;
        var += pf[i].first * (1 - pf[i].first);
      }
      EXPECT_NEAR(y / bin, p / bin, 4.0 * std::sqrt(var) / bin + 1e-9) << "decile " << b;
    }
  }
}

TEST(Synthetic, TrainAndTestAreReproducibleAndDistinct) {
  auto [a_tr, a_te] = synthetic_train_test(SyntheticId::S2, 7, 100, 100);
  auto [b_tr, b_te] = synthetic_train_test(SyntheticId::S2, 7, 100, 100);
  EXPECT_EQ(a_tr.x, b_tr.x);
  EXPECT_EQ(a_tr.y, b_tr.y);
  EXPECT_NE(a_tr.x, a_te.x);
  EXPECT_EQ(a_tr.split, Split::Train);
  EXPECT_EQ(a_te.split, Split::Test);
  auto [c_tr, c_te] = synthetic_train_test(SyntheticId::S2, 8, 100, 100);
  EXPECT_NE(a_tr.x, c_tr.x);
}

TEST(Deterministic, BalancedAndRepeatable) {
  RngStream rng(9, "det");
  const Dataset ds = gen_deterministic(2, 6, 10000, rng);
  const double pos = std::count(ds.y.begin(), ds.y.end(), 1) / 10000.0;
  EXPECT_NEAR(pos, 0.5, 0.05);
  RngStream r2(9, "det");
  const Dataset again = gen_deterministic(2, 6, 10000, r2);
  EXPECT_EQ(ds.y, again.y);
}

TEST(Deterministic, LabelIsArgmaxOfLinearScores) {
  RngStream rng(10, "rule");
  const auto rule = make_deterministic_rule(10, 20, rng);
  EXPECT_TRUE(rule.within_lemma_contract);
  EXPECT_EQ(rule.support.front(), 9);
  // Rows are orthonormal on the support.
  const Matrix gram = rule.weights * rule.weights.transpose();
  EXPECT_TRUE(gram.isApprox(Matrix::Identity(10, 10), 1e-10));
  RngStream data(11, "data");
  const Dataset ds = gen_deterministic(rule, 500, data);
  for (int i = 0; i < ds.size(); ++i) {
    const RowVector scores = ds.x.row(i) * rule.weights.transpose();
    Eigen::Index best;
    scores.maxCoeff(&best);
    EXPECT_EQ(ds.y[static_cast<std::size_t>(i)], best);
  }
  std::vector<int> counts(10, 0);
  for (int v : ds.y) ++counts[static_cast<std::size_t>(v)];
  for (int c : counts) EXPECT_GT(c, 20);
}

TEST(Deterministic, SameInputSameLabel) {
  RngStream rng(12, "rule");
  const auto rule = make_deterministic_rule(4, 8, rng);
  std::vector<double> x{0.3, -1.0, 2.2, 0.1, -0.4, 1.1, 0.0, 0.8};
  EXPECT_EQ(rule.classify(x), rule.classify(x));
}

TEST(Deterministic, KAboveDIsRejected) {
  RngStream rng(13, "bad");
  EXPECT_THROW(gen_deterministic(5, 4, 10, rng), ContractError);
  EXPECT_FALSE(make_deterministic_rule(5, 4, rng).within_lemma_contract);
}

TEST(Splits, SizesAreExactAndDisjoint) {
  Dataset ds;
  ds.x.resize(10, 1);
  for (int i = 0; i < 10; ++i) {
    ds.x(i, 0) = i;
    ds.y.push_back(i % 2);
  }
  RngStream rng(14, "split");
  const auto parts = standard_split(ds, {0.8, 0.1, 0.1}, rng);
  EXPECT_EQ(parts[0].size(), 8);
  EXPECT_EQ(parts[1].size(), 1);
  EXPECT_EQ(parts[2].size(), 1);
  std::multiset<double> all;
  for (const auto& p : parts)
    for (int i = 0; i < p.size(); ++i) all.insert(p.x(i, 0));
  EXPECT_EQ(all, (std::multiset<double>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
  RngStream again(14, "split");
  EXPECT_EQ(standard_split(ds, {0.8, 0.1, 0.1}, again)[1].x, parts[1].x);
  RngStream r3(15, "x");
  EXPECT_THROW(standard_split(ds, {0.5, 0.2, 0.2}, r3), std::invalid_argument);
  EXPECT_THROW(standard_split(ds, {0.98, 0.01, 0.01}, r3), DataError);
}

TEST(Splits, HoldoutKeepsGroundTruthAligned) {
  auto [ds, unused] = synthetic_train_test(SyntheticId::S1, 16, 200, 10);
  RngStream rng(17, "holdout");
  auto [tr, va] = holdout(ds, 0.1, rng);
  EXPECT_EQ(va.size(), 20);
  EXPECT_EQ(tr.size(), 180);
  for (int i = 0; i < va.size(); ++i) {
    const bool left = va.x(i, 10) < 0;
    EXPECT_EQ(va.ground_truth[static_cast<std::size_t>(i)].size(), left ? 3U : 5U);
  }
}

TEST(Dataset, ValidateCatchesBadLabelsAndIndices) {
  Dataset ds;
  ds.x = Matrix::Zero(2, 3);
  ds.y = {0, 2};
  EXPECT_THROW(ds.validate(), DataError);
  ds.y = {0, 1};
  ds.ground_truth = {{0}, {3}};
  EXPECT_THROW(ds.validate(), DataError);
  ds.ground_truth = {{0}, {2}};
  EXPECT_NO_THROW(ds.validate());
}

TEST(Idx, SizeArithmeticAndRoundTrip) {
  IdxImages img;
  img.count = 3;
  img.rows = 2;
  img.cols = 2;
  img.pixels = {0, 255, 128, 64, 1, 2, 3, 4, 5, 6, 7, 8};
  const auto bytes = encode_idx_images(img);
  EXPECT_EQ(bytes.size(), 16U + 3 * 4);
  EXPECT_EQ(16ULL + 60000ULL * 784ULL, 47040016ULL);
  const auto back = parse_idx_images(bytes);
  EXPECT_EQ(back.pixels, img.pixels);
  const auto ds = idx_to_dataset(back, parse_idx_labels(encode_idx_labels({1, 9, 0})), Split::Train);
  EXPECT_DOUBLE_EQ(ds.x(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(ds.x(0, 2), 128.0 / 255.0);
  EXPECT_GE(ds.x.minCoeff(), 0.0);
  EXPECT_LE(ds.x.maxCoeff(), 1.0);
  EXPECT_TRUE(ds.is_image());
}

TEST(Idx, RejectsBadMagicTruncationAndCountMismatch) {
  IdxImages img{2, 1, 1, {1, 2}};
  auto bytes = encode_idx_images(img);
  auto bad = bytes;
  bad[3] = 0x01;
  EXPECT_THROW(parse_idx_images(bad), DataError);
  bytes.pop_back();
  EXPECT_THROW(parse_idx_images(bytes), DataError);
  auto labels = encode_idx_labels({1, 2});
  labels[3] = 0x03;
  EXPECT_THROW(parse_idx_labels(labels), DataError);
  EXPECT_THROW(idx_to_dataset(img, {1}, Split::Train), DataError);
  EXPECT_THROW(idx_to_dataset(img, {1, 11}, Split::Train), DataError);
}

TEST(Idx, LoadsGzipAndPlainFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "amortix_idx_test";
  std::filesystem::create_directories(dir);
  const IdxImages img{2, 2, 2, {0, 10, 20, 30, 40, 50, 60, 70}};
  const auto raw = encode_idx_images(img);
  gzFile f = gzopen((dir / "train-images-idx3-ubyte.gz").string().c_str(), "wb");
  gzwrite(f, raw.data(), static_cast<unsigned>(raw.size()));
  gzclose(f);
  auto put = [&](const std::string& name, const std::vector<unsigned char>& b) {
    std::ofstream out(dir / name, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  };
  put("train-labels-idx1-ubyte", encode_idx_labels({3, 4}));
  put("t10k-images-idx3-ubyte", raw);
  put("t10k-labels-idx1-ubyte", encode_idx_labels({5, 6}));
  auto [tr, te] = load_mnist(dir);
  EXPECT_EQ(tr.size(), 2);
  EXPECT_EQ(tr.y, (std::vector<int>{3, 4}));
  EXPECT_EQ(te.y, (std::vector<int>{5, 6}));
  EXPECT_DOUBLE_EQ(tr.x(1, 3), 70.0 / 255.0);
  std::filesystem::remove(dir / "t10k-labels-idx1-ubyte");
  EXPECT_THROW(load_mnist(dir), DataError);
  std::filesystem::remove_all(dir);
}

TEST(Cache, CsvAndBinaryRoundTrip) {
  auto [ds, unused] = synthetic_train_test(SyntheticId::S1, 18, 50, 10);
  const auto dir = std::filesystem::temp_directory_path() / "amortix_cache_test";
  std::filesystem::create_directories(dir);
  write_dataset_csv(ds, dir / "s1.csv");
  write_dataset_binary(ds, dir / "s1.bin");
  const auto csv = read_dataset_csv(dir / "s1.csv", 2);
  const auto bin = read_dataset_binary(dir / "s1.bin");
  EXPECT_EQ(csv.x, ds.x);
  EXPECT_EQ(csv.y, ds.y);
  EXPECT_EQ(bin.x, ds.x);
  EXPECT_EQ(bin.y, ds.y);
  std::ifstream in(dir / "s1.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "x1,x2,x3,x4,x5,x6,x7,x8,x9,x10,x11,label");
  std::filesystem::remove_all(dir);
}
