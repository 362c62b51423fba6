#include "amortix/experiment.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

using namespace amortix;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("amortix-test-" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(AMORTIX_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) { return read_text(p); }

ExperimentConfig tiny_experiment(const fs::path& out) {
  ExperimentConfig c;
  c.name = "tiny";
  c.data.id = DatasetId::S1;
  c.data.n_train = 600;
  c.data.n_test = 200;
  c.data.data_seed = 7;
  c.methods = {MethodId::RealX, MethodId::L2X};
  c.grid[MethodId::RealX] = {0.1, 0.5};
  c.grid[MethodId::L2X] = {3};
  c.profile = "ci";
  c.seeds = {1, 2};
  c.epochs = 2;
  c.out = out.string();
  return c;
}

const char* kTrainArgs = "train --method realx --dataset s1 --lambda 0.1 --seed 3 --profile ci --epochs 2 "
                         "--n-train 500 --n-test 200 --data-seed 4";

}  // namespace

TEST(Config, SerializeParseRoundTrip) {
  auto c = tiny_experiment("runs/tiny");
  c.selector_bias = 1.5;
  c.selector_lr = 2e-4;
  c.oracle = true;
  c.jobs = 2;
  c.data.val_fraction = 0.15;
  const auto back = parse_experiment_config(serialize_experiment_config(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize_experiment_config(back), serialize_experiment_config(c));
}

TEST(Config, CommentsAndDefaults) {
  const auto c = parse_experiment_config("# header\n[experiment]\ndataset = s2  # inline\n\n[data]\nseed = 3\n");
  EXPECT_EQ(c.data.id, DatasetId::S2);
  EXPECT_EQ(c.data.data_seed, 3U);
  EXPECT_EQ(c.methods.size(), 4U);
  EXPECT_EQ(c.grid_for(MethodId::L2X), default_grid(MethodId::L2X, DatasetId::S2));
  EXPECT_DOUBLE_EQ(c.data.val_fraction, 0.1);
  EXPECT_EQ(c.resolved_profile().seeds.size(), 5U);
}

TEST(Config, ErrorsNameTheLine) {
  const std::vector<std::string> bad{
      "[experiment]\nepochs = ten\n",         "[nope]\n",
      "[experiment]\nfoo = 1\n",             "dataset = s1\n",
      "[experiment]\nmethods = evalx\n",     "[experiment]\nmethods = full\n",
      "[experiment]\ndataset = cifar\n",      "[data]\nval_fraction = 1.0\n",
      "[experiment]\nprofile = huge\n",       "[grid]\nrealx = \n",
      "[grid]\nfull = 1\n",                   "[experiment]\njobs = 0\n",
      "[experiment]\noracle = maybe\n",       "[experiment]\nepochs = 1.5\n",
      "[experiment\n",                         "[experiment]\njust words\n"};
  for (const auto& text : bad) EXPECT_THROW(parse_experiment_config(text), ConfigError) << text;
  try {
    parse_experiment_config("[experiment]\n\nepochs = x\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  EXPECT_THROW(parse_experiment_config("[experiment]\ndataset = mnist\n[data]\nmnist_dir = /nonexistent/dir\n"),
               ConfigError);
  EXPECT_NO_THROW(parse_experiment_config("[experiment]\ndataset = mnist\n[data]\nmnist_dir = /nonexistent/dir\n", false));
}

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"s1.conf", "mnist.conf"}) {
    const auto c = parse_experiment_config(read_text(fs::path(AMORTIX_SOURCE_DIR) / "configs" / name), false);
    EXPECT_EQ(parse_experiment_config(serialize_experiment_config(c), false), c) << name;
  }
}

TEST(Profiles, CiIsSmallerThanFull) {
  const auto full = profile_for("full", DatasetId::S1);
  const auto ci = profile_for("ci", DatasetId::S1);
  EXPECT_EQ(full.epochs, 1000);
  EXPECT_DOUBLE_EQ(full.lr, 1e-4);
  EXPECT_FALSE(full.selector_lr.has_value());
  EXPECT_EQ(full.selector_hidden, (std::vector<int>{200, 200, 200}));
  EXPECT_LT(ci.epochs, full.epochs);
  EXPECT_LT(*ci.selector_lr, ci.lr);
  EXPECT_EQ(profile_for("full", DatasetId::Mnist).batch, 128);
  EXPECT_THROW(profile_for("huge", DatasetId::S1), ConfigError);
}

TEST(Reports, CsvSchemaIsPinned) {
  EXPECT_EQ(report_csv_header(),
            "method,dataset,config_hash,lambda,k,seed,acc,auroc,e_acc,e_auroc,c_auroc,cfsr,tpr,fdr,mean_selected");
  MetricReport r;
  r.method = "realx";
  r.dataset = "s1";
  r.config_hash = "0123456789abcdef";
  r.lambda = 0.1;
  r.seed = 4;
  r.acc = 0.8125;
  r.auroc = 0.9;
  r.e_auroc = 0.7;
  r.cfsr = 1.0 / 3.0;
  r.mean_selected = 2.5;
  const std::string row = report_csv_row(r);
  EXPECT_EQ(row, "realx,s1,0123456789abcdef,0.10000000000000001,,4,0.8125,0.90000000000000002,,"
                 "0.69999999999999996,,0.33333333333333331,,,2.5");
  const auto back = parse_report_csv_row(row);
  EXPECT_EQ(report_csv_row(back), row);
  EXPECT_EQ(report_to_json(report_from_json(report_to_json(r))), report_to_json(r));
}

TEST(Reports, AveragingAndTableAssembly) {
  MetricReport a, b;
  a.method = b.method = "l2x";
  a.dataset = b.dataset = "s1";
  a.k = b.k = 3;
  a.acc = 0.6;
  b.acc = 0.8;
  a.cfsr = 0.2;
  b.cfsr = 0.4;
  a.e_auroc = 0.7;
  a.seed = 1;
  b.seed = 2;
  const auto m = average_reports({a, b});
  EXPECT_DOUBLE_EQ(m.acc, 0.7);
  EXPECT_DOUBLE_EQ(*m.cfsr, 0.3);
  EXPECT_FALSE(m.e_auroc.has_value());
  EXPECT_EQ(m.seed, 0U);

  const fs::path dir = scratch("assemble");
  write_text(dir / "a.csv", report_csv_header() + "\n" + report_csv_row(a) + "\n");
  write_text(dir / "b.csv", report_csv_header() + "\n" + report_csv_row(b) + "\n");
  const auto rows = assemble_table({dir / "a.csv", dir / "b.csv"});
  ASSERT_EQ(rows.size(), 1U);
  EXPECT_DOUBLE_EQ(rows[0].acc, 0.7);
  EXPECT_NE(table_text(rows).find("CFSR"), std::string::npos);
}

TEST(RunSpec, RoundTripAndCheckpointsReload) {
  RunSpec r;
  r.data.id = DatasetId::Det;
  r.data.det_k = 4;
  r.data.det_d = 6;
  r.data.val_fraction = 0.25;
  r.method.method = MethodId::L2X;
  r.method.k = 2;
  const auto back = parse_run_spec(serialize_run_spec(r));
  EXPECT_EQ(back.data, r.data);
  EXPECT_EQ(back.method.serialize(), r.method.serialize());
}

TEST(Bundles, DeterministicAndSeedSensitive) {
  DatasetSpec s;
  s.n_train = 300;
  s.n_test = 100;
  s.data_seed = 5;
  const auto a = load_bundle(s), b = load_bundle(s);
  EXPECT_EQ(bundle_hash(a), bundle_hash(b));
  EXPECT_EQ(a.val.size(), 30);
  s.data_seed = 6;
  EXPECT_NE(bundle_hash(load_bundle(s)), bundle_hash(a));
  s.id = DatasetId::Det;
  s.det_k = 3;
  s.det_d = 5;
  const auto det = load_bundle(s);
  EXPECT_EQ(det.train.features(), 5);
  EXPECT_EQ(det.train.num_classes, 3);
}

TEST(Experiment, RerunIsANoOpAndForceRetrains) {
  const fs::path out = scratch("experiment");
  const auto cfg = tiny_experiment(out);
  const auto first = run_experiment(cfg);
  for (const auto& c : first.cells) EXPECT_TRUE(c.ok) << c.cell << ": " << c.error;
  EXPECT_EQ(first.cells.size(), 1U + 2 * 2 + 1 * 2);
  ASSERT_EQ(first.table.size(), 3U);
  EXPECT_EQ(first.table[0].method, "full");
  EXPECT_EQ(first.chosen_value.at(MethodId::L2X), 3.0);
  const std::string table = slurp(out / "table.csv");
  const std::string metrics = slurp(out / "realx/lambda0.10000000000000001/seed1/metrics.json");

  const auto second = run_experiment(cfg);
  for (const auto& c : second.cells) EXPECT_TRUE(c.reused) << c.cell;
  EXPECT_EQ(slurp(out / "table.csv"), table);
  const auto manifest = RunManifest::load(out / "manifest.jsonl");
  int skipped = 0;
  for (const auto& e : manifest.entries) skipped += e.status == "skipped";
  EXPECT_EQ(skipped, 8);
  EXPECT_EQ(manifest.failures(), 0);

  const auto third = run_experiment(cfg, true);
  for (const auto& c : third.cells) EXPECT_FALSE(c.reused);
  EXPECT_EQ(slurp(out / "table.csv"), table);
  EXPECT_EQ(slurp(out / "realx/lambda0.10000000000000001/seed1/metrics.json"), metrics);

  // A changed config re-runs only the affected cells.
  auto changed = cfg;
  changed.grid[MethodId::L2X] = {2};
  const auto fourth = run_experiment(changed);
  for (const auto& c : fourth.cells) EXPECT_EQ(c.reused, c.method != MethodId::L2X) << c.cell;
}

TEST(Experiment, MissingArtifactForcesRetrain) {
  const fs::path out = scratch("missing");
  auto cfg = tiny_experiment(out);
  cfg.methods = {MethodId::RealX};
  cfg.grid[MethodId::RealX] = {0.1};
  cfg.seeds = {1};
  run_experiment(cfg);
  fs::remove(out / "realx/lambda0.10000000000000001/seed1/predictor.amx");
  const auto again = run_experiment(cfg);
  EXPECT_TRUE(again.cells[0].reused);
  EXPECT_FALSE(again.cells[1].reused);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli-codes");
  EXPECT_EQ(cli("--help"), 0);
  EXPECT_EQ(cli(""), 2);
  EXPECT_EQ(cli("train --method nope --dataset s1 --out " + (dir / "a").string()), 2);
  EXPECT_EQ(cli("train --method l2x --dataset s1 --lambda 0.1 --k 2 --out " + (dir / "b").string()), 2);
  EXPECT_EQ(cli("train --method realx --dataset s1 --out " + (dir / "c").string()), 2);  // lambda missing
  EXPECT_EQ(cli("train --method l2x --dataset s1 --k 20 --epochs 1 --n-train 200 --n-test 50 --profile ci --out " +
                (dir / "d").string()),
            2);
  write_text(dir / "bad.conf", "[experiment]\nepochs = soon\n");
  EXPECT_EQ(cli("run --config " + (dir / "bad.conf").string()), 2);
  EXPECT_EQ(cli(std::string(kTrainArgs) + " --out " + (dir / "ok").string()), 0);
  write_text(dir / "broken.amx", "not a checkpoint");
  EXPECT_EQ(cli("evaluate --run " + (dir / "ok").string() + " --evaluator " + (dir / "broken.amx").string()), 1);
}

TEST(Cli, TrainIsByteReproducible) {
  const fs::path dir = scratch("cli-repro");
  ASSERT_EQ(cli(std::string(kTrainArgs) + " --out " + (dir / "a").string()), 0);
  ASSERT_EQ(cli(std::string(kTrainArgs) + " --out " + (dir / "b").string()), 0);
  EXPECT_EQ(slurp(dir / "a/metrics.json"), slurp(dir / "b/metrics.json"));
  EXPECT_EQ(detail::read_file(dir / "a/predictor.amx"), detail::read_file(dir / "b/predictor.amx"));
  const auto j = Json::parse(slurp(dir / "a/metrics.json"));
  EXPECT_EQ(j.at("method"), "realx");
  EXPECT_EQ(j.at("predictor_selector_bytes"), 0);
}

TEST(Cli, EvaluatorOracleEvaluateAndTable) {
  const fs::path dir = scratch("cli-flow");
  const std::string data = " --dataset s1 --profile ci --n-train 500 --n-test 200 --data-seed 4";
  ASSERT_EQ(cli("train --method evalx --epochs 2 --out " + (dir / "ev").string() + data), 0);
  ASSERT_EQ(cli(std::string(kTrainArgs) + " --evaluator " + (dir / "ev/evaluator.amx").string() + " --out " +
                (dir / "run").string()),
            0);
  const auto m = Json::parse(slurp(dir / "run/metrics.json"));
  EXPECT_FALSE(m.at("e_auroc").is_null());
  ASSERT_EQ(cli("oracle --dataset s1 --data-seed 4 --profile ci --epochs 1 --out " + (dir / "oracle").string()), 0);
  ASSERT_EQ(cli("evaluate --run " + (dir / "run").string() + " --evaluator " + (dir / "ev/evaluator.amx").string() +
                " --oracle " + (dir / "oracle").string()),
            0);
  const auto r = Json::parse(slurp(dir / "run/report.json"));
  EXPECT_FALSE(r.at("c_auroc").is_null());
  EXPECT_DOUBLE_EQ(r.at("e_auroc").get<double>(), m.at("e_auroc").get<double>());
  ASSERT_EQ(cli("table --runs " + (dir / "run").string() + " --out " + dir.string()), 0);
  EXPECT_EQ(slurp(dir / "table.csv").substr(0, report_csv_header().size()), report_csv_header());
  EXPECT_EQ(cli("table --runs " + (dir / "nothing-here").string()), 2);
}

TEST(Cli, EncodingDemo) {
  const fs::path dir = scratch("cli-demo");
  ASSERT_EQ(cli("demo-encoding --k 4 --d 6 --seed 2 --out " + dir.string()), 0);
  const auto j = Json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(j.at("jam_acc"), 1.0);
  EXPECT_EQ(j.at("capacity_j"), 1);
  EXPECT_TRUE(fs::exists(dir / "codebook.csv"));
  EXPECT_TRUE(fs::exists(dir / "codeword_class3.pgm"));
  EXPECT_EQ(cli("demo-encoding --k 100 --d 6 --out " + dir.string()), 2);
}
