// amortix: train, audit and tabulate amortized feature-selection explainers.

#include "amortix/encoding.hpp"
#include "amortix/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace amortix;

constexpr int kExitOk = 0;
constexpr int kExitRunFailure = 1;
constexpr int kExitConfig = 2;

struct TrainArgs {
  std::string method = "realx";
  std::string dataset = "s1";
  std::optional<double> lambda;
  std::optional<int> k;
  std::uint64_t seed = 1;
  std::string out;
  std::string profile = "full";
  std::optional<int> epochs;
  std::optional<double> selector_lr;
  std::uint64_t data_seed = 0;
  std::string mnist_dir;
  std::string evaluator;
  int n_train = 10000;
  int n_test = 10000;
};

DatasetSpec dataset_spec(const std::string& name, std::uint64_t data_seed, const std::string& mnist_dir, int n_train,
                         int n_test) {
  auto id = parse_dataset(name);
  if (!id) throw ConfigError("unknown dataset " + name);
  DatasetSpec spec;
  spec.id = *id;
  spec.data_seed = data_seed;
  spec.mnist_dir = mnist_dir;
  spec.n_train = *id == DatasetId::Mnist ? 0 : n_train;
  spec.n_test = n_test;
  return spec;
}

int cmd_train(const TrainArgs& a) {
  auto method = parse_method(a.method);
  if (!method) throw ConfigError("unknown method " + a.method);
  const DatasetSpec spec = dataset_spec(a.dataset, a.data_seed, a.mnist_dir, a.n_train, a.n_test);
  Profile prof = profile_for(a.profile, spec.id);
  if (a.epochs) prof.epochs = *a.epochs;
  if (a.selector_lr) prof.selector_lr = *a.selector_lr;
  MethodConfig cfg = cell_config(prof, *method, std::nullopt, a.seed);
  cfg.lambda = a.lambda;
  cfg.k = a.k;
  const fs::path out = a.out;

  const DataBundle data = load_bundle(spec);
  if (*method == MethodId::EvalX) {
    cfg.epochs = a.epochs.value_or(prof.evalx_epochs);
    cfg.validate();
    const Evaluator ev = train_evalx(data.train, data.val, cfg);
    save_evaluator(ev, spec, cfg, out);
    const Matrix ones = Matrix::Ones(data.test.size(), data.test.features());
    const auto audit = audit_with_evalx(ev, data.test, ones);
    Json j;
    j["method"] = "evalx";
    j["dataset"] = dataset_name(spec.id);
    j["config_hash"] = cfg.hash();
    j["seed"] = cfg.seed;
    j["full_input_acc"] = audit.e_acc;
    j["full_input_auroc"] = optional_json(audit.e_auroc);
    write_text(out / "metrics.json", j.dump(2) + "\n");
    std::cout << "evaluator written to " << (out / "evaluator.amx").string() << '\n';
    return kExitOk;
  }
  cfg.validate();
  const TrainedExplainer te = train_method(data.train, data.val, cfg);
  std::optional<Evaluator> ev;
  if (!a.evaluator.empty()) ev = load_evaluator(a.evaluator);
  const MetricReport r = full_report(te, data, ev ? &*ev : nullptr, nullptr);
  save_explainer(te, spec, out);
  RngStream eval_rng(te.config.seed, "evaluation-sampling");
  const Matrix masks = te.select(data.test.x, &eval_rng);
  detail::write_file(out / "masks.amsk", encode_masks_binary(masks));
  write_text(out / "metrics.json", metrics_json(r, summarize_validation(te, data.val), te));
  std::cout << table_text({r});
  return kExitOk;
}

int cmd_evaluate(const std::string& run, const std::string& evaluator, const std::string& oracle_dir) {
  auto [te, spec] = load_explainer(run);
  const DataBundle data = load_bundle(spec);
  const Evaluator ev = load_evaluator(evaluator);
  std::optional<SubsetOracle> oracle;
  if (!oracle_dir.empty()) oracle = load_oracle(fs::path(oracle_dir) / "oracle.bin");
  const MetricReport r = full_report(te, data, &ev, oracle ? &*oracle : nullptr);
  write_text(fs::path(run) / "report.json", report_to_json(r).dump(2) + "\n");
  write_text(fs::path(run) / "report.csv", report_csv_header() + "\n" + report_csv_row(r) + "\n");
  std::cout << table_text({r});
  return kExitOk;
}

int cmd_oracle(const std::string& dataset, std::uint64_t data_seed, const std::string& profile, const std::string& out,
               int threads, std::optional<int> epochs) {
  const DatasetSpec spec = dataset_spec(dataset, data_seed, "", 10000, 10000);
  if (spec.id == DatasetId::Mnist || (spec.id == DatasetId::Det && spec.det_d > 14)) throw ConfigError("exhaustive oracle needs D <= 14");
  const Profile prof = profile_for(profile, spec.id);
  const DataBundle data = load_bundle(spec);
  OracleOptions oo;
  oo.hidden = prof.oracle_hidden;
  oo.fit = {{prof.lr}, prof.batch, epochs.value_or(prof.oracle_epochs), prof.patience};
  oo.seed = prof.seeds.front();
  oo.threads = threads;
  const SubsetOracle o = build_subset_oracle(data.train, data.val, oo);
  save_oracle(o, fs::path(out) / "oracle.bin");
  std::cout << o.models.size() + 1 << " subset models (including the empty subset) written to " << out << '\n';
  return kExitOk;
}

int cmd_table(const std::vector<std::string>& patterns, const std::string& out) {
  std::vector<fs::path> files;
  for (const auto& pat : patterns) {
    const fs::path p(pat);
    if (fs::is_directory(p)) {
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.path().filename() == "report.csv") files.push_back(e.path());
    } else if (fs::exists(p)) {
      files.push_back(p);
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no report.csv files found");
  const auto rows = assemble_table(files);
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  write_text(dir / "table.csv", table_csv(rows));
  write_text(dir / "table.txt", table_text(rows));
  std::cout << table_text(rows);
  return kExitOk;
}

int cmd_demo(int k, int d, const std::string& out, std::uint64_t seed, const std::string& profile) {
  EncodingDemoOptions opt;
  opt.k = k;
  opt.d = d;
  opt.seed = seed;
  const Profile prof = profile_for(profile, DatasetId::Det);
  opt.evaluator = cell_config(prof, MethodId::EvalX, std::nullopt, seed);
  opt.evaluator.epochs = prof.evalx_epochs;
  const EncodingDemo demo = run_encoding_demo(opt);
  const fs::path dir = out;
  fs::create_directories(dir);
  {
    std::ofstream cb(dir / "codebook.csv");
    cb << "class,features\n";
    for (std::size_t c = 0; c < demo.pair.codebook.size(); ++c) {
      cb << c << ",\"";
      bool first = true;
      for (std::size_t j = 0; j < demo.pair.codebook[c].size(); ++j)
        if (demo.pair.codebook[c][j]) {
          cb << (first ? "" : " ") << j;
          first = false;
        }
      cb << "\"\n";
    }
  }
  Json j;
  j["k"] = k;
  j["d"] = d;
  j["capacity_j"] = *capacity_J(d, static_cast<std::uint64_t>(k));
  j["jam_acc"] = demo.jam_acc;
  j["mean_selected"] = demo.mean_selected;
  j["e_acc"] = demo.e_acc;
  j["e_auroc"] = optional_json(demo.e_auroc);
  j["chance"] = demo.chance;
  write_text(dir / "report.json", j.dump(2) + "\n");
  // Codeword images on the most nearly square grid that fits D.
  int rows = static_cast<int>(std::sqrt(static_cast<double>(d)));
  while (d % rows) --rows;
  for (std::size_t c = 0; c < demo.pair.codebook.size(); ++c) {
    Matrix img = Matrix::Zero(rows, d / rows);
    for (int f = 0; f < d; ++f) img(f / (d / rows), f % (d / rows)) = demo.pair.codebook[c][static_cast<std::size_t>(f)];
    detail::write_file(dir / ("codeword_class" + std::to_string(c) + ".pgm"), encode_pgm(img));
  }
  std::cout << "JAM accuracy " << demo.jam_acc << ", mean |s| " << demo.mean_selected << ", EVAL-X accuracy "
            << demo.e_acc << " (chance " << demo.chance << ")\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Amortized explanation training and auditing"};
  app.require_subcommand(1);

  std::string config_path, profile_override, methods_override, grid_override;
  bool force = false;
  int jobs = 0;
  auto* run = app.add_subcommand("run", "Run a configured sweep and assemble the table");
  run->add_option("--config", config_path, "Experiment config file")->required()->check(CLI::ExistingFile);
  run->add_flag("--force", force, "Retrain cells even when the manifest has them");
  run->add_option("--profile", profile_override, "full or ci");
  run->add_option("--methods", methods_override, "Comma-separated subset of methods");
  run->add_option("--grid", grid_override, "Comma-separated grid applied to every method");
  run->add_option("--jobs", jobs, "Parallel cells");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train one explainer or evaluator");
  train->add_option("--method", ta.method, "realx, realx-step, l2x, invase, notrealx, evalx, full")->required();
  train->add_option("--dataset", ta.dataset, "s1, s2, s3, mnist, det")->required();
  auto* lam = train->add_option("--lambda", ta.lambda, "Sparsity weight");
  train->add_option("--k", ta.k, "Selection size")->excludes(lam);
  train->add_option("--seed", ta.seed, "Training seed");
  train->add_option("--out", ta.out, "Run directory")->required();
  train->add_option("--profile", ta.profile, "full or ci");
  train->add_option("--epochs", ta.epochs, "Override the profile's epoch count");
  train->add_option("--selector-lr", ta.selector_lr, "Selector learning rate (default: the profile's)");
  train->add_option("--data-seed", ta.data_seed, "Dataset generation seed");
  train->add_option("--mnist-dir", ta.mnist_dir, "Directory with MNIST IDX files");
  train->add_option("--evaluator", ta.evaluator, "EVAL-X checkpoint for eACC / eAUROC");
  train->add_option("--n-train", ta.n_train, "Generated training rows");
  train->add_option("--n-test", ta.n_test, "Generated test rows");

  std::string run_dir, evaluator_path, oracle_dir;
  auto* evaluate = app.add_subcommand("evaluate", "Audit a trained run");
  evaluate->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--evaluator", evaluator_path, "EVAL-X checkpoint")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--oracle", oracle_dir, "Subset-oracle directory")->check(CLI::ExistingDirectory);

  std::string oracle_dataset = "s1", oracle_out, oracle_profile = "full";
  std::uint64_t oracle_seed = 0;
  int oracle_threads = 1;
  std::optional<int> oracle_epochs;
  auto* oracle = app.add_subcommand("oracle", "Train the per-subset model collection");
  oracle->add_option("--dataset", oracle_dataset, "s1, s2, s3 or det");
  oracle->add_option("--data-seed", oracle_seed, "Dataset generation seed");
  oracle->add_option("--profile", oracle_profile, "full or ci");
  oracle->add_option("--epochs", oracle_epochs, "Per-model epoch cap");
  oracle->add_option("--threads", oracle_threads, "Worker threads");
  oracle->add_option("--out", oracle_out, "Output directory")->required();

  std::vector<std::string> table_runs;
  std::string table_out;
  auto* table = app.add_subcommand("table", "Assemble report.csv files into a table");
  table->add_option("--runs", table_runs, "Run directories or report.csv files")->required();
  table->add_option("--out", table_out, "Output directory");

  int demo_k = 10, demo_d = 20;
  std::uint64_t demo_seed = 0;
  std::string demo_out, demo_profile = "ci";
  auto* demo = app.add_subcommand("demo-encoding", "Build the label-encoding selector and audit it");
  demo->add_option("--k", demo_k, "Classes");
  demo->add_option("--d", demo_d, "Features");
  demo->add_option("--seed", demo_seed, "Seed");
  demo->add_option("--profile", demo_profile, "Evaluator budget: full or ci");
  demo->add_option("--out", demo_out, "Output directory")->required();

  std::string render_run, render_out;
  int render_n = 2;
  std::uint64_t render_seed = 0;
  auto* render = app.add_subcommand("render", "Render selections on test images as PGM");
  render->add_option("--run", render_run, "Run directory")->required()->check(CLI::ExistingDirectory);
  render->add_option("--n", render_n, "Images per class");
  render->add_option("--seed", render_seed, "Sampling seed");
  render->add_option("--out", render_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) {
      ExperimentConfig cfg = parse_experiment_config(read_text(config_path));
      if (!profile_override.empty()) cfg.profile = profile_override;
      if (jobs > 0) cfg.jobs = jobs;
      if (!methods_override.empty()) {
        cfg.methods.clear();
        for (const auto& m : detail::split_list(methods_override)) {
          auto id = parse_method(m);
          if (!id || !has_selector(*id)) throw ConfigError("not a sweepable method: " + m);
          cfg.methods.push_back(*id);
        }
      }
      if (!grid_override.empty()) {
        std::vector<double> values;
        for (const auto& v : detail::split_list(grid_override)) values.push_back(std::stod(v));
        for (MethodId m : cfg.methods) cfg.grid[m] = values;
      }
      const auto res = run_experiment(cfg, force);
      std::cout << read_text(fs::path(cfg.out) / "table.txt");
      int failed = 0;
      for (const auto& c : res.cells) failed += !c.ok;
      if (failed) {
        std::cerr << failed << " cell(s) failed; see manifest.jsonl\n";
        return kExitRunFailure;
      }
      return kExitOk;
    }
    if (*train) return cmd_train(ta);
    if (*evaluate) return cmd_evaluate(run_dir, evaluator_path, oracle_dir);
    if (*oracle) return cmd_oracle(oracle_dataset, oracle_seed, oracle_profile, oracle_out, oracle_threads, oracle_epochs);
    if (*table) return cmd_table(table_runs, table_out);
    if (*demo) return cmd_demo(demo_k, demo_d, demo_out, demo_seed, demo_profile);
    if (*render) {
      const auto files = render_masks(render_run, render_n, render_seed, render_out);
      std::cout << files.size() << " images written to " << render_out << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRunFailure;
  }
  return kExitOk;
}
