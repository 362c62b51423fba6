#pragma once

#include "amortix/datasets.hpp"
#include "amortix/evaluation.hpp"
#include "amortix/io.hpp"
#include "amortix/methods.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace amortix {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Datasets by name

enum class DatasetId : std::uint8_t { S1, S2, S3, Mnist, Det };

inline const char* dataset_name(DatasetId d) {
  switch (d) {
    case DatasetId::S1: return "s1";
    case DatasetId::S2: return "s2";
    case DatasetId::S3: return "s3";
    case DatasetId::Mnist: return "mnist";
    case DatasetId::Det: return "det";
  }
  return "?";
}

inline std::optional<DatasetId> parse_dataset(const std::string& s) {
  for (auto d : {DatasetId::S1, DatasetId::S2, DatasetId::S3, DatasetId::Mnist, DatasetId::Det})
    if (s == dataset_name(d)) return d;
  return std::nullopt;
}

inline bool is_synthetic(DatasetId d) { return d == DatasetId::S1 || d == DatasetId::S2 || d == DatasetId::S3; }

struct DatasetSpec {
  DatasetId id = DatasetId::S1;
  std::uint64_t data_seed = 0;
  int n_train = 10000;  // synthetic and det: generated; mnist: 0 keeps every training image
  int n_test = 10000;
  double val_fraction = 0.1;
  std::string mnist_dir;
  int det_k = 10;
  int det_d = 20;

  bool operator==(const DatasetSpec&) const = default;
};

struct DataBundle {
  Dataset train, val, test;
};

inline std::string resolve_mnist_dir(const std::string& configured) {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("AMORTIX_MNIST_DIR")) return env;
  return {};
}

inline DataBundle load_bundle(const DatasetSpec& spec) {
  DataBundle b;
  Dataset train_full;
  RngStream root(spec.data_seed, std::string("data/") + dataset_name(spec.id));
  switch (spec.id) {
    case DatasetId::S1:
    case DatasetId::S2:
    case DatasetId::S3: {
      const auto sid = static_cast<SyntheticId>(static_cast<int>(spec.id) + 1);
      auto [tr, te] = synthetic_train_test(sid, spec.data_seed, spec.n_train, spec.n_test);
      train_full = std::move(tr);
      b.test = std::move(te);
      break;
    }
    case DatasetId::Mnist: {
      const auto dir = resolve_mnist_dir(spec.mnist_dir);
      if (dir.empty()) throw ConfigError("mnist needs mnist_dir or AMORTIX_MNIST_DIR");
      auto [tr, te] = load_mnist(dir);
      train_full = std::move(tr);
      b.test = std::move(te);
      train_full.name = b.test.name = "mnist";
      if (spec.n_train > 0 && spec.n_train < train_full.size()) {
        auto pick = root.substream("train-subset");
        std::vector<int> idx(static_cast<std::size_t>(train_full.size()));
        std::iota(idx.begin(), idx.end(), 0);
        pick.shuffle(std::span<int>(idx));
        idx.resize(static_cast<std::size_t>(spec.n_train));
        std::sort(idx.begin(), idx.end());
        train_full = train_full.subset(idx);
      }
      break;
    }
    case DatasetId::Det: {
      auto rule_rng = root.substream("rule");
      const auto rule = make_deterministic_rule(spec.det_k, spec.det_d, rule_rng);
      auto tr_rng = root.substream("train"), te_rng = root.substream("test");
      train_full = gen_deterministic(rule, spec.n_train, tr_rng);
      b.test = gen_deterministic(rule, spec.n_test, te_rng);
      break;
    }
  }
  auto split_rng = root.substream("validation-split");
  auto [tr, va] = holdout(train_full, spec.val_fraction, split_rng);
  b.train = std::move(tr);
  b.val = std::move(va);
  b.test.split = Split::Test;
  return b;
}

/// Content hash of a dataset's values and labels (FNV-1a over the raw bytes).
inline std::string content_hash(const Dataset& ds) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto eat = [&](const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 0x100000001B3ULL;
    }
  };
  eat(ds.x.data(), static_cast<std::size_t>(ds.x.size()) * sizeof(double));
  eat(ds.y.data(), ds.y.size() * sizeof(int));
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << detail::mix64(h);
  return o.str();
}

inline std::string bundle_hash(const DataBundle& b) {
  return content_hash(b.train) + content_hash(b.val) + content_hash(b.test);
}

// ---------------------------------------------------------------------------
// Profiles: training budgets by scale

struct Profile {
  std::string name = "full";
  double lr = 1e-4;
  std::optional<double> selector_lr;
  int batch = 100;
  int epochs = 1000;
  int patience = 20;
  std::vector<int> selector_hidden{200, 200, 200};
  std::vector<int> predictor_hidden{200, 200};
  double selector_bias = 0.0;
  int evalx_epochs = 1000;
  int oracle_epochs = 200;
  std::vector<int> oracle_hidden{200, 200};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

/// "full" follows the published budgets; "ci" is the desk-scale profile.
inline Profile profile_for(const std::string& name, DatasetId ds) {
  Profile p;
  p.name = name;
  if (ds == DatasetId::Mnist) {
    p.batch = 128;
    p.epochs = 500;
  }
  if (name == "full") return p;
  if (name != "ci") throw ConfigError("unknown profile " + name);
  p.lr = 1e-3;
  p.selector_lr = 2e-4;
  p.selector_hidden = {100, 100, 100};
  p.predictor_hidden = {100, 100};
  p.oracle_hidden = {32, 32};
  p.oracle_epochs = 60;
  p.evalx_epochs = 300;
  p.epochs = ds == DatasetId::Mnist ? 60 : 300;
  return p;
}

// ---------------------------------------------------------------------------
// Grids

inline std::vector<double> default_grid(MethodId m, DatasetId ds) {
  const bool mnist = ds == DatasetId::Mnist;
  if (m == MethodId::L2X) {
    if (mnist) return {1, 5, 15, 50, 100, 200};
    return {1, 2, 3, 4, 5, 6, 7};
  }
  if (uses_lambda(m)) {
    if (mnist) return {0.1, 1.0, 5.0, 10.0, 25.0, 50.0};
    return {0.05, 0.075, 0.1, 0.125, 0.15, 0.2, 0.25};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Experiment config: sections of key = value lines

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec data;
  std::vector<MethodId> methods{MethodId::RealX, MethodId::L2X, MethodId::Invase, MethodId::NotRealX};
  std::map<MethodId, std::vector<double>> grid;  // missing methods use default_grid
  std::string profile = "full";
  std::vector<std::uint64_t> seeds;  // empty = profile seeds
  std::optional<int> epochs;         // overrides the profile
  std::string out = "runs";
  int jobs = 1;
  bool oracle = false;
  std::optional<double> selector_bias;
  std::optional<double> selector_lr;

  bool operator==(const ExperimentConfig&) const = default;

  std::vector<double> grid_for(MethodId m) const {
    auto it = grid.find(m);
    return it != grid.end() ? it->second : default_grid(m, data.id);
  }

  Profile resolved_profile() const {
    Profile p = profile_for(profile, data.id);
    if (!seeds.empty()) p.seeds = seeds;
    if (epochs) p.epochs = *epochs;
    if (selector_bias) p.selector_bias = *selector_bias;
    if (selector_lr) p.selector_lr = *selector_lr;
    return p;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string t;
  while (std::getline(ss, t, ','))
    if (auto s = trim(t); !s.empty()) out.push_back(s);
  return out;
}

inline std::string fmt_double(double v) {
  std::ostringstream o;
  o << std::setprecision(17) << v;
  return o.str();
}

template <class T, class F>
std::string join(const std::vector<T>& v, F f) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + f(v[i]);
  return s;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const std::string& text, bool check_paths = true) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  auto fail = [&](const std::string& msg) { throw ConfigError("line " + std::to_string(lineno) + ": " + msg); };
  auto as_double = [&](const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) fail("expected a number, got '" + v + "'");
      return d;
    } catch (const std::logic_error&) {
      fail("expected a number, got '" + v + "'");
    }
    return 0.0;
  };
  auto as_int = [&](const std::string& v) {
    const double d = as_double(v);
    if (d != std::floor(d)) fail("expected an integer, got '" + v + "'");
    return static_cast<long long>(d);
  };
  auto as_bool = [&](const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail("expected true or false, got '" + v + "'");
    return false;
  };
  auto as_string = [](std::string v) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
    return v;
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "experiment" && section != "data" && section != "grid") fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string v = detail::trim(line.substr(eq + 1));
    if (section.empty()) fail("key outside a section");

    if (section == "experiment") {
      if (key == "name") c.name = as_string(v);
      else if (key == "dataset") {
        auto d = parse_dataset(as_string(v));
        if (!d) fail("unknown dataset '" + v + "'");
        c.data.id = *d;
      } else if (key == "methods") {
        c.methods.clear();
        for (const auto& m : detail::split_list(v)) {
          auto id = parse_method(m);
          if (!id || *id == MethodId::EvalX || *id == MethodId::Full) fail("not a sweepable method: " + m);
          c.methods.push_back(*id);
        }
      } else if (key == "seeds") {
        c.seeds.clear();
        for (const auto& s : detail::split_list(v)) c.seeds.push_back(static_cast<std::uint64_t>(as_int(s)));
      } else if (key == "profile") c.profile = as_string(v);
      else if (key == "epochs") c.epochs = static_cast<int>(as_int(v));
      else if (key == "out") c.out = as_string(v);
      else if (key == "jobs") c.jobs = static_cast<int>(as_int(v));
      else if (key == "oracle") c.oracle = as_bool(v);
      else if (key == "selector_bias") c.selector_bias = as_double(v);
      else if (key == "selector_lr") c.selector_lr = as_double(v);
      else fail("unknown key experiment." + key);
    } else if (section == "data") {
      if (key == "seed") c.data.data_seed = static_cast<std::uint64_t>(as_int(v));
      else if (key == "n_train") c.data.n_train = static_cast<int>(as_int(v));
      else if (key == "n_test") c.data.n_test = static_cast<int>(as_int(v));
      else if (key == "val_fraction") c.data.val_fraction = as_double(v);
      else if (key == "mnist_dir") c.data.mnist_dir = as_string(v);
      else if (key == "det_k") c.data.det_k = static_cast<int>(as_int(v));
      else if (key == "det_d") c.data.det_d = static_cast<int>(as_int(v));
      else fail("unknown key data." + key);
    } else {
      auto id = parse_method(key);
      if (!id || !has_selector(*id)) fail("grid key must be a method with a selector: " + key);
      std::vector<double> values;
      for (const auto& s : detail::split_list(v)) values.push_back(as_double(s));
      if (values.empty()) fail("empty grid for " + key);
      c.grid[*id] = values;
    }
  }
  if (c.methods.empty()) throw ConfigError("no methods");
  if (c.jobs < 1) throw ConfigError("jobs must be >= 1");
  if (c.data.val_fraction <= 0 || c.data.val_fraction >= 1) throw ConfigError("val_fraction must be in (0, 1)");
  if (c.profile != "full" && c.profile != "ci") throw ConfigError("profile must be full or ci");
  for (MethodId m : c.methods)
    if (c.grid_for(m).empty()) throw ConfigError(std::string("empty grid for ") + method_name(m));
  if (check_paths && c.data.id == DatasetId::Mnist) {
    const auto dir = resolve_mnist_dir(c.data.mnist_dir);
    if (dir.empty() || !fs::is_directory(dir)) throw ConfigError("mnist directory not found: '" + dir + "'");
  }
  return c;
}

inline std::string serialize_experiment_config(const ExperimentConfig& c) {
  std::ostringstream o;
  o << "[experiment]\n";
  o << "name = \"" << c.name << "\"\n";
  o << "dataset = " << dataset_name(c.data.id) << '\n';
  o << "methods = " << detail::join(c.methods, [](MethodId m) { return std::string(method_name(m)); }) << '\n';
  if (!c.seeds.empty())
    o << "seeds = " << detail::join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }) << '\n';
  o << "profile = " << c.profile << '\n';
  if (c.epochs) o << "epochs = " << *c.epochs << '\n';
  o << "out = \"" << c.out << "\"\n";
  o << "jobs = " << c.jobs << '\n';
  o << "oracle = " << (c.oracle ? "true" : "false") << '\n';
  if (c.selector_bias) o << "selector_bias = " << detail::fmt_double(*c.selector_bias) << '\n';
  if (c.selector_lr) o << "selector_lr = " << detail::fmt_double(*c.selector_lr) << '\n';
  o << "\n[data]\n";
  o << "seed = " << c.data.data_seed << '\n';
  o << "n_train = " << c.data.n_train << '\n';
  o << "n_test = " << c.data.n_test << '\n';
  o << "val_fraction = " << detail::fmt_double(c.data.val_fraction) << '\n';
  if (!c.data.mnist_dir.empty()) o << "mnist_dir = \"" << c.data.mnist_dir << "\"\n";
  o << "det_k = " << c.data.det_k << '\n';
  o << "det_d = " << c.data.det_d << '\n';
  if (!c.grid.empty()) {
    o << "\n[grid]\n";
    for (const auto& [m, values] : c.grid) o << method_name(m) << " = " << detail::join(values, detail::fmt_double) << '\n';
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Per-run artifacts

/// A trained explainer plus what is needed to rebuild its data.
struct RunSpec {
  DatasetSpec data;
  MethodConfig method;
};

inline std::string serialize_run_spec(const RunSpec& r) {
  std::ostringstream o;
  o << "dataset=" << dataset_name(r.data.id) << '\n'
    << "data_seed=" << r.data.data_seed << '\n'
    << "n_train=" << r.data.n_train << '\n'
    << "n_test=" << r.data.n_test << '\n'
    << "val_fraction=" << detail::fmt_double(r.data.val_fraction) << '\n'
    << "mnist_dir=" << r.data.mnist_dir << '\n'
    << "det_k=" << r.data.det_k << '\n'
    << "det_d=" << r.data.det_d << '\n'
    << r.method.serialize();
  return o.str();
}

inline RunSpec parse_run_spec(const std::string& text) {
  RunSpec r;
  r.method = MethodConfig::parse(text);
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "dataset") {
      auto d = parse_dataset(v);
      if (!d) throw ConfigError("unknown dataset " + v);
      r.data.id = *d;
    } else if (k == "data_seed") r.data.data_seed = std::stoull(v);
    else if (k == "n_train") r.data.n_train = std::stoi(v);
    else if (k == "n_test") r.data.n_test = std::stoi(v);
    else if (k == "val_fraction") r.data.val_fraction = std::stod(v);
    else if (k == "mnist_dir") r.data.mnist_dir = v;
    else if (k == "det_k") r.data.det_k = std::stoi(v);
    else if (k == "det_d") r.data.det_d = std::stoi(v);
  }
  return r;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << s;
}

inline Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

inline Json report_to_json(const MetricReport& r) {
  Json j;
  j["method"] = r.method;
  j["dataset"] = r.dataset;
  j["config_hash"] = r.config_hash;
  j["lambda"] = optional_json(r.lambda);
  j["k"] = r.k ? Json(*r.k) : Json(nullptr);
  j["seed"] = r.seed;
  j["acc"] = r.acc;
  j["auroc"] = optional_json(r.auroc);
  j["e_acc"] = optional_json(r.e_acc);
  j["e_auroc"] = optional_json(r.e_auroc);
  j["c_auroc"] = optional_json(r.c_auroc);
  j["cfsr"] = optional_json(r.cfsr);
  j["tpr"] = optional_json(r.tpr);
  j["fdr"] = optional_json(r.fdr);
  j["mean_selected"] = r.mean_selected;
  return j;
}

inline MetricReport report_from_json(const Json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j[k].is_null()) return std::nullopt;
    return j[k].get<double>();
  };
  MetricReport r;
  r.method = j.at("method").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.lambda = opt("lambda");
  if (j.contains("k") && !j["k"].is_null()) r.k = j["k"].get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.acc = j.at("acc").get<double>();
  r.auroc = opt("auroc");
  r.e_acc = opt("e_acc");
  r.e_auroc = opt("e_auroc");
  r.c_auroc = opt("c_auroc");
  r.cfsr = opt("cfsr");
  r.tpr = opt("tpr");
  r.fdr = opt("fdr");
  r.mean_selected = j.at("mean_selected").get<double>();
  return r;
}

/// RFC-4180 row; optional values are empty fields.
inline std::string report_csv_row(const MetricReport& r, const std::string& seed_field = "") {
  auto opt = [](const std::optional<double>& v) { return v ? detail::fmt_double(*v) : std::string(); };
  std::ostringstream o;
  o << r.method << ',' << r.dataset << ',' << r.config_hash << ',' << opt(r.lambda) << ','
    << (r.k ? std::to_string(*r.k) : "") << ',' << (seed_field.empty() ? std::to_string(r.seed) : seed_field) << ','
    << detail::fmt_double(r.acc) << ',' << opt(r.auroc) << ',' << opt(r.e_acc) << ',' << opt(r.e_auroc) << ','
    << opt(r.c_auroc) << ',' << opt(r.cfsr) << ',' << opt(r.tpr) << ',' << opt(r.fdr) << ','
    << detail::fmt_double(r.mean_selected);
  return o.str();
}

inline std::string report_csv_header() {
  std::string h;
  for (const auto& c : report_columns()) h += (h.empty() ? "" : ",") + c;
  return h;
}

inline MetricReport parse_report_csv_row(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string t;
  while (std::getline(ss, t, ',')) f.push_back(t);
  while (f.size() < report_columns().size()) f.emplace_back();
  auto opt = [](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
  };
  MetricReport r;
  r.method = f[0];
  r.dataset = f[1];
  r.config_hash = f[2];
  r.lambda = opt(f[3]);
  if (!f[4].empty()) r.k = std::stoi(f[4]);
  r.seed = f[5].empty() || f[5] == "mean" ? 0 : std::stoull(f[5]);
  r.acc = std::stod(f[6]);
  r.auroc = opt(f[7]);
  r.e_acc = opt(f[8]);
  r.e_auroc = opt(f[9]);
  r.c_auroc = opt(f[10]);
  r.cfsr = opt(f[11]);
  r.tpr = opt(f[12]);
  r.fdr = opt(f[13]);
  r.mean_selected = std::stod(f[14]);
  return r;
}

inline std::string curve_csv(const TrainedExplainer& te) {
  std::ostringstream o;
  o << std::setprecision(17) << "epoch,train_objective,val_loss,val_acc,mean_selected\n";
  for (const auto& r : te.curve)
    o << r.epoch << ',' << r.train_objective << ',' << r.val_loss << ',' << r.val_acc << ',' << r.mean_selected << '\n';
  return o.str();
}

/// Writes checkpoints, the run spec and the training curve into `dir`.
inline void save_explainer(const TrainedExplainer& te, const DatasetSpec& data, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "config.txt", serialize_run_spec({data, te.config}));
  save_checkpoint(te.predictor, dir / "predictor.amx");
  if (te.bernoulli) save_checkpoint(te.bernoulli->net, dir / "selector.amx");
  if (te.topk) save_checkpoint(te.topk->net, dir / "selector.amx");
  if (te.control) save_checkpoint(*te.control, dir / "control.amx");
  write_sidecar(dir / "predictor.amx.meta",
                {{"config_hash", te.config.hash()}, {"seed", std::to_string(te.config.seed)}});
  write_text(dir / "curve.csv", curve_csv(te));
}

inline std::pair<TrainedExplainer, DatasetSpec> load_explainer(const fs::path& dir) {
  const RunSpec spec = parse_run_spec(read_text(dir / "config.txt"));
  TrainedExplainer te;
  te.config = spec.method;
  te.predictor = load_checkpoint(dir / "predictor.amx");
  const MethodId m = spec.method.method;
  if (m == MethodId::L2X) {
    te.topk = ConcreteTopK{load_checkpoint(dir / "selector.amx"), spec.method.k.value_or(1), spec.method.tau};
  } else if (has_selector(m)) {
    te.bernoulli = BernoulliSelector{load_checkpoint(dir / "selector.amx"), spec.method.tau};
  }
  if (fs::exists(dir / "control.amx")) te.control = load_checkpoint(dir / "control.amx");
  te.features = m == MethodId::Full || m == MethodId::L2X ? te.predictor.input_width() : te.predictor.input_width() / 2;
  te.classes = te.predictor.output_width();
  return {std::move(te), spec.data};
}

inline void save_evaluator(const Evaluator& ev, const DatasetSpec& data, const MethodConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  save_checkpoint(ev.net, dir / "evaluator.amx");
  write_sidecar(dir / "evaluator.amx.meta", {{"config_hash", cfg.hash()},
                                             {"seed", std::to_string(cfg.seed)},
                                             {"scheme", scheme_name(ev.scheme)},
                                             {"dataset", dataset_name(data.id)}});
}

inline Evaluator load_evaluator(const fs::path& ckpt) {
  Evaluator ev;
  ev.net = load_checkpoint(ckpt);
  ev.scheme = MaskScheme::HardToken;
  const fs::path meta = ckpt.string() + ".meta";
  if (fs::exists(meta)) {
    const auto kv = read_sidecar(meta);
    if (auto it = kv.find("scheme"); it != kv.end() && it->second != scheme_name(MaskScheme::HardToken))
      ev.scheme = MaskScheme::Multiplicative;
  }
  ev.features = ev.scheme == MaskScheme::HardToken ? ev.net.input_width() / 2 : ev.net.input_width();
  return ev;
}

// Oracle bundle: "AMXO", u32 features, u32 classes, f64 marginal[classes],
// u32 count, then per model u32 key, u32 length, checkpoint bytes.
inline void save_oracle(const SubsetOracle& o, const fs::path& path) {
  detail::ByteWriter w;
  w.bytes("AMXO", 4);
  w.u32(static_cast<std::uint32_t>(o.features));
  w.u32(static_cast<std::uint32_t>(o.classes));
  for (Eigen::Index c = 0; c < o.marginal.size(); ++c) w.f64(o.marginal(c));
  w.u32(static_cast<std::uint32_t>(o.models.size()));
  for (const auto& [key, net] : o.models) {
    const auto bytes = encode_checkpoint(net);
    w.u32(key);
    w.u32(static_cast<std::uint32_t>(bytes.size()));
    w.bytes(bytes.data(), bytes.size());
  }
  detail::write_file(path, w.data());
}

inline SubsetOracle load_oracle(const fs::path& path) {
  detail::ByteReader r(detail::read_file(path), "oracle bundle");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "AMXO", 4) != 0) throw FormatError("oracle bundle: bad magic");
  SubsetOracle o;
  o.features = static_cast<int>(r.u32());
  o.classes = static_cast<int>(r.u32());
  o.marginal.resize(o.classes);
  for (int c = 0; c < o.classes; ++c) o.marginal(c) = r.f64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const SubsetKey key = r.u32();
    std::vector<unsigned char> bytes(r.u32());
    r.bytes(bytes.data(), bytes.size());
    o.models.emplace(key, decode_checkpoint(std::move(bytes)));
  }
  return o;
}

/// Test-set report with optional evaluator and oracle columns.
inline MetricReport full_report(const TrainedExplainer& te, const DataBundle& data, const Evaluator* ev,
                                const SubsetOracle* oracle) {
  MetricReport r = evaluate_explainer(te, data.test, ev, data.test.name);
  if (oracle) {
    RngStream eval_rng(te.config.seed, "evaluation-sampling");
    r.c_auroc = c_auroc(*oracle, data.test, te.select(data.test.x, &eval_rng)).c_auroc;
  }
  return r;
}

/// metrics.json: the report plus validation numbers and counters. No timing
/// or paths, so identical inputs give identical bytes.
inline std::string metrics_json(const MetricReport& r, const SweepEntry& val, const TrainedExplainer& te) {
  Json j = report_to_json(r);
  j["val_acc"] = val.val_acc;
  j["val_loss"] = val.val_loss;
  j["val_mean_selected"] = val.mean_selected;
  j["predictor_updates"] = te.counters.predictor_updates;
  j["selector_updates"] = te.counters.selector_updates;
  j["predictor_selector_bytes"] = te.counters.predictor_selector_bytes;
  j["rejected_steps"] = te.counters.rejected_steps;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Manifest (append-only JSON lines)

struct ManifestEntry {
  std::string cell;
  std::string config_hash;
  std::string input_hash;
  std::string status;  // "ok" | "failed" | "skipped"
  std::vector<std::string> artifacts;
  std::string error;
};

struct RunManifest {
  fs::path path;
  std::vector<ManifestEntry> entries;

  static RunManifest load(const fs::path& path) {
    RunManifest m;
    m.path = path;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = Json::parse(line);
      ManifestEntry e{j.at("cell"), j.at("config_hash"), j.at("input_hash"), j.at("status"),
                      j.value("artifacts", std::vector<std::string>{}), j.value("error", std::string())};
      m.entries.push_back(std::move(e));
    }
    return m;
  }

  /// Latest successful entry for the cell with matching hashes whose artifacts still exist.
  bool hit(const std::string& cell, const std::string& config_hash, const std::string& input_hash,
           const fs::path& root) const {
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
      if (it->cell != cell) continue;
      if (it->status == "skipped") continue;
      if (it->status != "ok" || it->config_hash != config_hash || it->input_hash != input_hash) return false;
      for (const auto& a : it->artifacts)
        if (!fs::exists(root / a)) return false;
      return true;
    }
    return false;
  }

  void append(const ManifestEntry& e) {
    entries.push_back(e);
    Json j;
    j["cell"] = e.cell;
    j["config_hash"] = e.config_hash;
    j["input_hash"] = e.input_hash;
    j["status"] = e.status;
    j["artifacts"] = e.artifacts;
    if (!e.error.empty()) j["error"] = e.error;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::app);
    out << j.dump() << '\n';
  }

  int failures() const {
    std::map<std::string, std::string> last;
    for (const auto& e : entries)
      if (e.status != "skipped") last[e.cell] = e.status;
    int n = 0;
    for (const auto& [cell, status] : last) n += status == "failed";
    return n;
  }
};

// ---------------------------------------------------------------------------
// Orchestration

inline MethodConfig cell_config(const Profile& p, MethodId m, std::optional<double> grid_value, std::uint64_t seed) {
  MethodConfig c;
  c.method = m;
  c.lr = p.lr;
  c.selector_lr = p.selector_lr;
  c.batch = p.batch;
  c.epochs = p.epochs;
  c.patience = p.patience;
  c.seed = seed;
  c.selector_hidden = p.selector_hidden;
  c.predictor_hidden = p.predictor_hidden;
  c.selector_bias = p.selector_bias;
  if (grid_value) {
    if (m == MethodId::L2X)
      c.k = static_cast<int>(*grid_value);
    else
      c.lambda = *grid_value;
  }
  return c;
}

inline MethodConfig evaluator_config(const Profile& p, std::uint64_t seed) {
  MethodConfig c = cell_config(p, MethodId::EvalX, std::nullopt, seed);
  c.epochs = p.evalx_epochs;
  return c;
}

inline std::string grid_label(MethodId m, double v) {
  return (m == MethodId::L2X ? "k" : "lambda") + detail::fmt_double(v);
}

struct CellResult {
  std::string cell;
  MethodId method = MethodId::RealX;
  double grid_value = 0.0;
  std::uint64_t seed = 0;
  MetricReport report;
  SweepEntry val;
  bool ok = false;
  bool reused = false;
  std::string error;
};

struct ExperimentResult {
  RunManifest manifest;
  std::vector<CellResult> cells;
  std::map<MethodId, SweepChoice> choice;
  std::map<MethodId, double> chosen_value;
  double full_val_acc = 0.0;
  std::vector<MetricReport> table;  // seed-averaged rows: FULL first, then chosen configs
};

inline MetricReport average_reports(const std::vector<MetricReport>& rs) {
  MetricReport m = rs.front();
  auto avg = [&](auto get) {
    double s = 0;
    for (const auto& r : rs) s += get(r);
    return s / static_cast<double>(rs.size());
  };
  auto avg_opt = [&](auto get) -> std::optional<double> {
    double s = 0;
    for (const auto& r : rs) {
      const auto v = get(r);
      if (!v) return std::nullopt;
      s += *v;
    }
    return s / static_cast<double>(rs.size());
  };
  m.acc = avg([](const MetricReport& r) { return r.acc; });
  m.mean_selected = avg([](const MetricReport& r) { return r.mean_selected; });
  m.auroc = avg_opt([](const MetricReport& r) { return r.auroc; });
  m.e_acc = avg_opt([](const MetricReport& r) { return r.e_acc; });
  m.e_auroc = avg_opt([](const MetricReport& r) { return r.e_auroc; });
  m.c_auroc = avg_opt([](const MetricReport& r) { return r.c_auroc; });
  m.cfsr = avg_opt([](const MetricReport& r) { return r.cfsr; });
  m.tpr = avg_opt([](const MetricReport& r) { return r.tpr; });
  m.fdr = avg_opt([](const MetricReport& r) { return r.fdr; });
  m.seed = 0;
  return m;
}

inline std::string table_csv(const std::vector<MetricReport>& rows) {
  std::string s = report_csv_header() + "\n";
  for (const auto& r : rows) s += report_csv_row(r, "mean") + "\n";
  return s;
}

/// Methods as columns, metrics as rows.
inline std::string table_text(const std::vector<MetricReport>& rows) {
  std::ostringstream o;
  auto cell = [](const std::optional<double>& v, double scale, int prec) {
    std::ostringstream c;
    if (v)
      c << std::fixed << std::setprecision(prec) << *v * scale;
    else
      c << "-";
    return c.str();
  };
  o << std::left << std::setw(10) << "metric";
  for (const auto& r : rows) o << std::setw(12) << r.method;
  o << '\n';
  auto line = [&](const char* name, auto get, double scale, int prec) {
    o << std::setw(10) << name;
    for (const auto& r : rows) o << std::setw(12) << cell(get(r), scale, prec);
    o << '\n';
  };
  line("CFSR", [](const MetricReport& r) { return r.cfsr; }, 100.0, 1);
  line("TPR", [](const MetricReport& r) { return r.tpr; }, 100.0, 1);
  line("FDR", [](const MetricReport& r) { return r.fdr; }, 100.0, 1);
  line("AUROC", [](const MetricReport& r) { return r.auroc; }, 1.0, 3);
  line("eAUROC", [](const MetricReport& r) { return r.e_auroc; }, 1.0, 3);
  line("cAUROC", [](const MetricReport& r) { return r.c_auroc; }, 1.0, 3);
  line("ACC", [](const MetricReport& r) { return std::optional<double>(r.acc); }, 100.0, 1);
  line("eACC", [](const MetricReport& r) { return r.e_acc; }, 100.0, 1);
  line("|s|", [](const MetricReport& r) { return std::optional<double>(r.mean_selected); }, 1.0, 2);
  line("k/lambda", [](const MetricReport& r) { return r.k ? std::optional<double>(*r.k) : r.lambda; }, 1.0, 3);
  return o.str();
}

/// Trains FULL, EVAL-X and every (method, grid value, seed) cell, then applies
/// the selection rule and writes table.csv / table.txt under cfg.out.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, bool force = false) {
  const Profile prof = cfg.resolved_profile();
  const fs::path root = cfg.out;
  fs::create_directories(root);
  write_text(root / "experiment.conf", serialize_experiment_config(cfg));
  const DataBundle data = load_bundle(cfg.data);
  const std::string input_hash = bundle_hash(data);
  ExperimentResult res;
  res.manifest = RunManifest::load(root / "manifest.jsonl");
  const std::uint64_t ref_seed = prof.seeds.front();

  // Evaluator, trained once per dataset.
  const MethodConfig ecfg = evaluator_config(prof, ref_seed);
  Evaluator evaluator;
  {
    const std::string cell = "evalx";
    if (!force && res.manifest.hit(cell, ecfg.hash(), input_hash, root)) {
      evaluator = load_evaluator(root / cell / "evaluator.amx");
      res.manifest.append({cell, ecfg.hash(), input_hash, "skipped", {}, {}});
    } else {
      evaluator = train_evalx(data.train, data.val, ecfg);
      save_evaluator(evaluator, cfg.data, ecfg, root / cell);
      res.manifest.append({cell, ecfg.hash(), input_hash, "ok", {"evalx/evaluator.amx"}, {}});
    }
  }

  std::optional<SubsetOracle> oracle;
  if (cfg.oracle && data.train.features() <= 14) {
    const std::string cell = "oracle";
    MethodConfig ocfg = ecfg;
    ocfg.epochs = prof.oracle_epochs;
    ocfg.predictor_hidden = prof.oracle_hidden;
    if (!force && res.manifest.hit(cell, ocfg.hash(), input_hash, root)) {
      oracle = load_oracle(root / cell / "oracle.bin");
      res.manifest.append({cell, ocfg.hash(), input_hash, "skipped", {}, {}});
    } else {
      OracleOptions oo;
      oo.hidden = prof.oracle_hidden;
      oo.fit = {{prof.lr}, prof.batch, prof.oracle_epochs, prof.patience};
      oo.seed = ref_seed;
      oo.threads = cfg.jobs;
      oracle = build_subset_oracle(data.train, data.val, oo);
      save_oracle(*oracle, root / cell / "oracle.bin");
      res.manifest.append({cell, ocfg.hash(), input_hash, "ok", {"oracle/oracle.bin"}, {}});
    }
  }

  struct Job {
    std::string cell;
    MethodConfig config;
    double grid_value;
  };
  std::vector<Job> jobs;
  jobs.push_back({"full", cell_config(prof, MethodId::Full, std::nullopt, ref_seed), 0.0});
  for (MethodId m : cfg.methods)
    for (double v : cfg.grid_for(m))
      for (std::uint64_t seed : prof.seeds)
        jobs.push_back({std::string(method_name(m)) + "/" + grid_label(m, v) + "/seed" + std::to_string(seed),
                        cell_config(prof, m, v, seed), v});

  auto run_job = [&](const Job& job) {
    CellResult cr;
    cr.cell = job.cell;
    cr.method = job.config.method;
    cr.grid_value = job.grid_value;
    cr.seed = job.config.seed;
    const fs::path dir = root / job.cell;
    try {
      if (!force && res.manifest.hit(job.cell, job.config.hash(), input_hash, root)) {
        const Json j = Json::parse(read_text(dir / "metrics.json"));
        cr.report = report_from_json(j);
        cr.val = {job.config, j.at("val_acc").get<double>(), j.at("val_loss").get<double>(),
                  j.at("val_mean_selected").get<double>()};
        cr.ok = cr.reused = true;
        return cr;
      }
      const TrainedExplainer te = train_method(data.train, data.val, job.config);
      cr.val = summarize_validation(te, data.val);
      cr.report = full_report(te, data, &evaluator, oracle ? &*oracle : nullptr);
      save_explainer(te, cfg.data, dir);
      RngStream eval_rng(te.config.seed, "evaluation-sampling");
      detail::write_file(dir / "masks.amsk", encode_masks_binary(te.select(data.test.x, &eval_rng)));
      write_text(dir / "metrics.json", metrics_json(cr.report, cr.val, te));
      write_text(dir / "report.json", report_to_json(cr.report).dump(2) + "\n");
      write_text(dir / "report.csv", report_csv_header() + "\n" + report_csv_row(cr.report) + "\n");
      cr.ok = true;
    } catch (const std::exception& e) {
      cr.error = e.what();
    }
    return cr;
  };

  // Cells are independent; results are collected in job order.
  const std::size_t width = static_cast<std::size_t>(cfg.jobs);
  for (std::size_t lo = 0; lo < jobs.size(); lo += width) {
    const std::size_t hi = std::min(jobs.size(), lo + width);
    std::vector<std::future<CellResult>> fut;
    for (std::size_t i = lo; i < hi; ++i)
      fut.push_back(std::async(width > 1 ? std::launch::async : std::launch::deferred, run_job, std::cref(jobs[i])));
    for (std::size_t i = lo; i < hi; ++i) res.cells.push_back(fut[i - lo].get());
  }
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& cr = res.cells[i];
    const std::string rel = jobs[i].cell;
    if (cr.reused)
      res.manifest.append({rel, jobs[i].config.hash(), input_hash, "skipped", {}, {}});
    else if (cr.ok)
      res.manifest.append({rel, jobs[i].config.hash(), input_hash, "ok",
                           {rel + "/metrics.json", rel + "/predictor.amx", rel + "/curve.csv"}, {}});
    else
      res.manifest.append({rel, jobs[i].config.hash(), input_hash, "failed", {}, cr.error});
  }

  // Selection per method on seed-averaged validation metrics.
  const CellResult& full = res.cells.front();
  if (full.ok) {
    res.full_val_acc = full.val.val_acc;
    res.table.push_back(full.report);
  }
  const SelectionRule rule = is_synthetic(cfg.data.id) ? SelectionRule::MaxValAccuracy : SelectionRule::WithinFivePoints;
  for (MethodId m : cfg.methods) {
    std::vector<SweepEntry> entries;
    std::vector<double> values;
    for (double v : cfg.grid_for(m)) {
      SweepEntry e{cell_config(prof, m, v, ref_seed)};
      int n = 0;
      for (const auto& cr : res.cells)
        if (cr.ok && cr.method == m && cr.grid_value == v && cr.cell != "full") {
          e.val_acc += cr.val.val_acc;
          e.val_loss += cr.val.val_loss;
          e.mean_selected += cr.val.mean_selected;
          ++n;
        }
      if (n == 0) continue;
      e.val_acc /= n;
      e.val_loss /= n;
      e.mean_selected /= n;
      entries.push_back(e);
      values.push_back(v);
    }
    if (entries.empty()) continue;
    const SweepChoice choice = choose_config(entries, rule, res.full_val_acc);
    res.choice[m] = choice;
    res.chosen_value[m] = values[choice.index];
    std::vector<MetricReport> chosen;
    for (const auto& cr : res.cells)
      if (cr.ok && cr.method == m && cr.grid_value == values[choice.index] && cr.cell != "full")
        chosen.push_back(cr.report);
    res.table.push_back(average_reports(chosen));
  }
  write_text(root / "table.csv", table_csv(res.table));
  std::string txt = table_text(res.table);
  for (const auto& [m, c] : res.choice)
    if (c.fallback) txt += std::string("note: ") + method_name(m) + " had no config within 5 points of FULL; fell back to best accuracy\n";
  write_text(root / "table.txt", txt);
  return res;
}

/// Reads every report.csv matched by `paths` and averages rows that share
/// (method, dataset, lambda, k) over seeds.
inline std::vector<MetricReport> assemble_table(const std::vector<fs::path>& report_csvs) {
  std::map<std::string, std::vector<MetricReport>> groups;
  std::vector<std::string> order;
  for (const auto& p : report_csvs) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const MetricReport r = parse_report_csv_row(line);
      const std::string key = r.method + "|" + r.dataset + "|" + (r.lambda ? detail::fmt_double(*r.lambda) : "") +
                              "|" + (r.k ? std::to_string(*r.k) : "");
      if (!groups.count(key)) order.push_back(key);
      groups[key].push_back(r);
    }
  }
  std::vector<MetricReport> rows;
  for (const auto& k : order) rows.push_back(average_reports(groups[k]));
  return rows;
}

/// PGM renderings of `per_class` test images per label with the run's
/// selections drawn at full intensity.
inline std::vector<fs::path> render_masks(const fs::path& run_dir, int per_class, std::uint64_t seed,
                                          const fs::path& out_dir) {
  auto [te, spec] = load_explainer(run_dir);
  const DataBundle data = load_bundle(spec);
  if (!data.test.is_image()) throw ConfigError("render needs an image dataset");
  RngStream eval_rng(te.config.seed, "evaluation-sampling");
  const Matrix masks = te.select(data.test.x, &eval_rng);
  RngStream pick(seed, "render");
  std::vector<int> idx(static_cast<std::size_t>(data.test.size()));
  std::iota(idx.begin(), idx.end(), 0);
  pick.shuffle(std::span<int>(idx));
  std::map<int, int> taken;
  std::vector<fs::path> written;
  fs::create_directories(out_dir);
  for (int i : idx) {
    const int y = data.test.y[static_cast<std::size_t>(i)];
    if (taken[y] >= per_class) continue;
    const int n = taken[y]++;
    const Matrix img = overlay_selection(
        std::span<const double>(data.test.x.row(i).data(), static_cast<std::size_t>(data.test.features())),
        masks.row(i), data.test.image_rows, data.test.image_cols);
    const fs::path p = out_dir / (std::string(method_name(te.config.method)) + "_digit" + std::to_string(y) + "_" +
                                  std::to_string(n) + ".pgm");
    detail::write_file(p, encode_pgm(img));
    written.push_back(p);
  }
  return written;
}

}  // namespace amortix
