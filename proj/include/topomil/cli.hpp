#pragma once

// `topomil` command line: gen, train, eval, ph, sweep.
//
// Exit codes: 0 success, 2 usage/config/input errors, 1 runtime failures.
// Diagnostics go to `err`, data to `out`.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "topomil/checkpoint.hpp"
#include "topomil/config.hpp"
#include "topomil/datasets.hpp"
#include "topomil/errors.hpp"
#include "topomil/milcore.hpp"
#include "topomil/persistence.hpp"
#include "topomil/training.hpp"

namespace topomil::cli {

namespace fs = std::filesystem;

/// Every key a run config may contain.
inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      // dataset
      "kind", "n_bags", "bag_size_mean", "bag_size_std", "positive_cap", "dim", "data_seed", "positive_label",
      "pool_source", "pool_classes", "pool_per_class", "pool_dim", "pool_center_scale", "pool_noise", "pool_seed",
      "idx_images", "idx_labels",
      // model + training
      "encoder_widths", "encoder_activations", "aggregator", "attention_hidden", "num_classes", "dual_head",
      "ridge", "lambda", "lr", "beta1", "beta2", "epochs", "patience", "seed", "gamma_start", "val_fraction",
      "val_data",
      // sweep
      "bag_counts", "size_specs", "runs", "test_bags",
      // output
      "out_dir"};
  return keys;
}

/// Key=value run configuration with paths resolved against the file's directory.
class RunConfig {
 public:
  static RunConfig load(const std::string& path) {
    RunConfig rc;
    rc.kv_ = KeyValues::load(path);
    rc.kv_.require_known(known_keys());
    rc.base_ = fs::absolute(fs::path(path)).parent_path();
    return rc;
  }

  static RunConfig from(KeyValues kv, fs::path base) {
    kv.require_known(known_keys());
    RunConfig rc;
    rc.kv_ = std::move(kv);
    rc.base_ = std::move(base);
    return rc;
  }

  const KeyValues& kv() const { return kv_; }
  KeyValues& kv() { return kv_; }

  std::optional<fs::path> path(const std::string& key) const {
    const std::string* v = kv_.find(key);
    if (!v || v->empty()) return std::nullopt;
    fs::path p(*v);
    return p.is_absolute() ? p : (base_ / p).lexically_normal();
  }

  TrainConfig train_config() const {
    TrainConfig tc;
    auto& enc = tc.model.encoder;
    for (const auto& w : split(kv_.get("encoder_widths", "100,64,2"), ',')) {
      try {
        enc.widths.push_back(std::stoull(w));
      } catch (const std::logic_error&) {
        throw ConfigError("encoder_widths: '" + w + "' is not a width");
      }
    }
    const std::string acts = kv_.get("encoder_activations", "");
    if (acts.empty()) enc.activations.assign(enc.widths.size() - 1, Activation::kRelu);
    else
      for (const auto& a : split(acts, ',')) enc.activations.push_back(parse_activation(a));
    tc.model.aggregator = parse_aggregator(kv_.get("aggregator", "rgp"));
    tc.model.attention_hidden = kv_.get_uint("attention_hidden", 128);
    tc.model.num_classes = kv_.get_uint("num_classes", 2);
    tc.model.dual_head = kv_.get_bool("dual_head", false);
    tc.model.ridge = kv_.get_double("ridge", 1e-3);
    tc.lambda = kv_.get_double("lambda", 0.0);
    tc.adam.lr = kv_.get_double("lr", 5e-4);
    tc.adam.beta1 = kv_.get_double("beta1", 0.9);
    tc.adam.beta2 = kv_.get_double("beta2", 0.999);
    tc.epochs = kv_.get_uint("epochs", 20);
    if (kv_.has("patience")) tc.patience = kv_.get_uint("patience", 1);
    tc.seed = kv_.get_uint("seed", 0);
    tc.gamma_start = kv_.get_double("gamma_start", 0.5);
    tc.validate();
    return tc;
  }

  std::string kind() const { return kv_.get("kind", ""); }

  BagDatasetSpec bag_spec(std::size_t n_bags, SizeSpec size, std::uint64_t seed) const {
    BagDatasetSpec s;
    s.n_bags = n_bags;
    s.size_mean = size.mean;
    s.size_std = size.std;
    s.positive_cap = kv_.get_double("positive_cap", 0.2);
    s.positive_label = static_cast<int>(kv_.get_uint("positive_label", 9));
    s.seed = seed;
    s.validate();
    return s;
  }

  ToySpec toy_spec(std::size_t n_bags, SizeSpec size, std::uint64_t seed) const {
    ToySpec s;
    s.n_bags = n_bags;
    s.size_mean = size.mean;
    s.size_std = size.std;
    s.dim = kv_.get_uint("dim", 100);
    s.positive_cap = kv_.get_double("positive_cap", 0.2);
    s.seed = seed;
    return s;
  }

  LabeledPool pool() const {
    const std::string source = kv_.get("pool_source", "gaussian");
    if (source == "idx") {
      auto images = path("idx_images");
      auto labels = path("idx_labels");
      if (!images || !labels) throw ConfigError("pool_source=idx needs idx_images and idx_labels");
      return load_idx(images->string(), labels->string());
    }
    if (source != "gaussian") throw ConfigError("pool_source must be gaussian or idx");
    GaussianPoolSpec g;
    g.classes = kv_.get_uint("pool_classes", 10);
    g.per_class = kv_.get_uint("pool_per_class", 200);
    g.dim = kv_.get_uint("pool_dim", 64);
    g.center_scale = kv_.get_double("pool_center_scale", 1.0);
    g.noise = kv_.get_double("pool_noise", 1.0);
    g.seed = kv_.get_uint("pool_seed", 0);
    return gen_gaussian_pool(g);
  }

  /// Generator for the configured dataset kind.
  BagGenerator generator() const {
    const std::string k = kind();
    if (k == "toy") {
      return [rc = *this](std::size_t n, SizeSpec size, std::uint64_t seed) {
        return gen_toy(rc.toy_spec(n, size, seed));
      };
    }
    if (k == "pool-bags") {
      auto shared = std::make_shared<LabeledPool>(pool());
      return [rc = *this, shared](std::size_t n, SizeSpec size, std::uint64_t seed) {
        return build_bags(*shared, rc.bag_spec(n, size, seed));
      };
    }
    throw ConfigError("kind must be toy or pool-bags");
  }

  SizeSpec size() const { return {kv_.get_double("bag_size_mean", 10.0), kv_.get_double("bag_size_std", 2.0)}; }

 private:
  KeyValues kv_;
  fs::path base_;
};

namespace detail {

struct UsageError : ConfigError {
  using ConfigError::ConfigError;
};

inline fs::path require_out_dir(const std::string& flag, const RunConfig* rc) {
  fs::path out;
  if (!flag.empty()) out = flag;
  else if (rc && rc->path("out_dir")) out = *rc->path("out_dir");
  else throw UsageError("no output directory (--out or out_dir)");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw std::runtime_error("cannot create output directory " + out.string());
  return out;
}

inline fs::path bag_file(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "bags.csv";
  if (!fs::exists(p)) throw UsageError("data file not found: " + p.string());
  return p;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << v;
  return os.str();
}

inline void print_metrics(std::ostream& os, const std::string& prefix, const MetricsReport& m) {
  os << prefix << "accuracy=" << fmt(m.accuracy) << ' ' << prefix << "f1=" << fmt(m.f1) << ' ' << prefix
     << "auroc=" << fmt(m.auroc) << ' ' << prefix << "precision=" << fmt(m.precision) << ' ' << prefix
     << "recall=" << fmt(m.recall) << '\n';
}

inline std::size_t thread_budget() {
  if (const char* env = std::getenv("TOPOMIL_THREADS")) {
    try {
      const auto n = std::stoull(env);
      if (n >= 1) return n;
    } catch (const std::logic_error&) {
    }
    throw UsageError(std::string("TOPOMIL_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_gen(const std::string& kind_flag, const std::string& spec_path, const std::string& out_flag,
                   std::ostream& out) {
  KeyValues kv;
  fs::path base = fs::current_path();
  if (!spec_path.empty()) {
    kv = KeyValues::load(spec_path);
    base = fs::absolute(fs::path(spec_path)).parent_path();
  }
  if (!kind_flag.empty()) {
    if (kv.has("kind") && kv.get("kind", "") != kind_flag) {
      throw detail::UsageError("--kind " + kind_flag + " contradicts kind=" + kv.get("kind", "") + " in spec");
    }
    kv.set("kind", kind_flag);
  }
  RunConfig rc = RunConfig::from(kv, base);
  const std::string kind = rc.kind();
  const std::size_t n_bags = rc.kv().get_uint("n_bags", 100);
  const SizeSpec size = rc.size();
  const std::uint64_t seed = rc.kv().get_uint("data_seed", 0);

  // Manifest: every dataset key with its effective value.
  KeyValues manifest;
  manifest.set("kind", kind);
  manifest.set("n_bags", std::to_string(n_bags));
  manifest.set("bag_size_mean", format_number(size.mean));
  manifest.set("bag_size_std", format_number(size.std));
  manifest.set("positive_cap", format_number(rc.kv().get_double("positive_cap", 0.2)));
  manifest.set("data_seed", std::to_string(seed));
  std::vector<Bag> bags;
  if (kind == "toy") {
    manifest.set("dim", std::to_string(rc.kv().get_uint("dim", 100)));
    bags = gen_toy(rc.toy_spec(n_bags, size, seed));
  } else if (kind == "pool-bags") {
    const std::string source = rc.kv().get("pool_source", "gaussian");
    manifest.set("positive_label", std::to_string(rc.kv().get_uint("positive_label", 9)));
    manifest.set("pool_source", source);
    if (source == "idx") {
      manifest.set("idx_images", rc.path("idx_images") ? rc.path("idx_images")->string() : "");
      manifest.set("idx_labels", rc.path("idx_labels") ? rc.path("idx_labels")->string() : "");
    } else {
      manifest.set("pool_classes", std::to_string(rc.kv().get_uint("pool_classes", 10)));
      manifest.set("pool_per_class", std::to_string(rc.kv().get_uint("pool_per_class", 200)));
      manifest.set("pool_dim", std::to_string(rc.kv().get_uint("pool_dim", 64)));
      manifest.set("pool_center_scale", format_number(rc.kv().get_double("pool_center_scale", 1.0)));
      manifest.set("pool_noise", format_number(rc.kv().get_double("pool_noise", 1.0)));
      manifest.set("pool_seed", std::to_string(rc.kv().get_uint("pool_seed", 0)));
    }
    bags = build_bags(rc.pool(), rc.bag_spec(n_bags, size, seed));
  } else {
    throw detail::UsageError("--kind must be toy or pool-bags");
  }

  const fs::path dir = detail::require_out_dir(out_flag, nullptr);
  save_bag_csv((dir / "bags.csv").string(), bags);
  std::ofstream mf(dir / "manifest.txt", std::ios::binary);
  if (!mf) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  manifest.write(mf);

  std::size_t positives = 0;
  for (const Bag& b : bags) positives += b.label == 1;
  out << "bags=" << bags.size() << " positive=" << positives << " negative=" << bags.size() - positives << '\n';
  return 0;
}

inline int cmd_train(const std::string& config_path, const std::string& data, const std::string& out_flag,
                     std::ostream& out) {
  RunConfig rc = RunConfig::load(config_path);
  const TrainConfig tc = rc.train_config();
  std::vector<Bag> bags = load_bag_csv(detail::bag_file(data).string());
  if (bags.empty()) throw detail::UsageError("no bags in " + data);
  for (const Bag& b : bags) {
    if (b.instances.cols() != tc.model.encoder.input_dim()) {
      throw detail::UsageError("data has " + std::to_string(b.instances.cols()) + " features but encoder expects " +
                               std::to_string(tc.model.encoder.input_dim()));
    }
  }

  std::vector<Bag> train_bags, val_bags;
  if (auto vp = rc.path("val_data")) {
    train_bags = std::move(bags);
    val_bags = load_bag_csv(detail::bag_file(vp->string()).string());
  } else if (const double frac = rc.kv().get_double("val_fraction", 0.0); frac > 0.0) {
    if (frac >= 1.0) throw ConfigError("val_fraction must lie in [0, 1)");
    std::vector<std::size_t> idx(bags.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(tc.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(frac * static_cast<double>(bags.size())));
    if (n_val >= bags.size()) throw ConfigError("val_fraction leaves no training bags");
    std::sort(idx.begin(), idx.begin() + static_cast<long>(n_val));
    std::sort(idx.begin() + static_cast<long>(n_val), idx.end());
    val_bags = subset(bags, std::span(idx).first(n_val));
    train_bags = subset(bags, std::span(idx).subspan(n_val));
  } else {
    train_bags = std::move(bags);
  }

  const fs::path dir = detail::require_out_dir(out_flag, &rc);
  const TrainResult res = train(train_bags, tc, val_bags);
  save_checkpoint((dir / "checkpoint.txt").string(), res.model);
  std::ofstream hf(dir / "history.csv", std::ios::binary);
  if (!hf) throw std::runtime_error("cannot write " + (dir / "history.csv").string());
  write_history_csv(hf, res.history);

  const auto& last = res.history.epochs.back();
  out << "epochs=" << res.history.epochs.size() << " final_loss_class=" << detail::fmt(last.loss_class)
      << " final_loss_topo=" << detail::fmt(last.loss_topo_fwd + last.loss_topo_rev) << '\n';
  detail::print_metrics(out, "train_", evaluate(res.model, train_bags));
  if (!val_bags.empty()) {
    out << "best_epoch=" << res.best_epoch << '\n';
    detail::print_metrics(out, "best_val_", evaluate(res.model, val_bags));
  }
  return 0;
}

inline int cmd_eval(const std::string& checkpoint, const std::string& data, std::ostream& out, std::ostream& err) {
  if (!fs::exists(checkpoint)) throw detail::UsageError("checkpoint not found: " + checkpoint);
  const MilModel model = load_checkpoint(checkpoint);
  const std::vector<Bag> bags = load_bag_csv(detail::bag_file(data).string());
  if (bags.empty()) throw detail::UsageError("no bags in " + data);
  for (const Bag& b : bags) {
    if (b.instances.cols() != model.config().encoder.input_dim()) {
      throw detail::UsageError("data has " + std::to_string(b.instances.cols()) + " features but checkpoint expects " +
                               std::to_string(model.config().encoder.input_dim()));
    }
    if (b.label >= model.config().num_classes) throw detail::UsageError("bag '" + b.id + "' label out of range");
  }
  const MetricsReport m = evaluate(model, bags);
  if (m.auroc_partial()) {
    err << "warning: AUROC undefined for " << m.auroc_skipped_classes.size()
        << " class(es) absent or exclusive in the data; excluded from the macro mean\n";
  }
  out << "accuracy=" << format_number(m.accuracy) << '\n'
      << "f1=" << format_number(m.f1) << '\n'
      << "auroc=" << format_number(m.auroc) << '\n'
      << "precision=" << format_number(m.precision) << '\n'
      << "recall=" << format_number(m.recall) << '\n';
  return 0;
}

inline int cmd_ph(const std::string& data, const std::string& bag_id, const std::string& space, std::ostream& out) {
  if (space != "input") throw detail::UsageError("--space supports only 'input' (latent needs a checkpoint)");
  const std::vector<Bag> bags = load_bag_csv(detail::bag_file(data).string());
  for (const Bag& b : bags) {
    if (b.id != bag_id) continue;
    const DistanceMatrix dist = euclidean_distance_matrix(b.instances);
    const PersistencePairing pairing = vr_persistence_0d(dist);
    write_diagram_csv(out, pairing, diagram_from_pairing(dist, pairing));
    return 0;
  }
  throw detail::UsageError("no bag with id '" + bag_id + "'");
}

inline SweepConfig sweep_config(const RunConfig& rc) {
  SweepConfig sc;
  sc.base = rc.train_config();
  if (rc.kv().has("bag_counts")) {
    sc.bag_counts.clear();
    for (const auto& c : split(rc.kv().get("bag_counts", ""), ',')) {
      try {
        sc.bag_counts.push_back(std::stoull(c));
      } catch (const std::logic_error&) {
        throw ConfigError("bag_counts: '" + c + "' is not a count");
      }
    }
  }
  if (rc.kv().has("size_specs")) {
    sc.size_specs.clear();
    for (const auto& s : split(rc.kv().get("size_specs", ""), ',')) {
      const auto parts = split(s, ':');
      try {
        if (parts.size() != 2) throw std::invalid_argument(s);
        sc.size_specs.push_back({std::stod(parts[0]), std::stod(parts[1])});
      } catch (const std::logic_error&) {
        throw ConfigError("size_specs: '" + s + "' is not mean:std");
      }
    }
  }
  sc.runs = rc.kv().get_uint("runs", 5);
  sc.test_bags = rc.kv().get_uint("test_bags", 100);
  sc.seed = rc.kv().get_uint("data_seed", 0);
  return sc;
}

inline int cmd_sweep(const std::string& config_path, const std::string& out_flag, bool resume, std::ostream& out,
                     std::ostream& err) {
  RunConfig rc = RunConfig::load(config_path);
  SweepConfig sc = sweep_config(rc);
  sc.threads = detail::thread_budget();
  const BagGenerator gen = rc.generator();
  const fs::path dir = detail::require_out_dir(out_flag, &rc);
  const fs::path csv = dir / "sweep.csv";

  std::vector<SweepRow> previous;
  std::set<std::string> done;
  if (resume && fs::exists(csv)) {
    std::ifstream is(csv);
    std::string line;
    std::getline(is, line);
    if (line != kSweepHeader) throw FormatError(csv.string() + ": unexpected header, cannot resume");
    while (std::getline(is, line)) {
      const auto f = split(line, ',');
      if (f.size() != 7) continue;  // partial trailing line from an interrupted run
      SweepRow r{std::stoull(f[0]), std::stod(f[1]), std::stod(f[2]), f[3], std::stoull(f[4]), std::stod(f[5]),
                 std::stod(f[6])};
      if (done.insert(sweep_key(r)).second) previous.push_back(r);
    }
    err << "resume: " << previous.size() << " cell(s) already complete\n";
  }

  {
    // Rows are appended as they finish so an interrupted sweep can resume.
    std::ofstream log(csv, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + csv.string());
    log << kSweepHeader << '\n';
    for (const auto& r : previous) write_sweep_row(log, r);
    log.flush();
    auto fresh = scarcity_sweep(sc, gen, done, [&](const SweepRow& r) {
      write_sweep_row(log, r);
      log.flush();
    });
    previous.insert(previous.end(), fresh.begin(), fresh.end());
  }

  // Rewrite in canonical cell order.
  std::map<std::string, SweepRow> by_key;
  for (const auto& r : previous) by_key.emplace(sweep_key(r), r);
  std::vector<SweepRow> ordered;
  for (std::size_t count : sc.bag_counts)
    for (const SizeSpec& s : sc.size_specs)
      for (std::size_t run = 0; run < sc.runs; ++run)
        for (const char* kind : {"baseline", "regularized"}) {
          auto it = by_key.find(sweep_key(count, s.mean, s.std, kind, run));
          if (it != by_key.end()) ordered.push_back(it->second);
        }
  std::ofstream final_csv(csv, std::ios::trunc);
  final_csv << kSweepHeader << '\n';
  for (const auto& r : ordered) write_sweep_row(final_csv, r);
  if (!final_csv) throw std::runtime_error("failed writing " + csv.string());

  out << "bag_count,size_mean,size_std,model,runs,f1_mean,f1_std,accuracy_mean\n";
  for (const auto& s : summarize(ordered)) {
    out << s.bag_count << ',' << format_number(s.size_mean) << ',' << format_number(s.size_std) << ',' << s.model
        << ',' << s.runs << ',' << detail::fmt(s.f1_mean) << ',' << detail::fmt(s.f1_std) << ','
        << detail::fmt(s.accuracy_mean) << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Topologically regularized multiple-instance learning", "topomil"};
  app.require_subcommand(1);

  std::string kind, spec, out_dir, config, data, checkpoint, bag_id, space = "input";
  bool resume = false;

  auto* gen = app.add_subcommand("gen", "generate a bag dataset and its manifest");
  gen->add_option("--kind", kind, "toy or pool-bags");
  gen->add_option("--spec", spec, "key=value dataset spec (or a previous manifest)");
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* trn = app.add_subcommand("train", "train a model, write checkpoint and history");
  trn->add_option("--config", config, "key=value run config")->required();
  trn->add_option("--data", data, "bag CSV file or dataset directory")->required();
  trn->add_option("--out", out_dir, "output directory (default: out_dir from config)");

  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on a bag dataset");
  evl->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evl->add_option("--data", data, "bag CSV file or dataset directory")->required();

  auto* ph = app.add_subcommand("ph", "print the 0-dim persistence diagram of one bag");
  ph->add_option("--data", data, "bag CSV file or dataset directory")->required();
  ph->add_option("--bag", bag_id, "bag id")->required();
  ph->add_option("--space", space, "point cloud space (input)");

  auto* swp = app.add_subcommand("sweep", "scarcity sweep: baseline vs regularized");
  swp->add_option("--config", config, "key=value sweep config")->required();
  swp->add_option("--out", out_dir, "output directory (default: out_dir from config)");
  swp->add_flag("--resume", resume, "skip cells already present in sweep.csv");

  std::vector<const char*> argv{"topomil"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (*gen) return cmd_gen(kind, spec, out_dir, out);
    if (*trn) return cmd_train(config, data, out_dir, out);
    if (*evl) return cmd_eval(checkpoint, data, out, err);
    if (*ph) return cmd_ph(data, bag_id, space, out);
    if (*swp) return cmd_sweep(config, out_dir, resume, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace topomil::cli
