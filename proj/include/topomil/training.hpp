#pragma once

// Adam, the per-bag training loop, fold construction, evaluation and the
// scarcity sweep harness.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "topomil/autodiff.hpp"
#include "topomil/datasets.hpp"
#include "topomil/metrics.hpp"
#include "topomil/milcore.hpp"
#include "topomil/toporeg.hpp"

namespace topomil {

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update from each parameter's current grad.
inline void adam_step(std::span<ad::Parameter* const> params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const ad::Parameter* p : params) {
      state.m.emplace_back(p->value.rows(), p->value.cols());
      state.v.emplace_back(p->value.rows(), p->value.cols());
    }
  }
  if (state.m.size() != params.size()) throw std::logic_error("adam_step: parameter set changed");
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k]->value.values();
    auto grad = params[k]->grad.values();
    auto m = state.m[k].values();
    auto v = state.v[k].values();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      value[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  ModelConfig model;
  double lambda = 0.0;
  AdamConfig adam;
  std::size_t epochs = 20;
  std::optional<std::size_t> patience;
  std::uint64_t seed = 0;
  /// Dual-head gamma decays linearly from this value to 0 at the last epoch.
  double gamma_start = 0.5;

  void validate() const {
    model.validate();
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(adam.lr > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (patience && *patience == 0) throw ConfigError("patience must be >= 1");
    if (!(gamma_start >= 0.0 && gamma_start <= 1.0)) throw ConfigError("gamma_start must lie in [0, 1]");
  }
};

inline double gamma_at(const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.epochs <= 1) return 0.0;
  return cfg.gamma_start * (1.0 - static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1));
}

struct EpochRecord {
  std::size_t epoch = 0;
  double loss_class = 0.0;
  double loss_topo_fwd = 0.0;
  double loss_topo_rev = 0.0;
  std::optional<double> val_accuracy;
  std::optional<double> val_f1;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  MilModel model;
  TrainHistory history;
  /// Epoch of the returned snapshot (last epoch when there is no validation).
  std::size_t best_epoch = 0;
};

inline MetricsReport evaluate(const MilModel& model, std::span<const Bag> bags) {
  if (bags.empty()) throw std::invalid_argument("evaluate: no bags");
  const std::size_t c = model.config().num_classes;
  Matrix probs(bags.size(), c);
  std::vector<std::size_t> labels;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    if (bags[b].instances.cols() != model.config().encoder.input_dim()) {
      throw DimensionError("evaluate: bag '" + bags[b].id + "' has " + std::to_string(bags[b].instances.cols()) +
                           " features, model expects " + std::to_string(model.config().encoder.input_dim()));
    }
    const auto p = model.predict_proba(bags[b].instances);
    std::copy(p.begin(), p.end(), probs.row_view(b).begin());
    labels.push_back(bags[b].label);
  }
  return compute_metrics(labels, probs);
}

/// Refit the negative-instance Gaussian from the current encoder.
inline void refit_negative_gaussian(MilModel& model, std::span<const Bag> bags) {
  std::vector<double> rows;
  std::size_t count = 0;
  const std::size_t latent = model.config().encoder.latent_dim();
  for (const Bag& b : bags) {
    if (b.label != 0) continue;
    Matrix z = model.embed(b.instances);
    rows.insert(rows.end(), z.values().begin(), z.values().end());
    count += z.rows();
  }
  if (count < 2) throw std::runtime_error("anomaly pooling: need at least 2 instances from negative bags");
  model.set_gaussian(fit_negative_gaussian(Matrix(count, latent, std::move(rows)), model.config().ridge));
}

/// Batch size 1, bags shuffled each epoch. With `validation`, the snapshot
/// with the best validation accuracy (earliest on ties) is returned and
/// early stopping applies when `patience` is set.
inline TrainResult train(std::span<const Bag> bags, const TrainConfig& cfg,
                         std::span<const Bag> validation = {}) {
  cfg.validate();
  if (bags.empty()) throw std::invalid_argument("train: no training bags");
  const bool anomaly = cfg.model.aggregator == AggregatorKind::kAnomaly;
  if (anomaly && std::none_of(bags.begin(), bags.end(), [](const Bag& b) { return b.label == 0; })) {
    throw std::invalid_argument("train: anomaly pooling needs at least one negative training bag");
  }
  for (const Bag& b : bags) {
    if (b.instances.cols() != cfg.model.encoder.input_dim()) {
      throw DimensionError("train: bag '" + b.id + "' has " + std::to_string(b.instances.cols()) +
                           " features, encoder expects " + std::to_string(cfg.model.encoder.input_dim()));
    }
    if (b.label >= cfg.model.num_classes) throw std::out_of_range("train: bag '" + b.id + "' label out of range");
  }

  MilModel model(cfg.model, cfg.seed);
  std::vector<InputTopology> topo;
  if (cfg.lambda > 0.0)
    for (const Bag& b : bags) topo.push_back(input_topology(b.instances));

  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order(bags.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto params = model.params().pointers();
  AdamState adam;

  TrainResult result{model, {}, 0};
  double best_acc = -1.0;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (anomaly) refit_negative_gaussian(model, bags);
    const double gamma = gamma_at(cfg, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t idx : order) {
      const Bag& bag = bags[idx];
      ad::Tape tape;
      LossTerms terms = total_loss(tape, model, bag.instances, bag.label, cfg.lambda,
                                   cfg.model.dual_head ? gamma : 0.0, topo.empty() ? nullptr : &topo[idx]);
      if (!std::isfinite(terms.total.item())) {
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) + ", bag '" + bag.id + "'");
      }
      model.params().zero_grad();
      tape.backward(terms.total);
      adam_step(params, adam, cfg.adam);
      rec.loss_class += terms.class_loss;
      rec.loss_topo_fwd += terms.topo.forward_term;
      rec.loss_topo_rev += terms.topo.reverse_term;
    }
    const double nb = static_cast<double>(bags.size());
    rec.loss_class /= nb;
    rec.loss_topo_fwd /= nb;
    rec.loss_topo_rev /= nb;

    if (!validation.empty()) {
      if (anomaly) refit_negative_gaussian(model, bags);
      const MetricsReport m = evaluate(model, validation);
      rec.val_accuracy = m.accuracy;
      rec.val_f1 = m.f1;
      if (m.accuracy > best_acc) {
        best_acc = m.accuracy;
        result.model = model;
        result.best_epoch = epoch;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    result.history.epochs.push_back(rec);
    if (!validation.empty() && cfg.patience && since_best >= *cfg.patience) break;
  }
  if (validation.empty()) {
    if (anomaly) refit_negative_gaussian(model, bags);
    result.model = std::move(model);
    result.best_epoch = result.history.epochs.size() - 1;
  }
  return result;
}

/// CSV `epoch,loss_class,loss_topo_fwd,loss_topo_rev,val_accuracy,val_f1`;
/// validation columns are empty when no validation set was given.
inline void write_history_csv(std::ostream& os, const TrainHistory& history) {
  os << "epoch,loss_class,loss_topo_fwd,loss_topo_rev,val_accuracy,val_f1\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const EpochRecord& r : history.epochs) {
    os << r.epoch << ',' << num(r.loss_class) << ',' << num(r.loss_topo_fwd) << ',' << num(r.loss_topo_rev) << ','
       << (r.val_accuracy ? num(*r.val_accuracy) : "") << ',' << (r.val_f1 ? num(*r.val_f1) : "") << '\n';
  }
}

// ---------------------------------------------------------------------------
// Cross-validation

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded shuffle, then round-robin into k folds. Group-aware mode deals out
/// whole groups (by Bag::group) so no group spans two folds.
inline std::vector<Fold> k_fold(std::span<const Bag> bags, std::size_t k, std::uint64_t seed, bool group_aware) {
  if (k < 2) throw std::invalid_argument("k_fold: k must be >= 2");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> units;  // each unit goes to one fold
  if (group_aware) {
    std::map<std::string, std::size_t> slot;
    for (std::size_t i = 0; i < bags.size(); ++i) {
      auto [it, fresh] = slot.emplace(bags[i].group, units.size());
      if (fresh) units.emplace_back();
      units[it->second].push_back(i);
    }
    if (units.size() < k) {
      throw std::invalid_argument("k_fold: " + std::to_string(units.size()) + " groups cannot fill " +
                                  std::to_string(k) + " folds");
    }
  } else {
    if (bags.size() < k) {
      throw std::invalid_argument("k_fold: " + std::to_string(bags.size()) + " bags cannot fill " + std::to_string(k) +
                                  " folds");
    }
    for (std::size_t i = 0; i < bags.size(); ++i) units.push_back({i});
  }
  std::shuffle(units.begin(), units.end(), rng);
  std::vector<Fold> folds(k);
  for (std::size_t u = 0; u < units.size(); ++u) {
    auto& test = folds[u % k].test;
    test.insert(test.end(), units[u].begin(), units[u].end());
  }
  for (std::size_t f = 0; f < k; ++f) {
    std::sort(folds[f].test.begin(), folds[f].test.end());
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) folds[f].train.insert(folds[f].train.end(), folds[g].test.begin(), folds[g].test.end());
    std::sort(folds[f].train.begin(), folds[f].train.end());
  }
  return folds;
}

inline std::vector<Bag> subset(std::span<const Bag> bags, std::span<const std::size_t> index) {
  std::vector<Bag> out;
  out.reserve(index.size());
  for (std::size_t i : index) out.push_back(bags[i]);
  return out;
}

/// Best validation value per run: max over epochs of the tracked metric.
inline double best_of(const TrainHistory& h, std::optional<double> EpochRecord::*field) {
  double best = 0.0;
  for (const auto& r : h.epochs)
    if (r.*field) best = std::max(best, *(r.*field));
  return best;
}

// ---------------------------------------------------------------------------
// Scarcity sweep

struct SizeSpec {
  double mean = 10.0;
  double std = 2.0;
};

/// (n_bags, size spec, seed) -> bags.
using BagGenerator = std::function<std::vector<Bag>(std::size_t, SizeSpec, std::uint64_t)>;

struct SweepConfig {
  std::vector<std::size_t> bag_counts{10, 14, 20, 50, 100, 200};
  std::vector<SizeSpec> size_specs{{10, 2}, {50, 10}, {100, 20}};
  std::size_t runs = 5;
  std::size_t test_bags = 100;
  /// Regularized models use base.lambda; baselines use 0.
  TrainConfig base;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct SweepRow {
  std::size_t bag_count = 0;
  double size_mean = 0.0;
  double size_std = 0.0;
  std::string model;  // "baseline" or "regularized"
  std::size_t run = 0;
  double f1 = 0.0;
  double accuracy = 0.0;
};

struct SweepSummary {
  std::size_t bag_count = 0;
  double size_mean = 0.0;
  double size_std = 0.0;
  std::string model;
  double f1_mean = 0.0;
  double f1_std = 0.0;
  double accuracy_mean = 0.0;
  std::size_t runs = 0;
};

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string sweep_key(std::size_t bag_count, double mean, double std, const std::string& model,
                             std::size_t run) {
  return std::to_string(bag_count) + "," + format_number(mean) + "," + format_number(std) + "," + model + "," +
         std::to_string(run);
}

inline std::string sweep_key(const SweepRow& r) { return sweep_key(r.bag_count, r.size_mean, r.size_std, r.model, r.run); }

/// Trains a baseline (lambda = 0) and a regularized model for every
/// (bag count, size spec, run) on identical data and initialization, and
/// scores both on a separately seeded test set used as the validation
/// split; each run reports its best-epoch F1 and accuracy. Rows whose key is
/// in `done` are skipped. Output order is the cell order, independent of
/// thread scheduling. `on_row` is called (serialized) as rows complete.
inline std::vector<SweepRow> scarcity_sweep(const SweepConfig& cfg, const BagGenerator& generate,
                                            const std::set<std::string>& done = {},
                                            const std::function<void(const SweepRow&)>& on_row = {}) {
  cfg.base.validate();
  if (cfg.runs == 0) throw ConfigError("sweep runs must be >= 1");
  struct Task {
    SweepRow row;
    double lambda;
  };
  std::vector<Task> tasks;
  for (std::size_t count : cfg.bag_counts)
    for (const SizeSpec& spec : cfg.size_specs)
      for (std::size_t run = 0; run < cfg.runs; ++run)
        for (const char* kind : {"baseline", "regularized"}) {
          SweepRow row{count, spec.mean, spec.std, kind, run, 0.0, 0.0};
          if (done.count(sweep_key(row))) continue;
          tasks.push_back({row, std::string(kind) == "baseline" ? 0.0 : cfg.base.lambda});
        }

  std::vector<SweepRow> out(tasks.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t t = next++; t < tasks.size(); t = next++) {
      try {
        SweepRow row = tasks[t].row;
        const std::uint64_t run_seed = cfg.seed + row.run;
        const SizeSpec spec{row.size_mean, row.size_std};
        const auto train_bags = generate(row.bag_count, spec, run_seed * 2 + 1);
        const auto test_bags = generate(cfg.test_bags, spec, run_seed * 2 + 2);
        TrainConfig tc = cfg.base;
        tc.lambda = tasks[t].lambda;
        tc.seed = cfg.base.seed + row.run;
        const TrainResult res = train(train_bags, tc, test_bags);
        row.f1 = best_of(res.history, &EpochRecord::val_f1);
        row.accuracy = best_of(res.history, &EpochRecord::val_accuracy);
        std::lock_guard lock(mu);
        out[t] = row;
        if (on_row) on_row(row);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = tasks.size();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(cfg.threads, tasks.size()));
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < n_threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

/// Mean and sample standard deviation per (bag count, size spec, model).
inline std::vector<SweepSummary> summarize(const std::vector<SweepRow>& rows) {
  std::vector<SweepSummary> out;
  std::map<std::tuple<std::size_t, double, double, std::string>, std::vector<const SweepRow*>> cells;
  std::vector<std::tuple<std::size_t, double, double, std::string>> order;
  for (const SweepRow& r : rows) {
    auto key = std::make_tuple(r.bag_count, r.size_mean, r.size_std, r.model);
    auto [it, fresh] = cells.try_emplace(key);
    if (fresh) order.push_back(key);
    it->second.push_back(&r);
  }
  for (const auto& key : order) {
    const auto& members = cells[key];
    SweepSummary s{std::get<0>(key), std::get<1>(key), std::get<2>(key), std::get<3>(key), 0, 0, 0, members.size()};
    for (const SweepRow* r : members) {
      s.f1_mean += r->f1;
      s.accuracy_mean += r->accuracy;
    }
    const double n = static_cast<double>(members.size());
    s.f1_mean /= n;
    s.accuracy_mean /= n;
    if (members.size() > 1) {
      for (const SweepRow* r : members) s.f1_std += (r->f1 - s.f1_mean) * (r->f1 - s.f1_mean);
      s.f1_std = std::sqrt(s.f1_std / (n - 1.0));
    }
    out.push_back(s);
  }
  return out;
}

inline constexpr const char* kSweepHeader = "bag_count,size_mean,size_std,model,run,f1,accuracy";

inline void write_sweep_row(std::ostream& os, const SweepRow& r) {
  os << sweep_key(r) << ',' << format_number(r.f1) << ',' << format_number(r.accuracy) << '\n';
}

}  // namespace topomil
