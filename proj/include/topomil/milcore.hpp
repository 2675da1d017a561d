#pragma once

// Multiple-instance model: instance encoder, bag aggregator, classifier
// head(s) and the composed training objective.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "topomil/autodiff.hpp"
#include "topomil/errors.hpp"
#include "topomil/linalg.hpp"
#include "topomil/matrix.hpp"
#include "topomil/toporeg.hpp"

namespace topomil {

// ---------------------------------------------------------------------------
// Configuration

enum class Activation { kNone, kRelu, kTanh };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kNone: return "none";
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "none") return Activation::kNone;
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw ConfigError("unknown activation '" + std::string(s) + "' (expected relu, tanh or none)");
}

/// Widths run input -> ... -> latent; one activation per linear layer.
struct EncoderConfig {
  std::vector<std::size_t> widths;
  std::vector<Activation> activations;

  std::size_t input_dim() const { return widths.front(); }
  std::size_t latent_dim() const { return widths.back(); }
  std::size_t layers() const { return widths.size() - 1; }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("encoder needs at least one layer (two widths)");
    if (activations.size() != widths.size() - 1) {
      throw ConfigError("encoder has " + std::to_string(widths.size() - 1) + " layers but " +
                        std::to_string(activations.size()) + " activations");
    }
    for (std::size_t w : widths)
      if (w == 0) throw ConfigError("encoder width must be positive");
  }
};

enum class AggregatorKind { kMax, kMean, kAttention, kRgp, kAnomaly };

inline std::string_view to_string(AggregatorKind k) {
  switch (k) {
    case AggregatorKind::kMax: return "max";
    case AggregatorKind::kMean: return "mean";
    case AggregatorKind::kAttention: return "attention";
    case AggregatorKind::kRgp: return "rgp";
    case AggregatorKind::kAnomaly: return "anomaly";
  }
  return "?";
}

inline AggregatorKind parse_aggregator(std::string_view s) {
  if (s == "max") return AggregatorKind::kMax;
  if (s == "mean") return AggregatorKind::kMean;
  if (s == "attention") return AggregatorKind::kAttention;
  if (s == "rgp") return AggregatorKind::kRgp;
  if (s == "anomaly") return AggregatorKind::kAnomaly;
  throw ConfigError("unknown aggregator '" + std::string(s) +
                    "' (expected max, mean, attention, rgp or anomaly)");
}

struct ModelConfig {
  EncoderConfig encoder;
  AggregatorKind aggregator = AggregatorKind::kRgp;
  std::size_t attention_hidden = 128;
  std::size_t num_classes = 2;
  bool dual_head = false;
  double ridge = 1e-3;

  void validate() const {
    encoder.validate();
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (aggregator == AggregatorKind::kRgp && num_classes != 2) {
      throw ConfigError("rgp pooling is defined for binary problems (num_classes = 2)");
    }
    if ((aggregator == AggregatorKind::kAttention || aggregator == AggregatorKind::kAnomaly) &&
        attention_hidden == 0) {
      throw ConfigError("attention_hidden must be positive");
    }
    if (!(ridge >= 0.0)) throw ConfigError("ridge must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Parameters

/// Named parameters in declaration order. Addresses are stable.
class ParameterStore {
 public:
  ad::Parameter& add(std::string name, Matrix value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    index_.emplace(name, items_.size());
    items_.push_back(std::make_unique<ad::Parameter>(std::move(name), std::move(value)));
    return *items_.back();
  }

  ad::Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return *items_[it->second];
  }
  const ad::Parameter& at(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->at(name);
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return items_.size(); }
  ad::Parameter& operator[](std::size_t i) { return *items_[i]; }
  const ad::Parameter& operator[](std::size_t i) const { return *items_[i]; }

  std::vector<ad::Parameter*> pointers() {
    std::vector<ad::Parameter*> out;
    for (auto& p : items_) out.push_back(p.get());
    return out;
  }

  void zero_grad() {
    for (auto& p : items_) p->zero_grad();
  }

  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    items_.clear();
    index_ = other.index_;
    for (const auto& p : other.items_) items_.push_back(std::make_unique<ad::Parameter>(*p));
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

 private:
  std::vector<std::unique_ptr<ad::Parameter>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Negative-instance Gaussian for anomaly pooling

struct NegativeGaussian {
  Matrix mean;        // 1 x L
  Matrix covariance;  // L x L, ridge already on the diagonal
  Matrix precision;   // inverse of covariance
  double ridge = 0.0;
};

/// Column mean and sample covariance (m - 1 denominator) of the rows, with
/// `ridge` added to the diagonal before the Cholesky inversion.
inline NegativeGaussian fit_negative_gaussian(const Matrix& latents, double ridge) {
  const std::size_t m = latents.rows(), dim = latents.cols();
  if (m < 2) throw std::invalid_argument("fit_negative_gaussian: need at least 2 latents");
  NegativeGaussian g;
  g.ridge = ridge;
  g.mean = Matrix(1, dim);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < dim; ++c) g.mean[c] += latents(r, c);
  for (std::size_t c = 0; c < dim; ++c) g.mean[c] /= static_cast<double>(m);

  g.covariance = Matrix(dim, dim);
  std::vector<double> centered(dim);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < dim; ++c) centered[c] = latents(r, c) - g.mean[c];
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j <= i; ++j) g.covariance(i, j) += centered[i] * centered[j];
  }
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = g.covariance(i, j) / static_cast<double>(m - 1);
      g.covariance(i, j) = g.covariance(j, i) = v;
    }
  for (std::size_t i = 0; i < dim; ++i) g.covariance(i, i) += ridge;

  auto chol = linalg::cholesky(g.covariance);
  if (!chol) {
    throw std::runtime_error("fit_negative_gaussian: covariance is not positive definite with ridge " +
                             std::to_string(ridge) + "; use a larger ridge");
  }
  g.precision = linalg::cholesky_inverse(*chol);
  return g;
}

inline double mahalanobis(const NegativeGaussian& g, std::span<const double> z) {
  const std::size_t dim = g.mean.size();
  if (z.size() != dim) throw DimensionError("mahalanobis: dimension mismatch");
  double q = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double di = z[i] - g.mean[i];
    if (di == 0.0) continue;
    double row = 0.0;
    for (std::size_t j = 0; j < dim; ++j) row += g.precision(i, j) * (z[j] - g.mean[j]);
    q += di * row;
  }
  return std::sqrt(std::max(q, 0.0));
}

// ---------------------------------------------------------------------------
// Building blocks on the tape

struct LinearVars {
  ad::Var weight;  // in x out
  ad::Var bias;    // 1 x out
};

/// x W + 1 b, with the bias repeated over rows through an explicit ones column.
inline ad::Var linear(const ad::Var& x, const LinearVars& layer) {
  ad::Tape& tape = x.tape();
  ad::Var ones = tape.constant(Matrix(x.shape().rows, 1, 1.0));
  return ad::add(ad::matmul(x, layer.weight), ad::matmul(ones, layer.bias));
}

inline ad::Var activate(const ad::Var& x, Activation a) {
  switch (a) {
    case Activation::kRelu: return ad::relu(x);
    case Activation::kTanh: return ad::tanh(x);
    case Activation::kNone: break;
  }
  return x;
}

/// Row i of the result is the latent code of instance i.
inline ad::Var encode(const EncoderConfig& config, std::span<const LinearVars> layers,
                      const ad::Var& instances) {
  config.validate();
  if (layers.size() != config.layers()) throw DimensionError("encode: layer count mismatch");
  if (instances.shape().cols != config.input_dim()) {
    throw DimensionError("encode: instances have " + std::to_string(instances.shape().cols) +
                         " features, encoder expects " + std::to_string(config.input_dim()));
  }
  ad::Var h = instances;
  for (std::size_t l = 0; l < layers.size(); ++l) h = activate(linear(h, layers[l]), config.activations[l]);
  return h;
}

struct Pooled {
  ad::Var bag;       // 1 x L
  ad::Var weights;   // 1 x n, invalid for max/mean
};

inline ad::Var aggregate_max(const ad::Var& latents) {
  if (latents.shape().rows == 0) throw DimensionError("aggregate_max: empty bag");
  return ad::max_with_index(latents, ad::Axis::kRows).value;
}

inline ad::Var aggregate_mean(const ad::Var& latents) {
  if (latents.shape().rows == 0) throw DimensionError("aggregate_mean: empty bag");
  return ad::mean(latents, ad::Axis::kRows);
}

/// a = softmax_i(W tanh(V z_i)), bag = sum_i a_i z_i. W: 1 x h, V: h x L.
inline Pooled aggregate_attention(const ad::Var& latents, const ad::Var& w, const ad::Var& v) {
  const std::size_t n = latents.shape().rows;
  if (n == 0) throw DimensionError("aggregate_attention: empty bag");
  ad::Var hidden = ad::tanh(ad::matmul(latents, ad::transpose(v)));  // n x h
  ad::Var scores = ad::matmul(hidden, ad::transpose(w));             // n x 1
  ad::Var weights = ad::softmax(ad::reshape(scores, 1, n));
  return {ad::matmul(weights, latents), weights};
}

/// Floor under the variance of the instance scores in regressor-guided pooling.
inline constexpr double kRgpVarianceFloor = 1e-8;

/// Softmax of the standardized scores p (n x 1): population variance with a
/// small floor, so a single instance or identical scores give uniform weights.
inline ad::Var rgp_weights(const ad::Var& scores) {
  const std::size_t n = scores.shape().size();
  ad::Var centered = ad::sub(scores, ad::mean(scores));
  ad::Var var = ad::mean(ad::square(centered));
  ad::Var standardized = ad::div(centered, ad::sqrt(ad::add_scalar(var, kRgpVarianceFloor)));
  return ad::softmax(ad::reshape(standardized, 1, n));
}

/// Instance scores p_i = p_i^+ - p_i^- from the regressor (W: L x 2, B: 1 x 2).
/// Column 1 is the positive class, matching the bag logits.
inline ad::Var rgp_scores(const ad::Var& latents, const LinearVars& regressor) {
  ad::Var both = linear(latents, regressor);  // n x 2
  ad::Var contrast = latents.tape().constant(Matrix{{-1.0}, {1.0}});
  return ad::matmul(both, contrast);          // n x 1
}

inline Pooled aggregate_rgp(const ad::Var& latents, const LinearVars& regressor) {
  if (latents.shape().rows == 0) throw DimensionError("aggregate_rgp: empty bag");
  if (regressor.weight.shape().cols != 2) throw DimensionError("aggregate_rgp: regressor must have 2 outputs");
  ad::Var weights = rgp_weights(rgp_scores(latents, regressor));
  return {ad::matmul(weights, latents), weights};
}

/// Mahalanobis scores of every row of Z (n x L) as a 1 x n node. mu and the
/// precision are constants; the score stays differentiable in Z.
inline ad::Var mahalanobis_scores(const ad::Var& latents, const NegativeGaussian& g) {
  ad::Tape& tape = latents.tape();
  const std::size_t n = latents.shape().rows;
  if (latents.shape().cols != g.mean.size()) throw DimensionError("mahalanobis: latent dimension mismatch");
  ad::Var ones = tape.constant(Matrix(n, 1, 1.0));
  ad::Var centered = ad::sub(latents, ad::matmul(ones, tape.constant(g.mean)));
  ad::Var quad = ad::sum(ad::mul(ad::matmul(centered, tape.constant(g.precision)), centered), ad::Axis::kCols);
  // relu guards against tiny negative rounding; the floor keeps d'(0) finite.
  return ad::reshape(ad::sqrt_floored_grad(ad::relu(quad), 1e-12), 1, n);
}

/// w_i = W_D d_i + W_A a_i with d_i the Mahalanobis score and a_i the
/// attention weight; bag = sum_i w_i z_i.
inline Pooled aggregate_anomaly(const ad::Var& latents, const ad::Var& attn_w, const ad::Var& attn_v,
                                const NegativeGaussian* gaussian, const ad::Var& w_d,
                                const ad::Var& w_a) {
  if (gaussian == nullptr) throw std::logic_error("aggregate_anomaly: negative Gaussian not fitted");
  Pooled attn = aggregate_attention(latents, attn_w, attn_v);
  ad::Var d = mahalanobis_scores(latents, *gaussian);
  ad::Var weights = ad::add(ad::mul(w_d, d), ad::mul(w_a, attn.weights));
  return {ad::matmul(weights, latents), weights};
}

inline ad::Var classify(const ad::Var& bag, const LinearVars& head) { return linear(bag, head); }

// ---------------------------------------------------------------------------
// Model

struct BagOutput {
  ad::Var latents;          // n x L
  ad::Var bag;              // 1 x L
  ad::Var logits;           // 1 x classes
  std::vector<double> instance_weights;
  ad::Var instance_logits;  // n x classes, dual head only
};

/// Declaration-ordered parameter names:
///   encoder.<l>.weight / encoder.<l>.bias
///   attention.V / attention.W                 (attention, anomaly)
///   anomaly.W_D / anomaly.W_A                 (anomaly)
///   head.weight / head.bias                   (shared with the rgp regressor)
///   instance_head.weight / instance_head.bias (dual head)
class MilModel {
 public:
  MilModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    auto uniform = [&](std::size_t rows, std::size_t cols, std::size_t fan_in) {
      const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Matrix m(rows, cols);
      for (double& v : m.values()) v = dist(rng);
      return m;
    };
    const auto& widths = config_.encoder.widths;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const std::string prefix = "encoder." + std::to_string(l);
      params_.add(prefix + ".weight", uniform(widths[l], widths[l + 1], widths[l]));
      params_.add(prefix + ".bias", uniform(1, widths[l + 1], widths[l]));
    }
    const std::size_t latent = config_.encoder.latent_dim();
    const std::size_t classes = config_.num_classes;
    if (uses_attention()) {
      const std::size_t h = config_.attention_hidden;
      params_.add("attention.V", uniform(h, latent, latent));
      params_.add("attention.W", uniform(1, h, h));
    }
    if (config_.aggregator == AggregatorKind::kAnomaly) {
      // Starts out as plain attention pooling.
      params_.add("anomaly.W_D", Matrix::scalar(0.0));
      params_.add("anomaly.W_A", Matrix::scalar(1.0));
    }
    params_.add("head.weight", uniform(latent, classes, latent));
    params_.add("head.bias", uniform(1, classes, latent));
    if (config_.dual_head) {
      params_.add("instance_head.weight", uniform(latent, classes, latent));
      params_.add("instance_head.bias", uniform(1, classes, latent));
    }
  }

  /// For checkpoint loading: parameters are supplied by the caller.
  MilModel(ModelConfig config, ParameterStore params, std::optional<NegativeGaussian> gaussian)
      : config_(std::move(config)), params_(std::move(params)), gaussian_(std::move(gaussian)) {
    config_.validate();
    MilModel reference(config_, 0);
    if (reference.params_.size() != params_.size()) {
      throw FormatError("model: expected " + std::to_string(reference.params_.size()) +
                        " parameters, got " + std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& want = reference.params_[i];
      const auto& got = params_[i];
      if (want.name != got.name || want.value.shape() != got.value.shape()) {
        throw FormatError("model: parameter " + std::to_string(i) + " is " + got.name +
                          got.value.shape().str() + ", expected " + want.name + want.value.shape().str());
      }
    }
  }

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  const std::optional<NegativeGaussian>& gaussian() const { return gaussian_; }
  void set_gaussian(NegativeGaussian g) { gaussian_ = std::move(g); }

  bool uses_attention() const {
    return config_.aggregator == AggregatorKind::kAttention ||
           config_.aggregator == AggregatorKind::kAnomaly;
  }

  /// Forward pass with gradients flowing into the parameters.
  BagOutput forward(ad::Tape& tape, const Matrix& instances) {
    return run(tape, instances, [&](const std::string& name) { return tape.parameter(params_.at(name)); });
  }

  /// Forward pass with parameters recorded as constants.
  BagOutput infer(ad::Tape& tape, const Matrix& instances) const {
    return run(tape, instances, [&](const std::string& name) { return tape.constant(params_.at(name).value); });
  }

  /// Latent codes of the instances, no tape kept.
  Matrix embed(const Matrix& instances) const {
    ad::Tape tape;
    auto bind = [&](const std::string& name) { return tape.constant(params_.at(name).value); };
    return encode_with(tape, instances, bind).value();
  }

  /// Post-softmax class probabilities of one bag.
  std::vector<double> predict_proba(const Matrix& instances) const {
    ad::Tape tape;
    BagOutput out = infer(tape, instances);
    ad::Var p = ad::softmax(out.logits);
    auto v = p.value().values();
    return {v.begin(), v.end()};
  }

 private:
  template <typename Bind>
  ad::Var encode_with(ad::Tape& tape, const Matrix& instances, Bind&& bind) const {
    std::vector<LinearVars> layers;
    for (std::size_t l = 0; l < config_.encoder.layers(); ++l) {
      const std::string prefix = "encoder." + std::to_string(l);
      layers.push_back({bind(prefix + ".weight"), bind(prefix + ".bias")});
    }
    return encode(config_.encoder, layers, tape.constant(instances));
  }

  template <typename Bind>
  BagOutput run(ad::Tape& tape, const Matrix& instances, Bind&& bind) const {
    if (instances.rows() == 0) throw DimensionError("model: empty bag");
    BagOutput out;
    out.latents = encode_with(tape, instances, bind);
    const LinearVars head{bind("head.weight"), bind("head.bias")};
    Pooled pooled;
    switch (config_.aggregator) {
      case AggregatorKind::kMax: pooled.bag = aggregate_max(out.latents); break;
      case AggregatorKind::kMean: pooled.bag = aggregate_mean(out.latents); break;
      case AggregatorKind::kAttention:
        pooled = aggregate_attention(out.latents, bind("attention.W"), bind("attention.V"));
        break;
      case AggregatorKind::kRgp: pooled = aggregate_rgp(out.latents, head); break;
      case AggregatorKind::kAnomaly:
        pooled = aggregate_anomaly(out.latents, bind("attention.W"), bind("attention.V"),
                                   gaussian_ ? &*gaussian_ : nullptr, bind("anomaly.W_D"),
                                   bind("anomaly.W_A"));
        break;
    }
    out.bag = pooled.bag;
    if (pooled.weights.valid()) {
      auto w = pooled.weights.value().values();
      out.instance_weights.assign(w.begin(), w.end());
    }
    out.logits = classify(out.bag, head);
    if (config_.dual_head) {
      out.instance_logits = linear(out.latents, {bind("instance_head.weight"), bind("instance_head.bias")});
    }
    return out;
  }

  ModelConfig config_;
  ParameterStore params_;
  std::optional<NegativeGaussian> gaussian_;
};

// ---------------------------------------------------------------------------
// Objective

struct LossTerms {
  ad::Var total;
  double class_loss = 0.0;
  TopoLossBreakdown topo;
  BagOutput output;
};

/// L_class + lambda * L_topo, where L_class is the bag cross-entropy or, with
/// a dual head, (1 - gamma) L_bag + gamma L_instance (bag label repeated on
/// every instance). Pass `input` to reuse a cached input-space topology.
inline LossTerms total_loss(ad::Tape& tape, MilModel& model, const Matrix& instances,
                            std::size_t label, double lambda, double gamma,
                            const InputTopology* input = nullptr) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("total_loss: lambda must be >= 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("total_loss: gamma must lie in [0, 1]");
  LossTerms out;
  out.output = model.forward(tape, instances);
  ad::Var cls = ad::cross_entropy(out.output.logits, label);
  if (model.config().dual_head) {
    ad::Var inst = ad::cross_entropy(out.output.instance_logits, label);
    cls = ad::add(ad::scale(cls, 1.0 - gamma), ad::scale(inst, gamma));
  }
  out.class_loss = cls.item();
  out.total = cls;
  if (lambda > 0.0) {
    TopoLoss topo = input ? topo_loss(*input, out.output.latents) : topo_loss(instances, out.output.latents);
    out.topo = topo.breakdown;
    out.total = ad::add(cls, ad::scale(topo.loss, lambda));
  }
  return out;
}

}  // namespace topomil
