#pragma once

// Bags, synthetic bag generators and the on-disk formats they travel in:
// IDX image/label files, bag CSV and the key=value manifest.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "topomil/errors.hpp"
#include "topomil/matrix.hpp"

namespace topomil {

struct Bag {
  std::string id;
  Matrix instances;  // n x d
  std::size_t label = 0;
  std::string group;
  /// Per-instance ground truth when the generator knows it (1 = positive).
  std::vector<int> instance_labels;
};

/// Instances with integer class labels, e.g. a digit dataset.
struct LabeledPool {
  Matrix instances;
  std::vector<int> labels;
};

struct BagDatasetSpec {
  std::size_t n_bags = 10;
  double size_mean = 10.0;
  double size_std = 2.0;
  double positive_cap = 0.20;
  int positive_label = 9;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_bags == 0) throw ConfigError("n_bags must be >= 1");
    if (!(positive_cap > 0.0)) {
      throw ConfigError("positive_cap must be > 0: a positive bag needs at least one positive instance");
    }
    if (positive_cap > 1.0) throw ConfigError("positive_cap must be <= 1 (it is a fraction of the bag)");
    if (!(size_mean > 0.0) || !(size_std >= 0.0)) throw ConfigError("bag size mean must be > 0 and std >= 0");
  }
};

struct ToySpec {
  std::size_t n_bags = 100;
  double size_mean = 10.0;
  double size_std = 2.0;
  std::size_t dim = 100;
  double positive_cap = 0.20;
  std::uint64_t seed = 0;
};

/// Most positives a positive bag of size n may hold.
inline std::size_t max_positives(std::size_t n, double cap) {
  const auto k = static_cast<std::size_t>(std::ceil(cap * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

namespace detail {

/// k distinct integers from [0, n), Floyd's algorithm, returned in draw order.
inline std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::set<std::size_t> chosen;
  std::vector<std::size_t> order;
  for (std::size_t j = n - k; j < n; ++j) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
    const std::size_t pick = chosen.count(t) ? j : t;
    chosen.insert(pick);
    order.push_back(pick);
  }
  return order;
}

inline std::size_t draw_bag_size(double mean, double std, std::mt19937_64& rng) {
  const double raw = std == 0.0 ? mean : std::normal_distribution<double>(mean, std)(rng);
  return static_cast<std::size_t>(std::max<long>(2, std::lround(raw)));
}

/// Balanced labels: floor(n/2) positives, order shuffled.
inline std::vector<std::size_t> balanced_labels(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> labels(n, 0);
  for (std::size_t b = 0; b < n / 2; ++b) labels[b] = 1;
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

inline std::string bag_name(std::size_t b) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "bag%05zu", b);
  return buf;
}

}  // namespace detail

/// Toy problem: negatives ~ N(0, I_dim); positives uniform on the unit sphere
/// around the origin, which lies inside the negative cloud.
inline std::vector<Bag> gen_toy(const ToySpec& spec) {
  if (spec.dim < 2) throw ConfigError("toy dim must be >= 2");
  BagDatasetSpec check{spec.n_bags, spec.size_mean, spec.size_std, spec.positive_cap, 1, spec.seed};
  check.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto labels = detail::balanced_labels(spec.n_bags, rng);
  std::vector<Bag> bags;
  for (std::size_t b = 0; b < spec.n_bags; ++b) {
    const std::size_t n = detail::draw_bag_size(spec.size_mean, spec.size_std, rng);
    std::size_t positives = 0;
    if (labels[b] == 1) {
      positives = std::uniform_int_distribution<std::size_t>(1, max_positives(n, spec.positive_cap))(rng);
    }
    std::vector<int> kinds(n, 0);
    std::fill(kinds.begin(), kinds.begin() + static_cast<long>(positives), 1);
    std::shuffle(kinds.begin(), kinds.end(), rng);
    Bag bag{detail::bag_name(b), Matrix(n, spec.dim), labels[b], "", kinds};
    for (std::size_t i = 0; i < n; ++i) {
      auto row = bag.instances.row_view(i);
      double norm2 = 0.0;
      for (double& v : row) {
        v = normal(rng);
        norm2 += v * v;
      }
      if (kinds[i] == 1) {
        const double norm = std::sqrt(norm2);
        for (double& v : row) v /= norm;
      }
    }
    bags.push_back(std::move(bag));
  }
  return bags;
}

/// Bags drawn from a labeled pool. Within a bag instances are distinct; across
/// bags they may repeat. Positive bags hold between 1 and ceil(cap * n)
/// instances whose pool label equals `positive_label`; negative bags hold none.
inline std::vector<Bag> build_bags(const LabeledPool& pool, const BagDatasetSpec& spec) {
  spec.validate();
  if (pool.labels.size() != pool.instances.rows()) throw DimensionError("build_bags: pool labels/instances differ");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < pool.labels.size(); ++i)
    (pool.labels[i] == spec.positive_label ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) {
    throw ConfigError("build_bags: pool must contain label " + std::to_string(spec.positive_label) +
                      " and at least one other label");
  }
  std::mt19937_64 rng(spec.seed);
  const auto labels = detail::balanced_labels(spec.n_bags, rng);
  std::vector<Bag> bags;
  for (std::size_t b = 0; b < spec.n_bags; ++b) {
    const std::size_t n = detail::draw_bag_size(spec.size_mean, spec.size_std, rng);
    std::size_t k = 0;
    if (labels[b] == 1) k = std::uniform_int_distribution<std::size_t>(1, max_positives(n, spec.positive_cap))(rng);
    if (k > pos.size() || n - k > neg.size()) {
      throw std::runtime_error("build_bags: pool exhausted for bag " + std::to_string(b) + " of size " +
                               std::to_string(n));
    }
    std::vector<std::size_t> members;
    std::vector<int> kinds;
    for (std::size_t idx : detail::sample_distinct(pos.size(), k, rng)) {
      members.push_back(pos[idx]);
      kinds.push_back(1);
    }
    for (std::size_t idx : detail::sample_distinct(neg.size(), n - k, rng)) {
      members.push_back(neg[idx]);
      kinds.push_back(0);
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> rows(n);
    std::vector<int> inst(n);
    for (std::size_t i = 0; i < n; ++i) {
      rows[i] = members[order[i]];
      inst[i] = kinds[order[i]];
    }
    bags.push_back({detail::bag_name(b), pool.instances.select_rows(rows), labels[b], "", std::move(inst)});
  }
  return bags;
}

struct GaussianPoolSpec {
  std::size_t classes = 10;
  std::size_t per_class = 200;
  std::size_t dim = 64;
  double center_scale = 1.0;  // std of the class centers
  double noise = 1.0;         // within-class std
  std::uint64_t seed = 0;
};

/// Feature-vector stand-in for a digit-style pool: one isotropic Gaussian
/// cluster per class, labels 0 .. classes-1.
inline LabeledPool gen_gaussian_pool(const GaussianPoolSpec& spec) {
  if (spec.classes < 2 || spec.per_class == 0 || spec.dim == 0) {
    throw ConfigError("gaussian pool needs >= 2 classes, per_class >= 1 and dim >= 1");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix centers(spec.classes, spec.dim);
  for (double& v : centers.values()) v = spec.center_scale * normal(rng);
  LabeledPool pool{Matrix(spec.classes * spec.per_class, spec.dim), {}};
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t k = 0; k < spec.per_class; ++k) {
      const std::size_t r = c * spec.per_class + k;
      for (std::size_t j = 0; j < spec.dim; ++j) pool.instances(r, j) = centers(c, j) + spec.noise * normal(rng);
      pool.labels.push_back(static_cast<int>(c));
    }
  return pool;
}

// ---------------------------------------------------------------------------
// IDX

class IdxError : public FormatError {
 public:
  enum class Kind { kIo, kBadMagic, kTruncated, kCountMismatch };
  IdxError(Kind kind, const std::string& what) : FormatError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IdxError(IdxError::Kind::kIo, "cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t at, const std::string& path) {
  if (buf.size() < at + 4) throw IdxError(IdxError::Kind::kTruncated, path + ": truncated header");
  return (std::uint32_t{buf[at]} << 24) | (std::uint32_t{buf[at + 1]} << 16) | (std::uint32_t{buf[at + 2]} << 8) |
         std::uint32_t{buf[at + 3]};
}

inline void write_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  os.write(b, 4);
}

}  // namespace detail

/// Images (magic 0x803, count, rows, cols, u8 pixels) and labels (magic 0x801,
/// count, u8) into a pool of flattened rows*cols vectors scaled to [0, 1].
inline LabeledPool load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (detail::read_be32(img, 0, images_path) != kIdxImagesMagic) {
    throw IdxError(IdxError::Kind::kBadMagic, images_path + ": not an IDX image file (magic != 0x00000803)");
  }
  if (detail::read_be32(lab, 0, labels_path) != kIdxLabelsMagic) {
    throw IdxError(IdxError::Kind::kBadMagic, labels_path + ": not an IDX label file (magic != 0x00000801)");
  }
  const std::size_t count = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t label_count = detail::read_be32(lab, 4, labels_path);
  if (count != label_count) {
    throw IdxError(IdxError::Kind::kCountMismatch, "IDX count mismatch: " + std::to_string(count) + " images vs " +
                                                       std::to_string(label_count) + " labels");
  }
  const std::size_t dim = rows * cols;
  if (img.size() < 16 + count * dim) throw IdxError(IdxError::Kind::kTruncated, images_path + ": truncated pixels");
  if (lab.size() < 8 + count) throw IdxError(IdxError::Kind::kTruncated, labels_path + ": truncated labels");
  LabeledPool pool{Matrix(count, dim), std::vector<int>(count)};
  for (std::size_t i = 0; i < count * dim; ++i) pool.instances[i] = img[16 + i] / 255.0;
  for (std::size_t i = 0; i < count; ++i) pool.labels[i] = lab[8 + i];
  return pool;
}

inline void write_idx_images(const std::string& path, std::size_t rows, std::size_t cols,
                             const std::vector<std::vector<unsigned char>>& images) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IdxError(IdxError::Kind::kIo, "cannot write " + path);
  detail::write_be32(os, kIdxImagesMagic);
  detail::write_be32(os, static_cast<std::uint32_t>(images.size()));
  detail::write_be32(os, static_cast<std::uint32_t>(rows));
  detail::write_be32(os, static_cast<std::uint32_t>(cols));
  for (const auto& im : images) {
    if (im.size() != rows * cols) throw DimensionError("write_idx_images: image size mismatch");
    os.write(reinterpret_cast<const char*>(im.data()), static_cast<std::streamsize>(im.size()));
  }
}

inline void write_idx_labels(const std::string& path, const std::vector<unsigned char>& labels) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IdxError(IdxError::Kind::kIo, "cannot write " + path);
  detail::write_be32(os, kIdxLabelsMagic);
  detail::write_be32(os, static_cast<std::uint32_t>(labels.size()));
  os.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

// ---------------------------------------------------------------------------
// Bag CSV: header `bag_id,label[,group],f1,...,fd`, one instance per row.

class BagCsvError : public FormatError {
 public:
  enum class Kind { kIo, kBadHeader, kRaggedRow, kNonNumeric, kInconsistentLabel };
  BagCsvError(Kind kind, const std::string& what) : FormatError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline std::vector<Bag> read_bag_csv(std::istream& is, const std::string& source = "<csv>") {
  using K = BagCsvError::Kind;
  auto fields = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  std::string line;
  if (!std::getline(is, line)) throw BagCsvError(K::kBadHeader, source + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = fields(line);
  if (header.size() < 3 || header[0] != "bag_id" || header[1] != "label") {
    throw BagCsvError(K::kBadHeader, source + ": header must start with bag_id,label");
  }
  const bool has_group = header[2] == "group";
  const std::size_t first_feature = has_group ? 3 : 2;
  const std::size_t dim = header.size() - first_feature;
  if (dim == 0) throw BagCsvError(K::kBadHeader, source + ": no feature columns");

  std::vector<Bag> bags;
  std::unordered_map<std::string, std::size_t> where;
  std::vector<std::vector<double>> rows_of;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = fields(line);
    const std::string at = source + ":" + std::to_string(lineno);
    if (f.size() != header.size()) {
      throw BagCsvError(K::kRaggedRow, at + ": " + std::to_string(f.size()) + " fields, header has " +
                                           std::to_string(header.size()));
    }
    char* end = nullptr;
    const long label = std::strtol(f[1].c_str(), &end, 10);
    if (f[1].empty() || *end != '\0' || label < 0) throw BagCsvError(K::kNonNumeric, at + ": bad label '" + f[1] + "'");
    auto [it, fresh] = where.emplace(f[0], bags.size());
    if (fresh) {
      bags.push_back({f[0], Matrix(), static_cast<std::size_t>(label), has_group ? f[2] : "", {}});
      rows_of.emplace_back();
    } else if (bags[it->second].label != static_cast<std::size_t>(label)) {
      throw BagCsvError(K::kInconsistentLabel, at + ": bag '" + f[0] + "' has conflicting labels");
    }
    auto& vals = rows_of[it->second];
    for (std::size_t k = first_feature; k < f.size(); ++k) {
      const double v = std::strtod(f[k].c_str(), &end);
      if (f[k].empty() || *end != '\0') throw BagCsvError(K::kNonNumeric, at + ": non-numeric feature '" + f[k] + "'");
      vals.push_back(v);
    }
  }
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const std::size_t n = rows_of[b].size() / dim;
    bags[b].instances = Matrix(n, dim, std::move(rows_of[b]));
  }
  return bags;
}

inline std::vector<Bag> load_bag_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw BagCsvError(BagCsvError::Kind::kIo, "cannot open " + path);
  return read_bag_csv(is, path);
}

/// Values use %.17g so they parse back to the same doubles.
inline void write_bag_csv(std::ostream& os, const std::vector<Bag>& bags) {
  if (bags.empty()) throw std::invalid_argument("write_bag_csv: no bags");
  const std::size_t dim = bags.front().instances.cols();
  const bool has_group = std::any_of(bags.begin(), bags.end(), [](const Bag& b) { return !b.group.empty(); });
  os << "bag_id,label";
  if (has_group) os << ",group";
  for (std::size_t k = 1; k <= dim; ++k) os << ",f" << k;
  os << '\n';
  char buf[40];
  for (const Bag& b : bags) {
    if (b.instances.cols() != dim) throw DimensionError("write_bag_csv: bags differ in dimension");
    for (std::size_t i = 0; i < b.instances.rows(); ++i) {
      os << b.id << ',' << b.label;
      if (has_group) os << ',' << b.group;
      for (double v : b.instances.row_view(i)) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << ',' << buf;
      }
      os << '\n';
    }
  }
}

inline void save_bag_csv(const std::string& path, const std::vector<Bag>& bags) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw BagCsvError(BagCsvError::Kind::kIo, "cannot write " + path);
  write_bag_csv(os, bags);
  if (!os) throw BagCsvError(BagCsvError::Kind::kIo, "failed writing " + path);
}

}  // namespace topomil
