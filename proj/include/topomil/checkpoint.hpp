#pragma once

// Text checkpoint container. Layout (one item per line):
//
//   topomil-checkpoint 1
//   encoder_widths=100,64,2
//   encoder_activations=relu,relu
//   aggregator=rgp
//   attention_hidden=128
//   num_classes=2
//   dual_head=0
//   ridge=<hex64>
//   params <count>
//   param <name> <rows> <cols>
//   <rows lines of cols space-separated hex64 words>
//   ...
//   gaussian <0|1>
//   [mean 1 L / covariance L L / precision L L blocks, same encoding]
//   end
//
// hex64 is the IEEE-754 bit pattern of a double as 16 lowercase hex digits,
// so every value round-trips bit-exactly.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "topomil/errors.hpp"
#include "topomil/milcore.hpp"

namespace topomil {

namespace detail {

inline std::string to_hex64(double v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
  return buf;
}

inline double from_hex64(const std::string& s) {
  if (s.size() != 16) throw FormatError("checkpoint: bad value word '" + s + "'");
  std::uint64_t bits = 0;
  for (char c : s) {
    bits <<= 4;
    if (c >= '0' && c <= '9') bits |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') bits |= static_cast<std::uint64_t>(c - 'a' + 10);
    else throw FormatError("checkpoint: bad value word '" + s + "'");
  }
  return std::bit_cast<double>(bits);
}

inline void write_block(std::ostream& os, const Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) os << (c ? " " : "") << to_hex64(m(r, c));
    os << '\n';
  }
}

inline Matrix read_block(std::istream& is, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  std::string word;
  for (std::size_t k = 0; k < m.size(); ++k) {
    if (!(is >> word)) throw FormatError("checkpoint: truncated value block");
    m[k] = from_hex64(word);
  }
  return m;
}

inline std::string expect_kv(std::istream& is, const std::string& key) {
  std::string line;
  if (!(is >> line) || line.rfind(key + "=", 0) != 0) {
    throw FormatError("checkpoint: expected '" + key + "=' line");
  }
  return line.substr(key.size() + 1);
}

template <typename T, typename Parse>
std::vector<T> split_list(const std::string& s, Parse parse) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse(item));
  return out;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const MilModel& model) {
  const ModelConfig& c = model.config();
  os << "topomil-checkpoint 1\n";
  os << "encoder_widths=";
  for (std::size_t i = 0; i < c.encoder.widths.size(); ++i) os << (i ? "," : "") << c.encoder.widths[i];
  os << "\nencoder_activations=";
  for (std::size_t i = 0; i < c.encoder.activations.size(); ++i)
    os << (i ? "," : "") << to_string(c.encoder.activations[i]);
  os << "\naggregator=" << to_string(c.aggregator) << '\n';
  os << "attention_hidden=" << c.attention_hidden << '\n';
  os << "num_classes=" << c.num_classes << '\n';
  os << "dual_head=" << (c.dual_head ? 1 : 0) << '\n';
  os << "ridge=" << detail::to_hex64(c.ridge) << '\n';
  const ParameterStore& params = model.params();
  os << "params " << params.size() << '\n';
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    os << "param " << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << '\n';
    detail::write_block(os, p.value);
  }
  const auto& g = model.gaussian();
  os << "gaussian " << (g ? 1 : 0) << '\n';
  if (g) {
    os << "mean 1 " << g->mean.size() << '\n';
    detail::write_block(os, g->mean);
    os << "covariance " << g->covariance.rows() << ' ' << g->covariance.cols() << '\n';
    detail::write_block(os, g->covariance);
    os << "precision " << g->precision.rows() << ' ' << g->precision.cols() << '\n';
    detail::write_block(os, g->precision);
    os << "gaussian_ridge=" << detail::to_hex64(g->ridge) << '\n';
  }
  os << "end\n";
}

inline MilModel load_checkpoint(std::istream& is) {
  std::string magic, version;
  if (!(is >> magic >> version) || magic != "topomil-checkpoint") {
    throw FormatError("checkpoint: missing 'topomil-checkpoint' header");
  }
  if (version != "1") throw FormatError("checkpoint: unsupported version " + version);

  ModelConfig c;
  try {
    c.encoder.widths = detail::split_list<std::size_t>(
        detail::expect_kv(is, "encoder_widths"), [](const std::string& s) { return std::stoull(s); });
    c.encoder.activations = detail::split_list<Activation>(detail::expect_kv(is, "encoder_activations"),
                                                           [](const std::string& s) { return parse_activation(s); });
    c.aggregator = parse_aggregator(detail::expect_kv(is, "aggregator"));
    c.attention_hidden = std::stoull(detail::expect_kv(is, "attention_hidden"));
    c.num_classes = std::stoull(detail::expect_kv(is, "num_classes"));
    c.dual_head = detail::expect_kv(is, "dual_head") == "1";
    c.ridge = detail::from_hex64(detail::expect_kv(is, "ridge"));
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("checkpoint: bad config line: ") + e.what());
  }

  std::string tag;
  std::size_t count = 0;
  if (!(is >> tag >> count) || tag != "params") throw FormatError("checkpoint: expected 'params'");
  ParameterStore params;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    std::size_t rows = 0, cols = 0;
    if (!(is >> tag >> name >> rows >> cols) || tag != "param") {
      throw FormatError("checkpoint: expected 'param' record " + std::to_string(i));
    }
    params.add(name, detail::read_block(is, rows, cols));
  }

  std::optional<NegativeGaussian> gaussian;
  int has_gaussian = 0;
  if (!(is >> tag >> has_gaussian) || tag != "gaussian") throw FormatError("checkpoint: expected 'gaussian'");
  if (has_gaussian) {
    NegativeGaussian g;
    auto block = [&](const char* want) {
      std::size_t rows = 0, cols = 0;
      if (!(is >> tag >> rows >> cols) || tag != want) {
        throw FormatError(std::string("checkpoint: expected '") + want + "'");
      }
      return detail::read_block(is, rows, cols);
    };
    g.mean = block("mean");
    g.covariance = block("covariance");
    g.precision = block("precision");
    g.ridge = detail::from_hex64(detail::expect_kv(is, "gaussian_ridge"));
    gaussian = std::move(g);
  }
  if (!(is >> tag) || tag != "end") throw FormatError("checkpoint: missing 'end'");
  return MilModel(std::move(c), std::move(params), std::move(gaussian));
}

inline void save_checkpoint(const std::string& path, const MilModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  save_checkpoint(os, model);
  if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

inline MilModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  return load_checkpoint(is);
}

}  // namespace topomil
