#pragma once

// Reverse-mode differentiation over dense 2-D matrices.
//
// A Tape records every operation of one forward pass. Vars are cheap handles
// (tape pointer + node id); the recording order is a topological order, so
// backward() is a single reverse sweep. Parameters live outside the tape and
// receive their gradient when backward() finishes.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "topomil/errors.hpp"
#include "topomil/matrix.hpp"

namespace topomil::ad {

/// A named trainable array and its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }

  std::string name;
  Matrix value;
  Matrix grad;
};

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Value of a 1x1 node.
  double item() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never accumulates gradient.
  Var constant(Matrix m) { return push(std::move(m), false, nullptr, nullptr); }
  /// Leaf whose gradient is readable through Var::grad() after backward().
  Var variable(Matrix m) { return push(std::move(m), true, nullptr, nullptr); }
  /// Leaf bound to a Parameter; backward() adds into p.grad.
  Var parameter(Parameter& p) { return push(p.value, true, nullptr, &p); }

  /// Records an op node. Gradient is tracked iff any input tracks it.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.tape_ != this) throw std::logic_error("autodiff: operands recorded on different tapes");
      needs = needs || nodes_[v.id_].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
  }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse.
  void backward(const Var& root) {
    if (root.tape_ != this) throw std::logic_error("autodiff: root belongs to another tape");
    if (root.shape().size() != 1) {
      throw DimensionError("backward: root must be a scalar, got " + root.shape().str());
    }
    if (done_) throw std::logic_error("autodiff: backward() already ran on this tape");
    done_ = true;
    Node& r = nodes_[root.id_];
    if (!r.requires_grad) return;
    r.grad[0] = 1.0;
    for (std::size_t id = root.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward) n.backward(*this, id);
    }
    for (Node& n : nodes_) {
      if (n.param == nullptr) continue;
      auto dst = n.param->grad.values();
      auto src = n.grad.values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  Matrix& grad(std::size_t id) { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Matrix value, bool requires_grad, BackwardFn fn, Parameter* param) {
    Node n;
    n.grad = Matrix(value.rows(), value.cols());
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    n.param = param;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // deque: references stay valid while recording
  bool done_ = false;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline const Matrix& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }
inline double Var::item() const {
  if (shape().size() != 1) throw DimensionError("item: expected 1x1, got " + shape().str());
  return value()[0];
}

namespace detail {

inline bool tracks(const Tape& t, const Var& v) { return t.requires_grad(v.id()); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + av.shape().str() + " * " +
                         bv.shape().str());
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(multiply(av, bv), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& A = t.value(ia);
    const Matrix& B = t.value(ib);
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    if (t.requires_grad(ia)) {
      Matrix& ga = t.grad(ia);  // += g * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g(i, j) * B(p, j);
          ga(i, p) += acc;
        }
    }
    if (t.requires_grad(ib)) {
      Matrix& gb = t.grad(ib);  // += A^T * g
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A(i, p);
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb(p, j) += aip * g(i, j);
        }
    }
  });
}

inline Var transpose(const Var& x) {
  const std::size_t ix = x.id();
  return x.tape().record(x.value().transposed(), {x}, [ix](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(j, i) += g(i, j);
  });
}

inline Var reshape(const Var& x, std::size_t rows, std::size_t cols) {
  if (rows * cols != x.shape().size()) {
    throw DimensionError("reshape: cannot view " + x.shape().str() + " as " +
                         Shape{rows, cols}.str());
  }
  const std::size_t ix = x.id();
  auto vals = x.value().values();
  Matrix out(rows, cols, std::vector<double>(vals.begin(), vals.end()));
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
    auto g = t.grad(self).values();
    auto gx = t.grad(ix).values();
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class UnaryOp { kRelu, kTanh, kExp, kLog, kSqrt, kSquare, kNegate };
enum class BinaryOp { kAdd, kSub, kMul, kDiv };

inline const char* op_name(UnaryOp op) {
  switch (op) {
    case UnaryOp::kRelu: return "relu";
    case UnaryOp::kTanh: return "tanh";
    case UnaryOp::kExp: return "exp";
    case UnaryOp::kLog: return "log";
    case UnaryOp::kSqrt: return "sqrt";
    case UnaryOp::kSquare: return "square";
    case UnaryOp::kNegate: return "negate";
  }
  return "?";
}

inline Var unary(UnaryOp op, const Var& x) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t k = 0; k < xv.size(); ++k) {
    const double v = xv[k];
    double y = 0.0;
    switch (op) {
      case UnaryOp::kRelu: y = v > 0.0 ? v : 0.0; break;
      case UnaryOp::kTanh: y = std::tanh(v); break;
      case UnaryOp::kExp: y = std::exp(v); break;
      case UnaryOp::kLog:
        if (v < 0.0) throw DomainError("log of negative value " + std::to_string(v));
        y = std::log(v);
        break;
      case UnaryOp::kSqrt:
        if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
        y = std::sqrt(v);
        break;
      case UnaryOp::kSquare: y = v * v; break;
      case UnaryOp::kNegate: y = -v; break;
    }
    out[k] = y;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, op](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& xv = t.value(ix);
    const Matrix& y = t.value(self);
    Matrix& gx = t.grad(ix);
    for (std::size_t k = 0; k < g.size(); ++k) {
      double d = 0.0;
      switch (op) {
        case UnaryOp::kRelu: d = xv[k] > 0.0 ? 1.0 : 0.0; break;
        case UnaryOp::kTanh: d = 1.0 - y[k] * y[k]; break;
        case UnaryOp::kExp: d = y[k]; break;
        case UnaryOp::kLog: d = 1.0 / xv[k]; break;
        case UnaryOp::kSqrt: d = 0.5 / y[k]; break;
        case UnaryOp::kSquare: d = 2.0 * xv[k]; break;
        case UnaryOp::kNegate: d = -1.0; break;
      }
      gx[k] += g[k] * d;
    }
  });
}

/// Equal shapes, or one operand 1x1 broadcast against the other.
inline Var binary(BinaryOp op, const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const bool a_scalar = av.size() == 1 && bv.size() != 1;
  const bool b_scalar = bv.size() == 1 && av.size() != 1;
  if (!a_scalar && !b_scalar && av.shape() != bv.shape()) {
    throw DimensionError("elementwise: shapes differ, " + av.shape().str() + " vs " +
                         bv.shape().str());
  }
  const Shape shape = a_scalar ? bv.shape() : av.shape();
  Matrix out(shape.rows, shape.cols);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double x = av[a_scalar ? 0 : k];
    const double y = bv[b_scalar ? 0 : k];
    switch (op) {
      case BinaryOp::kAdd: out[k] = x + y; break;
      case BinaryOp::kSub: out[k] = x - y; break;
      case BinaryOp::kMul: out[k] = x * y; break;
      case BinaryOp::kDiv: out[k] = x / y; break;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b},
                         [ia, ib, op, a_scalar, b_scalar](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& A = t.value(ia);
    const Matrix& B = t.value(ib);
    const bool ta = t.requires_grad(ia), tb = t.requires_grad(ib);
    for (std::size_t k = 0; k < g.size(); ++k) {
      const std::size_t ka = a_scalar ? 0 : k, kb = b_scalar ? 0 : k;
      double da = 0.0, db = 0.0;
      switch (op) {
        case BinaryOp::kAdd: da = 1.0; db = 1.0; break;
        case BinaryOp::kSub: da = 1.0; db = -1.0; break;
        case BinaryOp::kMul: da = B[kb]; db = A[ka]; break;
        case BinaryOp::kDiv:
          da = 1.0 / B[kb];
          db = -A[ka] / (B[kb] * B[kb]);
          break;
      }
      if (ta) t.grad(ia)[ka] += g[k] * da;
      if (tb) t.grad(ib)[kb] += g[k] * db;
    }
  });
}

inline Var relu(const Var& x) { return unary(UnaryOp::kRelu, x); }
inline Var tanh(const Var& x) { return unary(UnaryOp::kTanh, x); }
inline Var exp(const Var& x) { return unary(UnaryOp::kExp, x); }
inline Var log(const Var& x) { return unary(UnaryOp::kLog, x); }
inline Var sqrt(const Var& x) { return unary(UnaryOp::kSqrt, x); }
inline Var square(const Var& x) { return unary(UnaryOp::kSquare, x); }
inline Var negate(const Var& x) { return unary(UnaryOp::kNegate, x); }
inline Var add(const Var& a, const Var& b) { return binary(BinaryOp::kAdd, a, b); }
inline Var sub(const Var& a, const Var& b) { return binary(BinaryOp::kSub, a, b); }
inline Var mul(const Var& a, const Var& b) { return binary(BinaryOp::kMul, a, b); }
inline Var div(const Var& a, const Var& b) { return binary(BinaryOp::kDiv, a, b); }

inline Var scale(const Var& x, double c) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t k = 0; k < xv.size(); ++k) out[k] = c * xv[k];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, c](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(ix);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += c * g[k];
  });
}

inline Var add_scalar(const Var& x, double c) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t k = 0; k < xv.size(); ++k) out[k] = xv[k] + c;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(ix);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
  });
}

/// sqrt(x) whose derivative is evaluated at x + eps, so coincident points
/// (x = 0) get a finite gradient while the forward value stays exact.
inline Var sqrt_floored_grad(const Var& x, double eps) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t k = 0; k < xv.size(); ++k) {
    if (xv[k] < 0.0) throw DomainError("sqrt of negative value " + std::to_string(xv[k]));
    out[k] = std::sqrt(xv[k]);
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, eps](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& xv = t.value(ix);
    Matrix& gx = t.grad(ix);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * 0.5 / std::sqrt(xv[k] + eps);
  });
}

// ---------------------------------------------------------------------------
// Reductions

/// kRows collapses the row dimension (result 1 x cols); kCols collapses the
/// column dimension (result rows x 1); kAll yields 1x1.
enum class Axis { kAll, kRows, kCols };

namespace detail {

inline Shape reduced_shape(const Shape& s, Axis axis) {
  switch (axis) {
    case Axis::kAll: return {1, 1};
    case Axis::kRows: return {1, s.cols};
    case Axis::kCols: return {s.rows, 1};
  }
  return {1, 1};
}

inline std::size_t reduced_index(Axis axis, std::size_t r, std::size_t c) {
  switch (axis) {
    case Axis::kAll: return 0;
    case Axis::kRows: return c;
    case Axis::kCols: return r;
  }
  return 0;
}

inline void require_nonempty(const Shape& s, Axis axis, const char* what) {
  const bool empty = axis == Axis::kAll  ? s.size() == 0
                     : axis == Axis::kRows ? s.rows == 0
                                           : s.cols == 0;
  if (empty) throw DimensionError(std::string(what) + ": empty reduction axis on " + s.str());
}

}  // namespace detail

inline Var sum(const Var& x, Axis axis = Axis::kAll) {
  const Shape in = x.shape();
  detail::require_nonempty(in, axis, "sum");
  const Shape os = detail::reduced_shape(in, axis);
  Matrix out(os.rows, os.cols);
  const Matrix& xv = x.value();
  for (std::size_t r = 0; r < in.rows; ++r)
    for (std::size_t c = 0; c < in.cols; ++c)
      out[detail::reduced_index(axis, r, c)] += xv(r, c);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, axis, in](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(ix);
    for (std::size_t r = 0; r < in.rows; ++r)
      for (std::size_t c = 0; c < in.cols; ++c)
        gx(r, c) += g[detail::reduced_index(axis, r, c)];
  });
}

inline Var mean(const Var& x, Axis axis = Axis::kAll) {
  const Shape in = x.shape();
  detail::require_nonempty(in, axis, "mean");
  const double count = axis == Axis::kAll    ? static_cast<double>(in.size())
                       : axis == Axis::kRows ? static_cast<double>(in.rows)
                                             : static_cast<double>(in.cols);
  return scale(sum(x, axis), 1.0 / count);
}

struct MaxResult {
  Var value;
  /// Flat (row-major) index into the input of each selected element.
  std::vector<std::size_t> index;
};

/// Maximum along an axis; ties go to the lowest index. Backward routes the
/// whole gradient to the selected element.
inline MaxResult max_with_index(const Var& x, Axis axis = Axis::kAll) {
  const Shape in = x.shape();
  detail::require_nonempty(in, axis, "max");
  const Shape os = detail::reduced_shape(in, axis);
  Matrix out(os.rows, os.cols, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> index(os.size(), 0);
  std::vector<bool> seen(os.size(), false);
  const Matrix& xv = x.value();
  for (std::size_t r = 0; r < in.rows; ++r)
    for (std::size_t c = 0; c < in.cols; ++c) {
      const std::size_t o = detail::reduced_index(axis, r, c);
      if (!seen[o] || xv(r, c) > out[o]) {
        out[o] = xv(r, c);
        index[o] = r * in.cols + c;
        seen[o] = true;
      }
    }
  const std::size_t ix = x.id();
  Var v = x.tape().record(std::move(out), {x}, [ix, index](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(ix);
    for (std::size_t o = 0; o < index.size(); ++o) gx[index[o]] += g[o];
  });
  return {v, std::move(index)};
}

// ---------------------------------------------------------------------------
// Probabilistic

/// Softmax over all entries of a row or column vector (max-shifted).
inline Var softmax(const Var& x) {
  const Shape s = x.shape();
  if (s.rows != 1 && s.cols != 1) throw DimensionError("softmax: expected a vector, got " + s.str());
  const Matrix& xv = x.value();
  Matrix out(s.rows, s.cols);
  if (xv.size() > 0) {
    double hi = xv[0];
    for (std::size_t k = 1; k < xv.size(); ++k) hi = std::max(hi, xv[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < xv.size(); ++k) z += (out[k] = std::exp(xv[k] - hi));
    for (std::size_t k = 0; k < xv.size(); ++k) out[k] /= z;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    double dot = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) dot += g[k] * y[k];
    Matrix& gx = t.grad(ix);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += y[k] * (g[k] - dot);
  });
}

/// Mean over rows of -log softmax(row)[target]. A 1 x c input is the plain
/// single-example cross-entropy.
inline Var cross_entropy(const Var& logits, std::size_t target) {
  const Matrix& lv = logits.value();
  const std::size_t n = lv.rows(), c = lv.cols();
  if (n == 0 || c == 0) throw DimensionError("cross_entropy: empty logits " + lv.shape().str());
  if (target >= c) {
    throw std::out_of_range("cross_entropy: class " + std::to_string(target) + " outside [0, " +
                            std::to_string(c) + ")");
  }
  Matrix prob(n, c);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double hi = lv(r, 0);
    for (std::size_t k = 1; k < c; ++k) hi = std::max(hi, lv(r, k));
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += (prob(r, k) = std::exp(lv(r, k) - hi));
    for (std::size_t k = 0; k < c; ++k) prob(r, k) /= z;
    loss += (hi + std::log(z)) - lv(r, target);
  }
  loss /= static_cast<double>(n);
  const std::size_t il = logits.id();
  return logits.tape().record(Matrix::scalar(loss), {logits},
                              [il, target, prob = std::move(prob)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / static_cast<double>(prob.rows());
    Matrix& gl = t.grad(il);
    for (std::size_t r = 0; r < prob.rows(); ++r)
      for (std::size_t k = 0; k < prob.cols(); ++k)
        gl(r, k) += g * (prob(r, k) - (k == target ? 1.0 : 0.0));
  });
}

// ---------------------------------------------------------------------------
// Geometry

/// Squared Euclidean distances between the rows of an n x d matrix.
inline Var pairwise_sq_dist(const Var& points) {
  const Matrix& p = points.value();
  const std::size_t n = p.rows(), d = p.cols();
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = p(i, k) - p(j, k);
        acc += diff * diff;
      }
      out(i, j) = acc;
      out(j, i) = acc;
    }
  const std::size_t ip = points.id();
  return points.tape().record(std::move(out), {points}, [ip](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& p = t.value(ip);
    Matrix& gp = t.grad(ip);
    const std::size_t n = p.rows(), d = p.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double w = 2.0 * (g(i, j) + g(j, i));
        if (w == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = w * (p(i, k) - p(j, k));
          gp(i, k) += diff;
          gp(j, k) -= diff;
        }
      }
  });
}

/// Selected entries of a matrix as a 1 x k vector.
inline Var gather_entries(const Var& m, std::span<const IndexPair> pairs) {
  const Matrix& mv = m.value();
  Matrix out(1, pairs.size());
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [i, j] = pairs[k];
    if (i >= mv.rows() || j >= mv.cols()) {
      throw std::out_of_range("gather_entries: (" + std::to_string(i) + ", " + std::to_string(j) +
                              ") outside " + mv.shape().str());
    }
    out[k] = mv(i, j);
  }
  const std::size_t im = m.id();
  std::vector<IndexPair> idx(pairs.begin(), pairs.end());
  return m.tape().record(std::move(out), {m}, [im, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& gm = t.grad(im);
    for (std::size_t k = 0; k < idx.size(); ++k) gm(idx[k].i, idx[k].j) += g[k];
  });
}

}  // namespace topomil::ad
