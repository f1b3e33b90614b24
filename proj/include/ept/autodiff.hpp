#pragma once

// Define-by-run reverse-mode differentiation over dense tensors.
//
// Every operation evaluates eagerly and appends a node to its Tape. grad()
// expresses the adjoints themselves as new nodes on the same tape, so a
// gradient can be fed back into another grad() call. That is how parameter
// gradients of input-gradient penalties are obtained.

#include <cmath>
#include <cstdint>
#include <deque>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ept/tensor.hpp"

namespace ept::ad {

class Error : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  AddScalar,
  MatMul,
  MatMulNT,
  MatMulTN,
  AddRow,
  MulCol,
  SumAll,
  SumRows,
  SumCols,
  BroadcastScalar,
  BroadcastRows,
  BroadcastCols,
  Reshape,
  Relu,
  Exp,
  Log,
  Reciprocal,
  Sigmoid,
  Softplus,
  Square,
  Heaviside,
};

const char* op_name(Op op) noexcept;

struct Node {
  Op op = Op::Constant;
  std::uint8_t arity = 0;
  std::size_t parents[2] = {0, 0};
  double param = 0.0;  // Scale / AddScalar constant
  bool trainable = false;
  Tensor value;
};

class Tape;

class Var {
public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

  friend bool operator==(const Var& a, const Var& b) noexcept {
    return a.tape_ == b.tape_ && a.id_ == b.id_;
  }

private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) noexcept : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
public:
  Tape() { tune_allocator(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Inputs must be finite; trainable leaves are what backward() reports on.
  Var leaf(Tensor value, bool trainable = true) {
    require_finite(value, "leaf input");
    Node n;
    n.op = Op::Leaf;
    n.trainable = trainable;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var constant(Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var constant(double v) { return constant(Tensor::scalar(v)); }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Node& node(Var v) const {
    check_owned(v);
    return nodes_[v.id()];
  }
  const Tensor& value(Var v) const { return node(v).value; }
  std::size_t size() const noexcept { return nodes_.size(); }

  std::vector<Var> trainable_leaves() {
    std::vector<Var> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == Op::Leaf && nodes_[i].trainable) out.push_back(Var(this, i));
    return out;
  }

  Var record(Op op, std::initializer_list<Var> parents, Tensor value, double param = 0.0) {
    Node n;
    n.op = op;
    n.param = param;
    n.arity = static_cast<std::uint8_t>(parents.size());
    std::size_t k = 0;
    for (const Var& p : parents) {
      check_owned(p);
      n.parents[k++] = p.id();
    }
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var handle(std::size_t id) {
    if (id >= nodes_.size()) throw Error("node id out of range");
    return Var(this, id);
  }

  void check_owned(Var v) const {
    if (!v.valid()) throw Error("use of an unbound variable");
    if (v.tape() != this || v.id() >= nodes_.size()) throw Error("variable belongs to another tape");
  }

private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  // deque keeps node references stable while grad() appends.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw Error("use of an unbound variable");
  return tape_->value(*this);
}

inline const char* op_name(Op op) noexcept {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::MatMul: return "matmul";
    case Op::MatMulNT: return "matmul_nt";
    case Op::MatMulTN: return "matmul_tn";
    case Op::AddRow: return "add_row";
    case Op::MulCol: return "mul_col";
    case Op::SumAll: return "sum";
    case Op::SumRows: return "sum_rows";
    case Op::SumCols: return "sum_cols";
    case Op::BroadcastScalar: return "broadcast_scalar";
    case Op::BroadcastRows: return "broadcast_rows";
    case Op::BroadcastCols: return "broadcast_cols";
    case Op::Reshape: return "reshape";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Reciprocal: return "reciprocal";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::Square: return "square";
    case Op::Heaviside: return "heaviside";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Operations

namespace detail {

inline Tape& tape_of(const Var& a) {
  if (!a.valid()) throw Error("use of an unbound variable");
  return *a.tape();
}

inline Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  t.check_owned(b);
  return t;
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* x = a.data();
  double* y = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(x[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  const double* x = a.data();
  const double* z = b.data();
  double* y = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(x[i], z[i]);
  return out;
}

inline double sigmoid(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) noexcept {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  return t.record(Op::Add, {a, b},
                  detail::zip(a.value(), b.value(), "add", [](double x, double y) { return x + y; }));
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  return t.record(Op::Sub, {a, b},
                  detail::zip(a.value(), b.value(), "sub", [](double x, double y) { return x - y; }));
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  return t.record(Op::Mul, {a, b},
                  detail::zip(a.value(), b.value(), "mul", [](double x, double y) { return x * y; }));
}

inline Var neg(Var a) {
  return detail::tape_of(a).record(Op::Neg, {a}, detail::map(a.value(), [](double x) { return -x; }));
}

inline Var scale(Var a, double c) {
  return detail::tape_of(a).record(Op::Scale, {a},
                                   detail::map(a.value(), [c](double x) { return c * x; }), c);
}

inline Var add_scalar(Var a, double c) {
  return detail::tape_of(a).record(Op::AddScalar, {a},
                                   detail::map(a.value(), [c](double x) { return x + c; }), c);
}

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  return t.record(Op::MatMul, {a, b}, ept::matmul(a.value(), b.value()));
}

inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  return t.record(Op::MatMulNT, {a, b}, ept::matmul_nt(a.value(), b.value()));
}

inline Var matmul_tn(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  return t.record(Op::MatMulTN, {a, b}, ept::matmul_tn(a.value(), b.value()));
}

// A (r x c) + b broadcast over rows, b of shape (c).
inline Var add_row(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& v = b.value();
  require_matrix(x, "add_row");
  if (v.rank() != 1 || v.size() != x.cols()) {
    throw ShapeError("add_row: bias shape " + to_string(v.shape()) + " for matrix " +
                     to_string(x.shape()));
  }
  Tensor out(x.shape());
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = x(i, j) + v[j];
  return t.record(Op::AddRow, {a, b}, std::move(out));
}

// A (r x c) with row i scaled by s[i], s of shape (r).
inline Var mul_col(Var a, Var s) {
  Tape& t = detail::tape_of(a, s);
  const Tensor& x = a.value();
  const Tensor& v = s.value();
  require_matrix(x, "mul_col");
  if (v.rank() != 1 || v.size() != x.rows()) {
    throw ShapeError("mul_col: scale shape " + to_string(v.shape()) + " for matrix " +
                     to_string(x.shape()));
  }
  Tensor out(x.shape());
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = x(i, j) * v[i];
  return t.record(Op::MulCol, {a, s}, std::move(out));
}

inline Var sum(Var a) {
  const Tensor& x = a.value();
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return detail::tape_of(a).record(Op::SumAll, {a}, Tensor::scalar(acc));
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

// (r x c) -> (c)
inline Var sum_rows(Var a) {
  const Tensor& x = a.value();
  require_matrix(x, "sum_rows");
  Tensor out(Shape{x.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
  return detail::tape_of(a).record(Op::SumRows, {a}, std::move(out));
}

// (r x c) -> (r)
inline Var sum_cols(Var a) {
  const Tensor& x = a.value();
  require_matrix(x, "sum_cols");
  Tensor out(Shape{x.rows()});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) acc += x(i, j);
    out[i] = acc;
  }
  return detail::tape_of(a).record(Op::SumCols, {a}, std::move(out));
}

inline Var broadcast_scalar(Var a, Shape shape) {
  const Tensor& x = a.value();
  if (x.size() != 1) throw ShapeError("broadcast_scalar: source is not a scalar");
  return detail::tape_of(a).record(Op::BroadcastScalar, {a}, Tensor(std::move(shape), x[0]));
}

// (c) -> (rows x c)
inline Var broadcast_rows(Var a, std::size_t rows) {
  const Tensor& x = a.value();
  if (x.rank() != 1) throw ShapeError("broadcast_rows: source must be rank 1");
  Tensor out(Shape{rows, x.size()});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < x.size(); ++j) out(i, j) = x[j];
  return detail::tape_of(a).record(Op::BroadcastRows, {a}, std::move(out));
}

// (r) -> (r x cols)
inline Var broadcast_cols(Var a, std::size_t cols) {
  const Tensor& x = a.value();
  if (x.rank() != 1) throw ShapeError("broadcast_cols: source must be rank 1");
  Tensor out(Shape{x.size(), cols});
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = x[i];
  return detail::tape_of(a).record(Op::BroadcastCols, {a}, std::move(out));
}

inline Var reshape(Var a, Shape shape) {
  return detail::tape_of(a).record(Op::Reshape, {a}, a.value().reshaped(std::move(shape)));
}

inline Var relu(Var a) {
  return detail::tape_of(a).record(Op::Relu, {a},
                                   detail::map(a.value(), [](double x) { return x > 0 ? x : 0.0; }));
}

inline Var exp(Var a) {
  return detail::tape_of(a).record(Op::Exp, {a},
                                   detail::map(a.value(), [](double x) { return std::exp(x); }));
}

inline Var log(Var a) {
  return detail::tape_of(a).record(Op::Log, {a},
                                   detail::map(a.value(), [](double x) { return std::log(x); }));
}

inline Var reciprocal(Var a) {
  return detail::tape_of(a).record(Op::Reciprocal, {a},
                                   detail::map(a.value(), [](double x) { return 1.0 / x; }));
}

inline Var sigmoid(Var a) {
  return detail::tape_of(a).record(Op::Sigmoid, {a}, detail::map(a.value(), detail::sigmoid));
}

inline Var softplus(Var a) {
  return detail::tape_of(a).record(Op::Softplus, {a}, detail::map(a.value(), detail::softplus));
}

inline Var square(Var a) {
  return detail::tape_of(a).record(Op::Square, {a},
                                   detail::map(a.value(), [](double x) { return x * x; }));
}

// Unit step. Evaluable, but refuses to be differentiated through.
inline Var heaviside(Var a) {
  return detail::tape_of(a).record(Op::Heaviside, {a},
                                   detail::map(a.value(), [](double x) { return x > 0 ? 1.0 : 0.0; }));
}

// Per-row squared Euclidean norm: (r x c) -> (r).
inline Var row_sqnorm(Var a) { return sum_cols(square(a)); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator-(Var a, double c) { return add_scalar(a, -c); }

// ---------------------------------------------------------------------------
// Differentiation

// Gradients of `root` (contracted with `seed`, default all ones) with respect
// to each variable in `wrt`, as differentiable graph expressions. Variables
// that `root` does not depend on get a zero constant.
inline std::vector<Var> grad(Var root, std::span<const Var> wrt,
                             std::optional<Tensor> seed = std::nullopt) {
  Tape& tape = detail::tape_of(root);
  for (const Var& w : wrt) tape.check_owned(w);
  const std::size_t last = root.id();

  Tensor seed_value = seed ? std::move(*seed) : Tensor(root.shape(), 1.0);
  require_same_shape(seed_value, root.value(), "grad seed");

  // Only nodes downstream of some wrt variable carry adjoints.
  std::vector<char> depends(last + 1, 0);
  for (const Var& w : wrt)
    if (w.id() <= last) depends[w.id()] = 1;
  for (std::size_t i = 0; i <= last; ++i) {
    if (depends[i]) continue;
    const Node& n = tape.node(i);
    for (std::uint8_t k = 0; k < n.arity; ++k)
      if (depends[n.parents[k]]) depends[i] = 1;
  }

  std::vector<Var> adjoint(last + 1);
  if (depends[last]) adjoint[last] = tape.constant(std::move(seed_value));

  auto accumulate = [&](std::size_t id, Var g) {
    if (!depends[id]) return;
    adjoint[id] = adjoint[id].valid() ? add(adjoint[id], g) : g;
  };

  for (std::size_t i = last + 1; i-- > 0;) {
    if (!adjoint[i].valid()) continue;
    const Node& n = tape.node(i);  // stable: nodes live in a deque
    const Var g = adjoint[i];
    const Var y = tape.handle(i);
    const Var a = n.arity > 0 ? tape.handle(n.parents[0]) : Var();
    const Var b = n.arity > 1 ? tape.handle(n.parents[1]) : Var();
    const bool da = n.arity > 0 && depends[a.id()];
    const bool db = n.arity > 1 && depends[b.id()];

    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Add:
        if (da) accumulate(a.id(), g);
        if (db) accumulate(b.id(), g);
        break;
      case Op::Sub:
        if (da) accumulate(a.id(), g);
        if (db) accumulate(b.id(), neg(g));
        break;
      case Op::Mul:
        if (da) accumulate(a.id(), mul(g, b));
        if (db) accumulate(b.id(), mul(g, a));
        break;
      case Op::Neg:
        accumulate(a.id(), neg(g));
        break;
      case Op::Scale:
        accumulate(a.id(), scale(g, n.param));
        break;
      case Op::AddScalar:
        accumulate(a.id(), g);
        break;
      case Op::MatMul:
        if (da) accumulate(a.id(), matmul_nt(g, b));
        if (db) accumulate(b.id(), matmul_tn(a, g));
        break;
      case Op::MatMulNT:
        if (da) accumulate(a.id(), matmul(g, b));
        if (db) accumulate(b.id(), matmul_tn(g, a));
        break;
      case Op::MatMulTN:
        if (da) accumulate(a.id(), matmul_nt(b, g));
        if (db) accumulate(b.id(), matmul(a, g));
        break;
      case Op::AddRow:
        if (da) accumulate(a.id(), g);
        if (db) accumulate(b.id(), sum_rows(g));
        break;
      case Op::MulCol:
        if (da) accumulate(a.id(), mul_col(g, b));
        if (db) accumulate(b.id(), sum_cols(mul(g, a)));
        break;
      case Op::SumAll:
        accumulate(a.id(), broadcast_scalar(g, a.shape()));
        break;
      case Op::SumRows:
        accumulate(a.id(), broadcast_rows(g, a.value().rows()));
        break;
      case Op::SumCols:
        accumulate(a.id(), broadcast_cols(g, a.value().cols()));
        break;
      case Op::BroadcastScalar:
        accumulate(a.id(), reshape(sum(g), a.shape()));
        break;
      case Op::BroadcastRows:
        accumulate(a.id(), sum_rows(g));
        break;
      case Op::BroadcastCols:
        accumulate(a.id(), sum_cols(g));
        break;
      case Op::Reshape:
        accumulate(a.id(), reshape(g, a.shape()));
        break;
      case Op::Relu: {
        // Subgradient 0 at the kink; the mask is a constant, so second
        // derivatives through ReLU vanish.
        Var mask = tape.constant(detail::map(a.value(), [](double x) { return x > 0 ? 1.0 : 0.0; }));
        accumulate(a.id(), mul(g, mask));
        break;
      }
      case Op::Exp:
        accumulate(a.id(), mul(g, y));
        break;
      case Op::Log:
        accumulate(a.id(), mul(g, reciprocal(a)));
        break;
      case Op::Reciprocal:
        accumulate(a.id(), neg(mul(g, square(y))));
        break;
      case Op::Sigmoid:
        accumulate(a.id(), mul(g, mul(y, add_scalar(neg(y), 1.0))));
        break;
      case Op::Softplus:
        accumulate(a.id(), mul(g, sigmoid(a)));
        break;
      case Op::Square:
        accumulate(a.id(), mul(g, scale(a, 2.0)));
        break;
      case Op::Heaviside:
        throw Error("cannot differentiate through a hard threshold (heaviside)");
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id() <= last && adjoint[w.id()].valid()) {
      out.push_back(adjoint[w.id()]);
    } else {
      out.push_back(tape.constant(Tensor(w.shape(), 0.0)));
    }
  }
  return out;
}

// Numeric gradients for every trainable leaf of the tape.
struct Gradients {
  std::vector<Var> leaves;
  std::vector<Tensor> values;

  const Tensor& operator[](Var leaf) const {
    for (std::size_t i = 0; i < leaves.size(); ++i)
      if (leaves[i] == leaf) return values[i];
    throw Error("no gradient recorded for this variable");
  }
};

inline Gradients backward(Var root, std::optional<Tensor> seed = std::nullopt) {
  Tape& tape = detail::tape_of(root);
  Gradients out;
  for (Var leaf : tape.trainable_leaves())
    if (leaf.id() <= root.id()) out.leaves.push_back(leaf);
  const auto gs = grad(root, out.leaves, std::move(seed));
  out.values.reserve(gs.size());
  for (const Var& g : gs) out.values.push_back(g.value());
  return out;
}

// Gradient of a scalar-valued field with respect to its input, kept on the
// tape so that functions of it (e.g. its squared norm) remain differentiable.
// For a batch x (n x m) and per-row outputs (n), row i of the result is the
// gradient of output i with respect to row i of x.
inline Var input_gradient(Var output, Var x) {
  const Var total = output.value().size() == 1 ? output : sum(output);
  if (output.value().size() != 1 && output.value().rank() != 1) {
    throw Error("input_gradient: output must be a scalar or one value per row");
  }
  const Var wrt[] = {x};
  return grad(total, wrt).front();
}

// Parameter gradients of a penalty that was itself built from input
// gradients. Plain grad(); named for the call sites that rely on the second
// order path.
inline std::vector<Tensor> second_order_param_grad(Var penalty, std::span<const Var> params) {
  std::vector<Tensor> out;
  for (const Var& g : grad(penalty, params)) out.push_back(g.value());
  return out;
}

}  // namespace ept::ad
