#pragma once

// Finite-difference oracles and small fixtures shared by the unit tests and
// the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ept/autodiff.hpp"
#include "ept/nets.hpp"
#include "ept/rng.hpp"

namespace ept::testing {

// Norm-wise relative error of `got` against the oracle `want`.
inline double rel_err(const std::vector<double>& got, const std::vector<double>& want) {
  double diff = 0, ref = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    diff += (got[i] - want[i]) * (got[i] - want[i]);
    ref += want[i] * want[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
}

inline Tensor uniform_tensor(Shape shape, double lo, double hi, Stream& s) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = s.uniform(lo, hi);
  return t;
}

// Builds a scalar from the given leaves. The builder is called once with a
// recording tape and many times more for the central differences.
using GraphBuilder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

inline double evaluate_graph(const GraphBuilder& build, const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  return build(tape, leaves).value().item();
}

// Worst relative error over the inputs between reverse-mode gradients and
// central differences with step h.
inline double gradient_check(const GraphBuilder& build, const std::vector<Tensor>& inputs, double h = 1e-5) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  const ad::Var root = build(tape, leaves);
  const ad::Gradients g = ad::backward(root);
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> numeric(inputs[k].size());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      numeric[i] = (evaluate_graph(build, plus) - evaluate_graph(build, minus)) / (2 * h);
    }
    worst = std::max(worst, rel_err(g[leaves[k]].storage(), numeric));
  }
  return worst;
}

// Mean squared input-gradient norm of a scalar net over a batch, i.e. the
// gradient penalty, as a plain function of the parameters.
inline double penalty_value(const Mlp& net, const Tensor& xs) {
  ad::Tape tape;
  const ad::Var x = tape.leaf(xs, false);
  const ad::Var r = NetField{&net}(x);
  return ad::mean(ad::row_sqnorm(ad::input_gradient(r, x))).value().item();
}

// Relative error of the double-backward penalty gradient against central
// differences over every parameter.
inline double penalty_gradient_check(const Mlp& net, const Tensor& xs, double h = 1e-5) {
  ad::Tape tape;
  const auto params = net.bind(tape, true);
  const ad::Var x = tape.leaf(xs, false);
  const ad::Var r = NetField{&net}(x, params);
  const ad::Var pen = ad::mean(ad::row_sqnorm(ad::input_gradient(r, x)));
  const auto grads = ad::second_order_param_grad(pen, params);
  std::vector<double> got, want;
  Mlp probe = net;
  auto ps = probe.parameters();
  for (std::size_t k = 0; k < ps.size(); ++k) {
    for (std::size_t i = 0; i < ps[k]->size(); ++i) {
      const double orig = (*ps[k])[i];
      (*ps[k])[i] = orig + h;
      const double up = penalty_value(probe, xs);
      (*ps[k])[i] = orig - h;
      const double down = penalty_value(probe, xs);
      (*ps[k])[i] = orig;
      got.push_back(grads[k][i]);
      want.push_back((up - down) / (2 * h));
    }
  }
  return rel_err(got, want);
}

// A primitive-op check: the op applied to random inputs, contracted with
// fixed random weights so every output coordinate matters.
struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  double lo = -3, hi = 3;
  // Keep inputs at least this far from zero (kinks, poles).
  double avoid_zero = 0;
  std::function<ad::Var(const std::vector<ad::Var>&)> op;
};

inline std::vector<OpCase> primitive_op_cases() {
  using ad::Var;
  const Shape mat{3, 4}, mat2{4, 2}, vec4{4}, vec3{3}, scalar{};
  return {
      {"add", {mat, mat}, -3, 3, 0, [](const std::vector<Var>& v) { return v[0] + v[1]; }},
      {"sub", {mat, mat}, -3, 3, 0, [](const std::vector<Var>& v) { return v[0] - v[1]; }},
      {"mul", {mat, mat}, -3, 3, 0, [](const std::vector<Var>& v) { return v[0] * v[1]; }},
      {"neg", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return -v[0]; }},
      {"scale", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return 1.7 * v[0]; }},
      {"add_scalar", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return v[0] + 0.3; }},
      {"matmul", {mat, mat2}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); }},
      {"matmul_nt", {mat, Shape{2, 4}}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::matmul_nt(v[0], v[1]); }},
      {"matmul_tn", {mat, Shape{3, 2}}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::matmul_tn(v[0], v[1]); }},
      {"add_row", {mat, vec4}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::add_row(v[0], v[1]); }},
      {"mul_col", {mat, vec3}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::mul_col(v[0], v[1]); }},
      {"sum", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::sum(v[0]); }},
      {"mean", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::mean(v[0]); }},
      {"sum_rows", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::sum_rows(v[0]); }},
      {"sum_cols", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::sum_cols(v[0]); }},
      {"broadcast_scalar", {scalar}, -3, 3, 0,
       [](const std::vector<Var>& v) { return ad::broadcast_scalar(v[0], Shape{3, 4}); }},
      {"broadcast_rows", {vec4}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::broadcast_rows(v[0], 3); }},
      {"broadcast_cols", {vec3}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::broadcast_cols(v[0], 4); }},
      {"reshape", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::reshape(v[0], Shape{2, 6}); }},
      {"relu", {mat}, -3, 3, 1e-3, [](const std::vector<Var>& v) { return ad::relu(v[0]); }},
      {"exp", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::exp(v[0]); }},
      {"log", {mat}, 0.05, 3, 0, [](const std::vector<Var>& v) { return ad::log(v[0]); }},
      {"reciprocal", {mat}, 0.2, 3, 0, [](const std::vector<Var>& v) { return ad::reciprocal(v[0]); }},
      {"sigmoid", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::sigmoid(v[0]); }},
      {"softplus", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::softplus(v[0]); }},
      {"square", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::square(v[0]); }},
      {"row_sqnorm", {mat}, -3, 3, 0, [](const std::vector<Var>& v) { return ad::row_sqnorm(v[0]); }},
  };
}

// One random instance of an op check; returns the relative error.
inline double run_op_case(const OpCase& c, Stream& s) {
  std::vector<Tensor> inputs;
  for (const Shape& shape : c.shapes) {
    Tensor t = uniform_tensor(shape, c.lo, c.hi, s);
    for (double& v : t.values())
      if (std::abs(v) < c.avoid_zero) v = v < 0 ? -c.avoid_zero : c.avoid_zero;
    inputs.push_back(std::move(t));
  }
  ad::Tape probe;
  std::vector<ad::Var> pl;
  for (const Tensor& t : inputs) pl.push_back(probe.leaf(t));
  const Tensor weights = uniform_tensor(c.op(pl).value().shape(), -1, 1, s);
  const GraphBuilder build = [&](ad::Tape& tape, const std::vector<ad::Var>& v) {
    return ad::sum(c.op(v) * tape.constant(weights));
  };
  return gradient_check(build, inputs);
}

}  // namespace ept::testing
