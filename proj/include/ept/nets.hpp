#pragma once

// Multilayer perceptrons (ReLU hidden layers, linear output), He-uniform
// initialisation and RMSProp.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ept/autodiff.hpp"
#include "ept/parallel.hpp"
#include "ept/rng.hpp"
#include "ept/tensor.hpp"

namespace ept {

struct DenseLayer {
  Tensor weight;  // (fan_in, fan_out)
  Tensor bias;    // (fan_out)
};

class Mlp {
public:
  Mlp() = default;

  Mlp(std::vector<std::size_t> widths, std::vector<DenseLayer> layers)
      : widths_(std::move(widths)), layers_(std::move(layers)) {
    validate();
  }

  // widths = {input, hidden..., output}. Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)),
  // biases zero.
  static Mlp init(std::vector<std::size_t> widths, std::uint64_t seed,
                  std::string_view label = "net") {
    check_widths(widths);
    Stream stream(seed, std::string("init/") + std::string(label));
    std::vector<DenseLayer> layers;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const std::size_t fan_in = widths[l], fan_out = widths[l + 1];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      DenseLayer layer{Tensor(Shape{fan_in, fan_out}), Tensor(Shape{fan_out})};
      for (double& w : layer.weight.values()) w = stream.uniform(-bound, bound);
      layers.push_back(std::move(layer));
    }
    return Mlp(std::move(widths), std::move(layers));
  }

  static Mlp zeros(std::vector<std::size_t> widths) {
    check_widths(widths);
    std::vector<DenseLayer> layers;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l)
      layers.push_back({Tensor(Shape{widths[l], widths[l + 1]}), Tensor(Shape{widths[l + 1]})});
    return Mlp(std::move(widths), std::move(layers));
  }

  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  std::size_t input_dim() const noexcept { return widths_.front(); }
  std::size_t output_dim() const noexcept { return widths_.back(); }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  // Flat order: W0, b0, W1, b1, ...
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  // xs (n x input) -> (n x output), no tape.
  Tensor forward(const Tensor& xs) const {
    check_input(xs);
    Tensor h = xs;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Tensor z = matmul(h, layers_[l].weight);
      const Tensor& b = layers_[l].bias;
      const std::size_t c = z.cols();
      const bool hidden = l + 1 < layers_.size();
      for (std::size_t i = 0; i < z.rows(); ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double v = z(i, j) + b[j];
          z(i, j) = hidden ? (v > 0 ? v : 0.0) : v;
        }
      }
      h = std::move(z);
    }
    return h;
  }

  std::vector<ad::Var> bind(ad::Tape& tape, bool trainable) const {
    std::vector<ad::Var> vars;
    for (const auto& l : layers_) {
      vars.push_back(trainable ? tape.leaf(l.weight, true) : tape.constant(l.weight));
      vars.push_back(trainable ? tape.leaf(l.bias, true) : tape.constant(l.bias));
    }
    return vars;
  }

  // Same arithmetic as forward(), recorded on the tape.
  ad::Var apply(ad::Var xs, std::span<const ad::Var> params) const {
    if (params.size() != 2 * layers_.size()) throw ShapeError("Mlp::apply: wrong parameter count");
    check_input(xs.value());
    ad::Var h = xs;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = ad::add_row(ad::matmul(h, params[2 * l]), params[2 * l + 1]);
      if (l + 1 < layers_.size()) h = ad::relu(h);
    }
    return h;
  }

private:
  static void check_widths(const std::vector<std::size_t>& widths) {
    if (widths.size() < 2) throw std::invalid_argument("Mlp needs at least input and output widths");
    for (std::size_t w : widths)
      if (w == 0) throw std::invalid_argument("Mlp layer width must be positive");
  }

  void validate() const {
    check_widths(widths_);
    if (layers_.size() + 1 != widths_.size()) throw ShapeError("Mlp: layer count mismatch");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].weight.shape() != Shape{widths_[l], widths_[l + 1]} ||
          layers_[l].bias.shape() != Shape{widths_[l + 1]}) {
        throw ShapeError("Mlp: layer " + std::to_string(l) + " has the wrong shape");
      }
    }
  }

  void check_input(const Tensor& xs) const {
    if (xs.rank() != 2 || xs.cols() != input_dim()) {
      throw ShapeError("Mlp: expected input (n x " + std::to_string(input_dim()) + "), got " +
                       to_string(xs.shape()));
    }
  }

  std::vector<std::size_t> widths_;
  std::vector<DenseLayer> layers_;
};

// Scalar field network R: R^m -> R, hidden widths as given.
inline Mlp init_scalar_net(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                           std::uint64_t seed) {
  if (input_dim == 0) throw std::invalid_argument("input dimension must be positive");
  if (hidden.empty()) throw std::invalid_argument("at least one hidden layer is required");
  std::vector<std::size_t> widths{input_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(1);
  return Mlp::init(std::move(widths), seed, "ratio");
}

// Generator G: R^latent -> R^output.
inline Mlp init_generator_net(std::size_t latent_dim, std::size_t output_dim,
                              const std::vector<std::size_t>& hidden, std::uint64_t seed) {
  std::vector<std::size_t> widths{latent_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(output_dim);
  return Mlp::init(std::move(widths), seed, "generator");
}

// Per-row outputs of a scalar network: (n x m) -> (n).
inline Tensor eval_batch(const Mlp& net, const Tensor& xs) {
  if (net.output_dim() != 1) throw ShapeError("eval_batch: network output is not scalar");
  require_finite(xs, "eval_batch input");
  return net.forward(xs).reshaped(Shape{xs.rows()});
}

// ---------------------------------------------------------------------------
// Scalar fields evaluated together with their input gradients.

// Anything that can record R(xs) for a batch (n x m) as a (n) variable.
template <class F>
concept ScalarField = requires(const F& f, ad::Var xs) {
  { f(xs) } -> std::convertible_to<ad::Var>;
};

enum class OutputLink { Identity, Softplus };

// An Mlp viewed as a scalar field, optionally passed through softplus.
struct NetField {
  const Mlp* net;
  OutputLink link = OutputLink::Identity;

  ad::Var operator()(ad::Var xs) const {
    ad::Tape& tape = *xs.tape();
    const auto params = net->bind(tape, false);
    return (*this)(xs, params);
  }

  ad::Var operator()(ad::Var xs, std::span<const ad::Var> params) const {
    ad::Var out = ad::reshape(net->apply(xs, params), Shape{xs.value().rows()});
    return link == OutputLink::Softplus ? ad::softplus(out) : out;
  }
};

struct FieldEval {
  Tensor values;     // (n)
  Tensor gradients;  // (n x m)
};

// Values and input gradients of a field over a batch, in fixed-size chunks.
template <ScalarField F>
FieldEval evaluate_field(const F& field, const Tensor& xs) {
  require_matrix(xs, "evaluate_field");
  const std::size_t n = xs.rows(), m = xs.cols();
  FieldEval out{Tensor(Shape{n}), Tensor(Shape{n, m})};
  for_each_chunk(n, [&](std::size_t begin, std::size_t end) {
    ad::Tape tape;
    const ad::Var x = tape.leaf(slice_rows(xs, begin, end), false);
    const ad::Var r = field(x);
    if (r.value().shape() != Shape{end - begin}) {
      throw ShapeError("scalar field must return one value per row");
    }
    const ad::Var g = ad::input_gradient(r, x);
    std::copy(r.value().storage().begin(), r.value().storage().end(), out.values.data() + begin);
    std::copy(g.value().storage().begin(), g.value().storage().end(),
              out.gradients.data() + begin * m);
  });
  return out;
}

// ---------------------------------------------------------------------------
// RMSProp

struct RmsPropOptions {
  double learning_rate = 5e-4;
  double decay = 0.99;
  double epsilon = 1e-8;
};

class RmsProp {
public:
  RmsProp() = default;
  explicit RmsProp(RmsPropOptions options) : options_(options) {}

  const RmsPropOptions& options() const noexcept { return options_; }
  RmsPropOptions& options() noexcept { return options_; }
  const std::vector<Tensor>& accumulators() const noexcept { return accum_; }
  void set_accumulators(std::vector<Tensor> accum) { accum_ = std::move(accum); }

  // acc <- decay*acc + (1-decay)*g^2 ; p <- p - lr*g/sqrt(acc+eps).
  // A non-finite gradient leaves parameters and state untouched and throws.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
    if (params.size() != grads.size()) throw ShapeError("RmsProp: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      require_same_shape(*params[i], grads[i], "RmsProp");
      require_finite(grads[i], "RmsProp gradient");
    }
    if (accum_.empty()) {
      for (const Tensor* p : params) accum_.emplace_back(p->shape(), 0.0);
    }
    if (accum_.size() != params.size()) throw ShapeError("RmsProp: state does not match parameters");
    const double rho = options_.decay, lr = options_.learning_rate, eps = options_.epsilon;
    for (std::size_t i = 0; i < params.size(); ++i) {
      require_same_shape(*params[i], accum_[i], "RmsProp state");
      double* p = params[i]->data();
      double* a = accum_[i].data();
      const double* g = grads[i].data();
      for (std::size_t k = 0; k < grads[i].size(); ++k) {
        a[k] = rho * a[k] + (1.0 - rho) * g[k] * g[k];
        p[k] -= lr * g[k] / std::sqrt(a[k] + eps);
      }
    }
  }

private:
  RmsPropOptions options_;
  std::vector<Tensor> accum_;
};

}  // namespace ept
