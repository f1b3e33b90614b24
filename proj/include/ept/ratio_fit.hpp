#pragma once

// Bregman-score fitting of density ratios and differences, with a gradient
// penalty, and the inner minibatch loop that runs T optimizer steps.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ept/autodiff.hpp"
#include "ept/nets.hpp"
#include "ept/rng.hpp"
#include "ept/tensor.hpp"

namespace ept {

enum class ObjectiveKind { Lsdr, Lr, DensityDiff };

inline const char* to_string(ObjectiveKind k) noexcept {
  switch (k) {
    case ObjectiveKind::Lsdr: return "lsdr";
    case ObjectiveKind::Lr: return "lr";
    case ObjectiveKind::DensityDiff: return "density-diff";
  }
  return "?";
}

inline ObjectiveKind parse_objective_kind(std::string_view name) {
  if (name == "lsdr") return ObjectiveKind::Lsdr;
  if (name == "lr") return ObjectiveKind::Lr;
  if (name == "density-diff") return ObjectiveKind::DensityDiff;
  throw std::invalid_argument("unknown objective '" + std::string(name) +
                              "' (expected lsdr, lr or density-diff)");
}

struct FitObjective {
  ObjectiveKind kind = ObjectiveKind::Lsdr;
  double alpha = 0.0;  // gradient-penalty weight

  void validate() const {
    if (!(alpha >= 0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be finite and >= 0");
  }
  // LR needs a positive ratio; the others use the raw network output.
  OutputLink link() const noexcept {
    return kind == ObjectiveKind::Lr ? OutputLink::Softplus : OutputLink::Identity;
  }
};

// A loss recorded on a tape: total = score + alpha * penalty.
struct LossTerms {
  ad::Var total;
  ad::Var score;
  ad::Var penalty;
  ad::Var target_gradient;  // grad R at the target batch, (n x m); invalid if not built
};

namespace detail {

inline void check_batches(const Tensor& x, const Tensor& y) {
  require_matrix(x, "target batch");
  require_matrix(y, "model batch");
  if (x.rows() == 0 || y.rows() == 0) throw std::invalid_argument("fit batches must be non-empty");
  if (x.cols() != y.cols()) throw ShapeError("target and model batches differ in dimension");
}

}  // namespace detail

// (1/n) sum [R(X)^2 - 2 R(Y)] + alpha (1/n) sum ||grad R(X)||^2
template <ScalarField F>
LossTerms lsdr_loss(ad::Tape& tape, const F& field, const Tensor& x_target, const Tensor& y_model,
                    double alpha, bool with_gradient = false) {
  detail::check_batches(x_target, y_model);
  const ad::Var x = tape.leaf(x_target, false);
  const ad::Var y = tape.leaf(y_model, false);
  const ad::Var rx = field(x);
  const ad::Var ry = field(y);
  const ad::Var score = ad::mean(ad::square(rx)) - 2.0 * ad::mean(ry);
  LossTerms out{score, score, tape.constant(0.0), {}};
  if (alpha > 0 || with_gradient) {
    out.target_gradient = ad::input_gradient(rx, x);
    out.penalty = ad::mean(ad::row_sqnorm(out.target_gradient));
    if (alpha > 0) out.total = score + alpha * out.penalty;
  }
  return out;
}

// Bregman score with g(x) = x log x - (x+1) log(x+1), for which
// g'(R) R - g(R) = log(1+R) and g'(R) = log R - log(1+R):
//   E_p[log(1+R)] - E_q[log R - log(1+R)] + alpha E_p[g''(R) ||grad R||^2 / 2].
// The field must be positive (softplus link).
template <ScalarField F>
LossTerms lr_loss(ad::Tape& tape, const F& field, const Tensor& x_target, const Tensor& y_model,
                  double alpha, bool with_gradient = false) {
  detail::check_batches(x_target, y_model);
  const ad::Var x = tape.leaf(x_target, false);
  const ad::Var y = tape.leaf(y_model, false);
  const ad::Var rx = field(x);
  const ad::Var ry = field(y);
  const ad::Var log1p_ry = ad::log(ry + 1.0);
  const ad::Var score = ad::mean(ad::log(rx + 1.0)) - ad::mean(ad::log(ry) - log1p_ry);
  LossTerms out{score, score, tape.constant(0.0), {}};
  if (alpha > 0 || with_gradient) {
    out.target_gradient = ad::input_gradient(rx, x);
    const ad::Var g2 = ad::reciprocal(rx * (rx + 1.0));
    out.penalty = ad::mean(0.5 * (g2 * ad::row_sqnorm(out.target_gradient)));
    if (alpha > 0) out.total = score + alpha * out.penalty;
  }
  return out;
}

// Density-difference score with g(c) = c^2 and base measure w:
//   2 E_p[D] - 2 E_q[D] + E_w[D^2] + alpha E_w ||grad D||^2.
// Its minimiser is (q - p) / w. Without an explicit base batch, w is the
// pooled batch [X; Y].
template <ScalarField F>
LossTerms density_diff_loss(ad::Tape& tape, const F& field, const Tensor& x_target,
                            const Tensor& y_model, const Tensor* w_base, double alpha,
                            bool with_gradient = false) {
  detail::check_batches(x_target, y_model);
  const Tensor pooled = w_base ? *w_base : vstack(x_target, y_model);
  require_matrix(pooled, "base batch");
  if (pooled.rows() == 0 || pooled.cols() != x_target.cols()) {
    throw ShapeError("base batch must be non-empty with the data dimension");
  }
  const ad::Var x = tape.leaf(x_target, false);
  const ad::Var y = tape.leaf(y_model, false);
  const ad::Var w = tape.leaf(pooled, false);
  const ad::Var dx = field(x);
  const ad::Var dy = field(y);
  const ad::Var dw = field(w);
  const ad::Var score = 2.0 * ad::mean(dx) - 2.0 * ad::mean(dy) + ad::mean(ad::square(dw));
  LossTerms out{score, score, tape.constant(0.0), {}};
  if (alpha > 0 || with_gradient) {
    const ad::Var gw = ad::input_gradient(dw, w);
    out.penalty = ad::mean(ad::row_sqnorm(gw));
    if (alpha > 0) out.total = score + alpha * out.penalty;
    out.target_gradient = with_gradient ? ad::input_gradient(dx, x) : ad::Var{};
  }
  return out;
}

template <ScalarField F>
LossTerms objective_loss(ad::Tape& tape, const FitObjective& objective, const F& field,
                         const Tensor& x_target, const Tensor& y_model, bool with_gradient = false) {
  objective.validate();
  switch (objective.kind) {
    case ObjectiveKind::Lsdr: return lsdr_loss(tape, field, x_target, y_model, objective.alpha, with_gradient);
    case ObjectiveKind::Lr: return lr_loss(tape, field, x_target, y_model, objective.alpha, with_gradient);
    case ObjectiveKind::DensityDiff:
      return density_diff_loss(tape, field, x_target, y_model, nullptr, objective.alpha, with_gradient);
  }
  throw std::logic_error("unreachable objective kind");
}

// Per-pair LSDR contributions R(X_i)^2 - 2 R(Y_i); their mean is the
// unpenalised empirical loss.
inline Tensor lsdr_pointwise(const Tensor& r_target, const Tensor& r_model) {
  require_same_shape(r_target, r_model, "lsdr_pointwise");
  Tensor out(r_target.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = r_target[i] * r_target[i] - 2.0 * r_model[i];
  return out;
}

// ---------------------------------------------------------------------------
// Minibatches without replacement

// Draws batches from a fresh permutation each epoch; a tail shorter than the
// batch is skipped. The permutation of epoch e comes from stream.fork(e), so
// (epoch, cursor) is the entire state.
class EpochSampler {
public:
  EpochSampler(Stream stream, std::size_t population, std::size_t batch)
      : stream_(stream), population_(population), batch_(batch) {
    if (batch == 0) throw std::invalid_argument("batch size must be positive");
    if (batch > population) {
      throw std::invalid_argument("batch size " + std::to_string(batch) + " exceeds population " +
                                  std::to_string(population));
    }
  }

  std::vector<std::size_t> next() {
    if (order_.empty() || cursor_ + batch_ > population_) {
      if (!order_.empty()) {
        ++epoch_;
        cursor_ = 0;
      }
      reshuffle();
    }
    std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    return idx;
  }

  std::uint64_t epoch() const noexcept { return epoch_; }
  std::size_t cursor() const noexcept { return cursor_; }
  std::size_t population() const noexcept { return population_; }
  std::size_t batch() const noexcept { return batch_; }

  void restore(std::uint64_t epoch, std::size_t cursor) {
    if (cursor > population_) throw std::invalid_argument("sampler cursor out of range");
    epoch_ = epoch;
    cursor_ = cursor;
    reshuffle();
  }

private:
  void reshuffle() {
    Stream s = stream_.fork(epoch_);
    order_ = permutation(population_, s);
  }

  Stream stream_;
  std::size_t population_;
  std::size_t batch_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

// ---------------------------------------------------------------------------
// Inner loop

struct FitReport {
  double final_loss = 0;            // score on the last batch (before its update)
  std::vector<double> loss;         // score per step
  std::vector<double> penalty;      // penalty per step (0 when alpha = 0)
  double mean_grad_norm = 0;        // mean ||grad R|| over the last target batch
  std::size_t steps = 0;
};

class FitDivergence : public std::runtime_error {
public:
  FitDivergence(const std::string& what, FitReport partial)
      : std::runtime_error(what), report(std::move(partial)) {}
  FitReport report;
};

inline constexpr double kDivergentLoss = 1e6;

// Fits a scalar network against a fixed target set and a particle set with
// shared batch size. Net and optimizer state persist between calls.
class RatioFitter {
public:
  RatioFitter(FitObjective objective, Mlp net, RmsPropOptions opt, std::size_t batch,
              std::uint64_t seed)
      : objective_(objective), net_(std::move(net)), optimizer_(opt), batch_(batch), seed_(seed) {
    objective_.validate();
    if (net_.output_dim() != 1) throw std::invalid_argument("ratio network must have scalar output");
    if (batch == 0) throw std::invalid_argument("batch size must be positive");
  }

  const FitObjective& objective() const noexcept { return objective_; }
  const Mlp& net() const noexcept { return net_; }
  Mlp& net() noexcept { return net_; }
  RmsProp& optimizer() noexcept { return optimizer_; }
  const RmsProp& optimizer() const noexcept { return optimizer_; }
  std::size_t batch() const noexcept { return batch_; }
  NetField field() const { return NetField{&net_, objective_.link()}; }

  // Sampler positions: {target epoch, target cursor, particle epoch, particle cursor}.
  std::array<std::uint64_t, 4> sampler_state() const {
    if (!target_sampler_ || !particle_sampler_) return {0, 0, 0, 0};
    return {target_sampler_->epoch(), target_sampler_->cursor(), particle_sampler_->epoch(),
            particle_sampler_->cursor()};
  }
  void set_sampler_state(const std::array<std::uint64_t, 4>& s, std::size_t target_n,
                         std::size_t particle_n) {
    ensure_samplers(target_n, particle_n);
    target_sampler_->restore(s[0], static_cast<std::size_t>(s[1]));
    particle_sampler_->restore(s[2], static_cast<std::size_t>(s[3]));
  }

  // Runs T optimizer steps, each on a fresh pair of minibatches.
  FitReport fit(const Tensor& target, const Tensor& particles, std::size_t steps) {
    if (steps == 0) throw std::invalid_argument("fit requires T >= 1 steps");
    require_matrix(target, "target data");
    require_matrix(particles, "particles");
    if (target.cols() != net_.input_dim() || particles.cols() != net_.input_dim()) {
      throw ShapeError("fit data dimension does not match the network input");
    }
    ensure_samplers(target.rows(), particles.rows());

    FitReport report;
    auto params_ptr = net_.parameters();
    for (std::size_t t = 0; t < steps; ++t) {
      const auto xi = target_sampler_->next();
      const auto yi = particle_sampler_->next();
      const Tensor xb = take_rows(target, xi);
      const Tensor yb = take_rows(particles, yi);

      ad::Tape tape;
      const auto params = net_.bind(tape, true);
      const NetField f{&net_, objective_.link()};
      const auto field = [&](ad::Var xs) { return f(xs, params); };
      const bool last = t + 1 == steps;
      const LossTerms terms = objective_loss(tape, objective_, field, xb, yb, last);

      const double score = terms.score.value().item();
      const double penalty = terms.penalty.value().item();
      report.loss.push_back(score);
      report.penalty.push_back(penalty);
      report.steps = t + 1;
      report.final_loss = score;
      if (last && terms.target_gradient.valid()) {
        report.mean_grad_norm = mean_row_norm(terms.target_gradient.value());
      }
      if (!std::isfinite(score) || !std::isfinite(penalty) || std::abs(score) > kDivergentLoss) {
        throw FitDivergence("ratio fit diverged at step " + std::to_string(t) +
                                ": loss = " + std::to_string(score),
                            std::move(report));
      }

      const auto grads = ad::second_order_param_grad(terms.total, params);
      try {
        optimizer_.step(params_ptr, grads);
      } catch (const NonFiniteError& e) {
        throw FitDivergence(std::string("ratio fit produced a non-finite gradient: ") + e.what(),
                            std::move(report));
      }
    }
    return report;
  }

  static double mean_row_norm(const Tensor& g) {
    double acc = 0;
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double s = 0;
      for (double v : g.row(i)) s += v * v;
      acc += std::sqrt(s);
    }
    return g.rows() ? acc / static_cast<double>(g.rows()) : 0.0;
  }

private:
  void ensure_samplers(std::size_t target_n, std::size_t particle_n) {
    if (!target_sampler_ || target_sampler_->population() != target_n) {
      target_sampler_.emplace(Stream(seed_, "fit/target"), target_n, batch_);
    }
    if (!particle_sampler_ || particle_sampler_->population() != particle_n) {
      particle_sampler_.emplace(Stream(seed_, "fit/particles"), particle_n, batch_);
    }
  }

  FitObjective objective_;
  Mlp net_;
  RmsProp optimizer_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::optional<EpochSampler> target_sampler_;
  std::optional<EpochSampler> particle_sampler_;
};

// One-shot form: T steps on `net` in place.
inline FitReport fit_step_loop(const FitObjective& objective, Mlp& net, const Tensor& target,
                               const Tensor& particles, std::size_t steps, std::size_t batch,
                               RmsProp& optimizer, std::uint64_t seed = 0) {
  RatioFitter fitter(objective, std::move(net), optimizer.options(), batch, seed);
  fitter.optimizer().set_accumulators(optimizer.accumulators());
  struct Restore {
    RatioFitter& f;
    Mlp& net;
    RmsProp& opt;
    ~Restore() {
      net = std::move(f.net());
      opt.set_accumulators(f.optimizer().accumulators());
    }
  } restore{fitter, net, optimizer};
  return fitter.fit(target, particles, steps);
}

}  // namespace ept
