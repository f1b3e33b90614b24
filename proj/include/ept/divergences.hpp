#pragma once

// Energy functionals and the velocity fields they induce:
//   f-divergence      v(x) = -f''(R(x)) grad R(x)   (R estimates q/p)
//   L2 difference     v(x) = -2 grad D(x)           (D estimates q - p)

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>

#include "ept/nets.hpp"
#include "ept/tensor.hpp"

namespace ept {

struct FDivergence {
  std::string name;
  double (*f)(double);
  double (*f_prime)(double);
  double (*f_double_prime)(double);
  // f'' is finite only for positive ratios; chi2 needs no clamp.
  bool needs_clamp = true;
};

inline constexpr double kRatioClampLow = 1e-3;
inline constexpr double kRatioClampHigh = 1e3;

inline FDivergence make_f_divergence(std::string_view name) {
  using std::log;
  if (name == "chi2") {
    return {"chi2", [](double u) { return 0.5 * (u - 1) * (u - 1); }, [](double u) { return u - 1; },
            [](double) { return 1.0; }, false};
  }
  if (name == "kl") {
    return {"kl", [](double u) { return u * log(u); }, [](double u) { return log(u) + 1; },
            [](double u) { return 1.0 / u; }, true};
  }
  if (name == "js") {
    return {"js", [](double u) { return u * log(u) - (1 + u) * log((1 + u) / 2); },
            [](double u) { return log(u) - log((1 + u) / 2); },
            [](double u) { return 1.0 / (u * (1 + u)); }, true};
  }
  if (name == "logd") {
    return {"logd",
            [](double u) { return u * log(u) - (1 + u) * log(1 + u) + 2 * std::numbers::ln2; },
            [](double u) { return log(u) - log(1 + u); },
            [](double u) { return 1.0 / (u * (1 + u)); }, true};
  }
  throw std::invalid_argument("unknown f-divergence '" + std::string(name) +
                              "' (expected chi2, kl, js or logd)");
}

struct L2Difference {};

struct EnergyFunctional {
  std::variant<FDivergence, L2Difference> kind;

  bool is_difference() const noexcept { return std::holds_alternative<L2Difference>(kind); }
  std::string name() const {
    return is_difference() ? "l2" : std::get<FDivergence>(kind).name;
  }
};

// "chi2" | "kl" | "js" | "logd" | "l2"
inline EnergyFunctional make_energy(std::string_view name) {
  if (name == "l2") return {L2Difference{}};
  return {make_f_divergence(name)};
}

enum class Provenance { Estimated, Oracle, KernelBaseline };

inline const char* to_string(Provenance p) noexcept {
  switch (p) {
    case Provenance::Estimated: return "estimated";
    case Provenance::Oracle: return "oracle";
    case Provenance::KernelBaseline: return "kernel-baseline";
  }
  return "?";
}

struct VelocityField {
  std::function<Tensor(const Tensor&)> evaluate;  // (n x m) -> (n x m)
  Provenance provenance = Provenance::Estimated;

  Tensor operator()(const Tensor& xs) const {
    Tensor v = evaluate(xs);
    require_same_shape(v, xs, "velocity field");
    return v;
  }
};

struct VelocitySample {
  Tensor velocity;          // (n x m)
  Tensor field_values;      // R(x) or D(x), (n)
  double mean_grad_norm = 0;  // mean ||grad R|| over the batch
  std::size_t clamped = 0;  // rows whose ratio was clamped before f''
};

namespace detail {

inline double mean_row_norm(const Tensor& g) {
  double acc = 0;
  for (std::size_t i = 0; i < g.rows(); ++i) {
    double s = 0;
    for (double v : g.row(i)) s += v * v;
    acc += std::sqrt(s);
  }
  return g.rows() ? acc / static_cast<double>(g.rows()) : 0.0;
}

}  // namespace detail

// -f''(R(x_i)) grad R(x_i) row-wise. Ratios are clamped into
// [kRatioClampLow, kRatioClampHigh] before f'' for divergences whose f''
// blows up at zero; the count of clamped rows is reported.
inline VelocitySample velocity_from_ratio(const FDivergence& div, const FieldEval& eval) {
  const Tensor& g = eval.gradients;
  VelocitySample out{Tensor(g.shape()), eval.values, detail::mean_row_norm(g), 0};
  for (std::size_t i = 0; i < g.rows(); ++i) {
    double r = eval.values[i];
    if (div.needs_clamp) {
      const double c = std::clamp(r, kRatioClampLow, kRatioClampHigh);
      if (c != r) ++out.clamped;
      r = c;
    }
    const double w = -div.f_double_prime(r);
    for (std::size_t j = 0; j < g.cols(); ++j) out.velocity(i, j) = w * g(i, j);
  }
  return out;
}

template <ScalarField F>
VelocitySample velocity_from_ratio(const FDivergence& div, const F& field, const Tensor& xs) {
  return velocity_from_ratio(div, evaluate_field(field, xs));
}

// -2 grad D(x_i) row-wise.
inline VelocitySample velocity_from_difference(const FieldEval& eval) {
  const Tensor& g = eval.gradients;
  VelocitySample out{Tensor(g.shape()), eval.values, detail::mean_row_norm(g), 0};
  for (std::size_t k = 0; k < g.size(); ++k) out.velocity[k] = -2.0 * g[k];
  return out;
}

template <ScalarField F>
VelocitySample velocity_from_difference(const F& field, const Tensor& xs) {
  return velocity_from_difference(evaluate_field(field, xs));
}

template <ScalarField F>
VelocitySample velocity_from_energy(const EnergyFunctional& energy, const F& field,
                                    const Tensor& xs) {
  if (energy.is_difference()) return velocity_from_difference(field, xs);
  return velocity_from_ratio(std::get<FDivergence>(energy.kind), field, xs);
}

}  // namespace ept
