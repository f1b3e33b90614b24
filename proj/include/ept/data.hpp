#pragma once

// Toy 2D targets, the Gaussian reference, and Gaussian mixtures with exact
// densities and scores.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ept/rng.hpp"
#include "ept/tensor.hpp"

namespace ept {

inline const std::vector<std::string>& dataset_names() {
  static const std::vector<std::string> names{
      "8gaussians", "pinwheel", "moons", "checkerboard", "2spirals", "circles",
      "4squares",   "5squares", "small4gaussians", "large4gaussians"};
  return names;
}

struct DatasetSpec {
  std::string name;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::optional<double> noise;  // overrides the generator's default noise scale
};

// ---------------------------------------------------------------------------
// Gaussian mixtures

class GaussianMixture {
public:
  struct Component {
    double weight;
    std::vector<double> mean;
    std::vector<double> covariance;  // row-major m x m
  };

  explicit GaussianMixture(std::vector<Component> components) : components_(std::move(components)) {
    if (components_.empty()) throw std::invalid_argument("mixture needs at least one component");
    dim_ = components_.front().mean.size();
    if (dim_ == 0) throw std::invalid_argument("mixture dimension must be positive");
    double total = 0;
    for (auto& c : components_) {
      if (c.mean.size() != dim_ || c.covariance.size() != dim_ * dim_) {
        throw std::invalid_argument("mixture component has inconsistent dimensions");
      }
      if (!(c.weight > 0)) throw std::invalid_argument("mixture weights must be positive");
      total += c.weight;
      factorize(c);
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("mixture weights must sum to 1");
  }

  static GaussianMixture isotropic(const std::vector<std::vector<double>>& means, double sigma) {
    std::vector<Component> comps;
    const double w = 1.0 / static_cast<double>(means.size());
    for (const auto& mu : means) {
      const std::size_t m = mu.size();
      std::vector<double> cov(m * m, 0.0);
      for (std::size_t i = 0; i < m; ++i) cov[i * m + i] = sigma * sigma;
      comps.push_back({w, mu, cov});
    }
    return GaussianMixture(std::move(comps));
  }

  static GaussianMixture normal(std::vector<double> mean, double sigma) {
    return isotropic({std::move(mean)}, sigma);
  }

  std::size_t dim() const noexcept { return dim_; }
  const std::vector<Component>& components() const noexcept { return components_; }

  double log_density(std::span<const double> x) const {
    double best = -INFINITY;
    std::vector<double> terms(components_.size());
    for (std::size_t k = 0; k < components_.size(); ++k) {
      terms[k] = std::log(components_[k].weight) + component_log_density(k, x);
      best = std::max(best, terms[k]);
    }
    double s = 0;
    for (double t : terms) s += std::exp(t - best);
    return best + std::log(s);
  }

  // grad log p(x)
  std::vector<double> score(std::span<const double> x) const {
    std::vector<double> terms(components_.size());
    double best = -INFINITY;
    for (std::size_t k = 0; k < components_.size(); ++k) {
      terms[k] = std::log(components_[k].weight) + component_log_density(k, x);
      best = std::max(best, terms[k]);
    }
    double z = 0;
    for (double& t : terms) z += (t = std::exp(t - best));
    std::vector<double> out(dim_, 0.0);
    for (std::size_t k = 0; k < components_.size(); ++k) {
      const auto g = component_score(k, x);
      for (std::size_t j = 0; j < dim_; ++j) out[j] += terms[k] / z * g[j];
    }
    return out;
  }

  Tensor sample(std::size_t n, Stream& stream) const {
    Tensor out(Shape{n, dim_});
    for (std::size_t i = 0; i < n; ++i) {
      const Component& c = components_[pick(stream)];
      std::vector<double> z(dim_);
      for (double& v : z) v = stream.normal();
      for (std::size_t a = 0; a < dim_; ++a) {
        double v = c.mean[a];
        for (std::size_t b = 0; b <= a; ++b) v += chol(c)[a * dim_ + b] * z[b];
        out(i, a) = v;
      }
    }
    return out;
  }

private:
  struct Factor {
    std::vector<double> chol;   // lower Cholesky factor L, cov = L L^T
    std::vector<double> prec;   // inverse covariance
    double log_norm = 0;        // -0.5 * (m log 2pi + log det cov)
  };

  void factorize(const Component& c) {
    const std::size_t m = dim_;
    Factor f;
    f.chol.assign(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double s = c.covariance[i * m + j];
        for (std::size_t k = 0; k < j; ++k) s -= f.chol[i * m + k] * f.chol[j * m + k];
        if (i == j) {
          if (!(s > 0)) throw std::invalid_argument("mixture covariance is not positive definite");
          f.chol[i * m + i] = std::sqrt(s);
        } else {
          f.chol[i * m + j] = s / f.chol[j * m + j];
        }
      }
      for (std::size_t j = 0; j < m; ++j) {
        if (std::abs(c.covariance[i * m + j] - c.covariance[j * m + i]) > 1e-12) {
          throw std::invalid_argument("mixture covariance is not symmetric");
        }
      }
    }
    // prec = L^-T L^-1, column by column.
    f.prec.assign(m * m, 0.0);
    for (std::size_t col = 0; col < m; ++col) {
      std::vector<double> y(m, 0.0);
      for (std::size_t i = 0; i < m; ++i) {  // L y = e_col
        double s = i == col ? 1.0 : 0.0;
        for (std::size_t k = 0; k < i; ++k) s -= f.chol[i * m + k] * y[k];
        y[i] = s / f.chol[i * m + i];
      }
      for (std::size_t i = m; i-- > 0;) {  // L^T x = y
        double s = y[i];
        for (std::size_t k = i + 1; k < m; ++k) s -= f.chol[k * m + i] * f.prec[k * m + col];
        f.prec[i * m + col] = s / f.chol[i * m + i];
      }
    }
    double log_det = 0;
    for (std::size_t i = 0; i < m; ++i) log_det += 2 * std::log(f.chol[i * m + i]);
    f.log_norm = -0.5 * (static_cast<double>(m) * std::log(2 * std::numbers::pi) + log_det);
    factors_.push_back(std::move(f));
  }

  const std::vector<double>& chol(const Component& c) const {
    return factors_[static_cast<std::size_t>(&c - components_.data())].chol;
  }

  std::size_t pick(Stream& stream) const {
    const double u = stream.uniform();
    double acc = 0;
    for (std::size_t k = 0; k + 1 < components_.size(); ++k) {
      acc += components_[k].weight;
      if (u < acc) return k;
    }
    return components_.size() - 1;
  }

  double component_log_density(std::size_t k, std::span<const double> x) const {
    const Factor& f = factors_[k];
    const auto& mu = components_[k].mean;
    double q = 0;
    for (std::size_t a = 0; a < dim_; ++a)
      for (std::size_t b = 0; b < dim_; ++b) q += (x[a] - mu[a]) * f.prec[a * dim_ + b] * (x[b] - mu[b]);
    return f.log_norm - 0.5 * q;
  }

  std::vector<double> component_score(std::size_t k, std::span<const double> x) const {
    const Factor& f = factors_[k];
    const auto& mu = components_[k].mean;
    std::vector<double> g(dim_, 0.0);
    for (std::size_t a = 0; a < dim_; ++a)
      for (std::size_t b = 0; b < dim_; ++b) g[a] -= f.prec[a * dim_ + b] * (x[b] - mu[b]);
    return g;
  }

  std::vector<Component> components_;
  std::vector<Factor> factors_;
  std::size_t dim_ = 0;
};

using AnalyticTarget = GaussianMixture;

inline Tensor analytic_density(const AnalyticTarget& target, const Tensor& xs) {
  Tensor out(Shape{xs.rows()});
  for (std::size_t i = 0; i < xs.rows(); ++i) out[i] = std::exp(target.log_density(xs.row(i)));
  return out;
}

inline Tensor analytic_score(const AnalyticTarget& target, const Tensor& xs) {
  Tensor out(xs.shape());
  for (std::size_t i = 0; i < xs.rows(); ++i) {
    const auto g = target.score(xs.row(i));
    std::copy(g.begin(), g.end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generators

namespace detail {

inline std::vector<std::vector<double>> ring(std::size_t k, double radius, double phase = 0) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < k; ++i) {
    const double a = phase + 2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(k);
    out.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return out;
}

inline std::vector<std::vector<double>> corners(double a) {
  return {{a, a}, {-a, a}, {-a, -a}, {a, -a}};
}

inline constexpr double kMixtureSigma = 0.2;
inline constexpr double kSmallCorner = 1.0;
inline constexpr double kLargeCorner = 2.5;

}  // namespace detail

// Mixtures behind the Gaussian-type generators.
inline std::optional<AnalyticTarget> analytic_target(std::string_view name) {
  if (name == "8gaussians") return GaussianMixture::isotropic(detail::ring(8, 2.0), detail::kMixtureSigma);
  if (name == "small4gaussians")
    return GaussianMixture::isotropic(detail::corners(detail::kSmallCorner), detail::kMixtureSigma);
  if (name == "large4gaussians")
    return GaussianMixture::isotropic(detail::corners(detail::kLargeCorner), detail::kMixtureSigma);
  return std::nullopt;
}

inline Tensor sample(const DatasetSpec& spec) {
  const auto& names = dataset_names();
  if (std::find(names.begin(), names.end(), spec.name) == names.end()) {
    throw std::invalid_argument("unknown dataset '" + spec.name + "'");
  }
  if (spec.n == 0) throw std::invalid_argument("dataset size must be positive");
  Stream rng(spec.seed, "dataset/" + spec.name);
  const std::size_t n = spec.n;
  Tensor out(Shape{n, 2});
  const auto set = [&](std::size_t i, double x, double y) {
    out(i, 0) = x;
    out(i, 1) = y;
  };
  const std::string& name = spec.name;

  if (auto mixture = analytic_target(name)) {
    if (!spec.noise) return mixture->sample(n, rng);
    const auto& comps = mixture->components();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = comps[rng.below(comps.size())];
      set(i, c.mean[0] + *spec.noise * rng.normal(), c.mean[1] + *spec.noise * rng.normal());
    }
    return out;
  }
  if (name == "moons") {
    const double noise = spec.noise.value_or(0.1);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = std::numbers::pi * rng.uniform();
      const bool upper = rng.uniform() < 0.5;
      const double x = upper ? std::cos(t) : 1 - std::cos(t);
      const double y = upper ? std::sin(t) : 0.5 - std::sin(t);
      set(i, x - 0.5 + noise * rng.normal(), y - 0.25 + noise * rng.normal());
    }
    return out;
  }
  if (name == "checkerboard") {
    for (std::size_t i = 0; i < n; ++i) {
      const double x1 = rng.uniform() * 4 - 2;
      const double x2 = rng.uniform() - 2.0 * static_cast<double>(rng.below(2));
      const double shift = std::fmod(std::floor(x1), 2.0);
      set(i, x1, x2 + (shift < 0 ? shift + 2 : shift));
    }
    return out;
  }
  if (name == "2spirals") {
    const double noise = spec.noise.value_or(0.1);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = std::sqrt(rng.uniform()) * 540 * (2 * std::numbers::pi / 360);
      double x = -std::cos(t) * t + rng.uniform() * 0.5;
      double y = std::sin(t) * t + rng.uniform() * 0.5;
      if (rng.uniform() < 0.5) {
        x = -x;
        y = -y;
      }
      set(i, x / 3 + noise * rng.normal(), y / 3 + noise * rng.normal());
    }
    return out;
  }
  if (name == "pinwheel") {
    constexpr std::size_t kArms = 5;
    const double radial_std = 0.3, tangential_std = spec.noise.value_or(0.1), rate = 0.25;
    for (std::size_t i = 0; i < n; ++i) {
      const auto arm = static_cast<double>(rng.below(kArms));
      const double f0 = radial_std * rng.normal() + 1.0;
      const double f1 = tangential_std * rng.normal();
      const double angle = 2 * std::numbers::pi * arm / kArms + rate * std::exp(f0);
      const double c = std::cos(angle), s = std::sin(angle);
      set(i, 2 * (f0 * c - f1 * s), 2 * (f0 * s + f1 * c));
    }
    return out;
  }
  if (name == "circles") {
    const double noise = spec.noise.value_or(0.08);
    for (std::size_t i = 0; i < n; ++i) {
      const double radius = rng.uniform() < 0.5 ? 1.0 : 0.5;
      const double t = 2 * std::numbers::pi * rng.uniform();
      set(i, 3 * (radius * std::cos(t) + noise * rng.normal()),
          3 * (radius * std::sin(t) + noise * rng.normal()));
    }
    return out;
  }
  if (name == "4squares" || name == "5squares") {
    std::vector<std::array<double, 2>> centres{{1.5, 1.5}, {-1.5, 1.5}, {-1.5, -1.5}, {1.5, -1.5}};
    if (name == "5squares") centres.push_back({0.0, 0.0});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = centres[rng.below(centres.size())];
      set(i, c[0] + rng.uniform() - 0.5, c[1] + rng.uniform() - 0.5);
    }
    return out;
  }
  throw std::invalid_argument("unknown dataset '" + name + "'");
}

// i.i.d. N(0, I_m) rows.
inline Tensor reference_sample(std::size_t m, std::size_t n, std::uint64_t seed,
                               std::string_view label = "reference") {
  if (m == 0) throw std::invalid_argument("reference dimension must be positive");
  Stream rng(seed, label);
  return normal_matrix(n, m, rng);
}

}  // namespace ept
