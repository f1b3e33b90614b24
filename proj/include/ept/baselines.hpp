#pragma once

// Gaussian RBF kernel and the two kernel particle flows: MMD flow and SVGD.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ept/divergences.hpp"
#include "ept/parallel.hpp"
#include "ept/tensor.hpp"

namespace ept {

// K(x, z) = exp(-||x - z||^2 / (2 h^2))
struct RbfKernel {
  double bandwidth = 1.0;

  explicit RbfKernel(double h = 1.0) : bandwidth(h) {
    if (!(h > 0) || !std::isfinite(h)) throw std::invalid_argument("kernel bandwidth must be positive");
  }

  double operator()(std::span<const double> x, std::span<const double> z) const {
    return std::exp(-0.5 * sqdist(x, z) / (bandwidth * bandwidth));
  }

  // grad_x K(x, z) = -(x - z) / h^2 * K(x, z)
  void grad_x(std::span<const double> x, std::span<const double> z, std::span<double> out) const {
    const double k = (*this)(x, z);
    const double inv = 1.0 / (bandwidth * bandwidth);
    for (std::size_t j = 0; j < x.size(); ++j) out[j] = -(x[j] - z[j]) * inv * k;
  }

  static double sqdist(std::span<const double> x, std::span<const double> z) {
    double s = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double d = x[j] - z[j];
      s += d * d;
    }
    return s;
  }
};

inline constexpr std::size_t kMedianSubsample = 1000;

// Median pairwise distance, over at most kMedianSubsample evenly strided rows.
inline double median_heuristic(const Tensor& xs) {
  require_matrix(xs, "median_heuristic");
  const std::size_t n = xs.rows();
  if (n < 2) throw std::invalid_argument("median heuristic needs at least two points");
  const std::size_t k = std::min(n, kMedianSubsample);
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i * n / k;
  std::vector<double> d;
  d.reserve(k * (k - 1) / 2);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = a + 1; b < k; ++b) d.push_back(std::sqrt(RbfKernel::sqdist(xs.row(idx[a]), xs.row(idx[b]))));
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), mid));
  if (!(med > 0)) throw std::invalid_argument("median heuristic: all points coincide");
  return med;
}

inline double median_heuristic(const Tensor& xs, const Tensor& ys) { return median_heuristic(vstack(xs, ys)); }

namespace detail {

// out_i += c * sum_j grad_x K(q_i, s_j), for query rows [begin, end).
inline void accumulate_kernel_grad(const RbfKernel& k, const Tensor& queries, const Tensor& sources,
                                   double c, Tensor& out, std::size_t begin, std::size_t end) {
  const std::size_t m = queries.cols();
  const double inv = 1.0 / (k.bandwidth * k.bandwidth);
  std::vector<double> acc(m);
  for (std::size_t i = begin; i < end; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const auto q = queries.row(i);
    for (std::size_t j = 0; j < sources.rows(); ++j) {
      const auto z = sources.row(j);
      const double w = std::exp(-0.5 * RbfKernel::sqdist(q, z) * inv) * inv;
      for (std::size_t a = 0; a < m; ++a) acc[a] -= (q[a] - z[a]) * w;
    }
    for (std::size_t a = 0; a < m; ++a) out(i, a) += c * acc[a];
  }
}

}  // namespace detail

// v(x) = (1/n) sum_i grad_x K(x, X_i) - (1/n') sum_j grad_x K(x, Y_j)
inline Tensor mmd_flow_velocity(const RbfKernel& kernel, const Tensor& target, const Tensor& particles,
                                const Tensor& queries) {
  require_matrix(target, "mmd_flow_velocity target");
  require_matrix(particles, "mmd_flow_velocity particles");
  require_matrix(queries, "mmd_flow_velocity queries");
  if (target.rows() == 0 || particles.rows() == 0) throw std::invalid_argument("mmd flow needs non-empty samples");
  if (target.cols() != queries.cols() || particles.cols() != queries.cols()) {
    throw ShapeError("mmd_flow_velocity: dimension mismatch");
  }
  Tensor v(Shape{queries.rows(), queries.cols()});
  const double cx = 1.0 / static_cast<double>(target.rows());
  const double cy = -1.0 / static_cast<double>(particles.rows());
  for_each_chunk(queries.rows(), [&](std::size_t b, std::size_t e) {
    detail::accumulate_kernel_grad(kernel, queries, target, cx, v, b, e);
    detail::accumulate_kernel_grad(kernel, queries, particles, cy, v, b, e);
  }, 256);
  return v;
}

using ScoreFunction = std::function<Tensor(const Tensor&)>;  // (n x m) -> grad log p, (n x m)

// v(y_j) = (1/n) sum_i [K(y_j, y_i) s(y_i) + grad_{y_i} K(y_j, y_i)]
inline Tensor svgd_velocity(const RbfKernel& kernel, const ScoreFunction& score, const Tensor& particles) {
  require_matrix(particles, "svgd_velocity");
  const std::size_t n = particles.rows(), m = particles.cols();
  if (n == 0) throw std::invalid_argument("svgd needs at least one particle");
  const Tensor s = score(particles);
  require_same_shape(s, particles, "svgd score");
  Tensor v(Shape{n, m});
  const double inv = 1.0 / (kernel.bandwidth * kernel.bandwidth);
  const double c = 1.0 / static_cast<double>(n);
  for_each_chunk(n, [&](std::size_t b, std::size_t e) {
    std::vector<double> acc(m);
    for (std::size_t j = b; j < e; ++j) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const auto yj = particles.row(j);
      for (std::size_t i = 0; i < n; ++i) {
        const auto yi = particles.row(i);
        const double k = std::exp(-0.5 * RbfKernel::sqdist(yj, yi) * inv);
        for (std::size_t a = 0; a < m; ++a) acc[a] += k * (s(i, a) + (yj[a] - yi[a]) * inv);
      }
      for (std::size_t a = 0; a < m; ++a) v(j, a) = c * acc[a];
    }
  }, 256);
  return v;
}

// Velocity fields with the particle set frozen at construction.
inline VelocityField mmd_flow_field(RbfKernel kernel, Tensor target, Tensor particles) {
  return {[kernel, target = std::move(target), particles = std::move(particles)](const Tensor& q) {
            return mmd_flow_velocity(kernel, target, particles, q);
          },
          Provenance::KernelBaseline};
}

}  // namespace ept
