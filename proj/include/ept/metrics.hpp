#pragma once

// Sample discrepancies (MMD^2, exact W2), Gaussian KDE and the KDE ratio
// oracle, and the per-iteration diagnostics table.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ept/baselines.hpp"
#include "ept/parallel.hpp"
#include "ept/tensor.hpp"

namespace ept {

struct MetricReport {
  std::string metric;
  double value = 0;
  std::size_t n_x = 0;
  std::size_t n_y = 0;
  std::map<std::string, double> params;
};

// ---------------------------------------------------------------------------
// MMD

enum class MmdEstimator { Unbiased, Biased };

namespace detail {

inline double kernel_sum(const RbfKernel& k, const Tensor& a, const Tensor& b, bool skip_diagonal) {
  const double inv = 1.0 / (k.bandwidth * k.bandwidth);
  std::vector<double> partial((a.rows() + kRowChunk - 1) / kRowChunk, 0.0);
  for_each_chunk(a.rows(), [&](std::size_t begin, std::size_t end) {
    double s = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto x = a.row(i);
      for (std::size_t j = 0; j < b.rows(); ++j) {
        if (skip_diagonal && i == j) continue;
        s += std::exp(-0.5 * RbfKernel::sqdist(x, b.row(j)) * inv);
      }
    }
    partial[begin / kRowChunk] = s;
  });
  double total = 0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace detail

// Unbiased: U-statistics for the within-sample terms. Biased: V-statistic.
inline double mmd_squared(const Tensor& x, const Tensor& y, const RbfKernel& kernel,
                          MmdEstimator estimator = MmdEstimator::Unbiased) {
  require_matrix(x, "mmd_squared");
  require_matrix(y, "mmd_squared");
  if (x.cols() != y.cols()) throw ShapeError("mmd_squared: dimension mismatch");
  if (x.rows() < 2 || y.rows() < 2) throw std::invalid_argument("mmd_squared needs at least two points per sample");
  const auto n = static_cast<double>(x.rows()), m = static_cast<double>(y.rows());
  const double cross = detail::kernel_sum(kernel, x, y, false) / (n * m);
  if (estimator == MmdEstimator::Biased) {
    return detail::kernel_sum(kernel, x, x, false) / (n * n) + detail::kernel_sum(kernel, y, y, false) / (m * m) -
           2 * cross;
  }
  return detail::kernel_sum(kernel, x, x, true) / (n * (n - 1)) +
         detail::kernel_sum(kernel, y, y, true) / (m * (m - 1)) - 2 * cross;
}

// ---------------------------------------------------------------------------
// Exact W2 between equal-size empirical measures

inline constexpr std::size_t kW2MaxPoints = 2000;

// Minimum-cost perfect matching on a square cost matrix (Hungarian method with
// potentials, O(n^3)). Returns the column assigned to each row.
inline std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      const double* row = cost.data() + (i0 - 1) * n;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n);
  for (std::size_t j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
  return assign;
}

// sqrt of the optimal mean squared matching cost.
inline double wasserstein2_exact(const Tensor& x, const Tensor& y) {
  require_matrix(x, "wasserstein2_exact");
  require_matrix(y, "wasserstein2_exact");
  if (x.rows() != y.rows()) throw std::invalid_argument("wasserstein2_exact needs equal sample sizes");
  if (x.cols() != y.cols()) throw ShapeError("wasserstein2_exact: dimension mismatch");
  const std::size_t n = x.rows();
  if (n == 0) throw std::invalid_argument("wasserstein2_exact needs non-empty samples");
  if (n > kW2MaxPoints) {
    throw std::invalid_argument("wasserstein2_exact is capped at " + std::to_string(kW2MaxPoints) +
                                " points, got " + std::to_string(n));
  }
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = RbfKernel::sqdist(x.row(i), y.row(j));
  const auto assign = solve_assignment(cost, n);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + assign[i]];
  return std::sqrt(total / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Kernel density estimation (product Gaussian kernel)

// Silverman's rule per coordinate: h_j = sd_j * (4 / ((d + 2) n))^(1 / (d + 4)).
inline std::vector<double> silverman_bandwidth(const Tensor& xs) {
  require_matrix(xs, "silverman_bandwidth");
  const std::size_t n = xs.rows(), d = xs.cols();
  if (n < 2) throw std::invalid_argument("silverman_bandwidth needs at least two points");
  const double factor = std::pow(4.0 / ((static_cast<double>(d) + 2) * static_cast<double>(n)),
                                 1.0 / (static_cast<double>(d) + 4));
  std::vector<double> h(d);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) mean += xs(i, j);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) sq += (xs(i, j) - mean) * (xs(i, j) - mean);
    h[j] = std::sqrt(sq / static_cast<double>(n - 1)) * factor;
    if (!(h[j] > 0)) throw std::invalid_argument("silverman_bandwidth: zero spread in a coordinate");
  }
  return h;
}

struct KdeEval {
  Tensor density;   // (q)
  Tensor gradient;  // (q x d)
};

namespace detail {

inline std::vector<double> resolve_bandwidth(const Tensor& samples, const std::optional<std::vector<double>>& h) {
  if (!h) return silverman_bandwidth(samples);
  if (h->size() == 1 && samples.cols() > 1) return std::vector<double>(samples.cols(), h->front());
  if (h->size() != samples.cols()) throw ShapeError("KDE bandwidth has the wrong dimension");
  for (double v : *h)
    if (!(v > 0)) throw std::invalid_argument("KDE bandwidth must be positive");
  return *h;
}

}  // namespace detail

// Density and its gradient at the query rows. An empty bandwidth means Silverman.
inline KdeEval kde_evaluate(const Tensor& samples, const Tensor& queries,
                            const std::optional<std::vector<double>>& bandwidth = std::nullopt) {
  require_matrix(samples, "kde samples");
  require_matrix(queries, "kde queries");
  if (samples.rows() == 0) throw std::invalid_argument("KDE needs a non-empty sample");
  if (samples.cols() != queries.cols()) throw ShapeError("KDE: dimension mismatch");
  const std::size_t d = samples.cols(), n = samples.rows();
  const auto h = detail::resolve_bandwidth(samples, bandwidth);
  std::vector<double> inv(d);
  double norm = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < d; ++j) {
    inv[j] = 1.0 / h[j];
    norm *= inv[j] / std::sqrt(2 * std::numbers::pi);
  }
  KdeEval out{Tensor(Shape{queries.rows()}), Tensor(Shape{queries.rows(), d})};
  for_each_chunk(queries.rows(), [&](std::size_t b, std::size_t e) {
    std::vector<double> g(d), z(d);
    for (std::size_t i = b; i < e; ++i) {
      const auto q = queries.row(i);
      double dens = 0;
      std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t k = 0; k < n; ++k) {
        const auto s = samples.row(k);
        double e2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
          z[j] = (q[j] - s[j]) * inv[j];
          e2 += z[j] * z[j];
        }
        const double w = std::exp(-0.5 * e2);
        dens += w;
        for (std::size_t j = 0; j < d; ++j) g[j] -= z[j] * inv[j] * w;
      }
      out.density[i] = norm * dens;
      for (std::size_t j = 0; j < d; ++j) out.gradient(i, j) = norm * g[j];
    }
  }, 256);
  return out;
}

inline Tensor kde_density(const Tensor& samples, const Tensor& queries,
                          const std::optional<std::vector<double>>& bandwidth = std::nullopt) {
  return kde_evaluate(samples, queries, bandwidth).density;
}

inline constexpr double kKdeFloor = 1e-6;

struct KdeRatio {
  Tensor ratio;              // q_hat / max(p_hat, floor), (q)
  Tensor gradient;           // grad of the ratio, zero where the floor is active, (q x d)
  Tensor numerator;          // particle KDE
  Tensor denominator;        // target KDE before flooring
  std::size_t floor_hits = 0;
};

// Ratio of the particle KDE to the target KDE at the queries.
inline KdeRatio kde_ratio_oracle(const Tensor& particles, const Tensor& target, const Tensor& queries,
                                 const std::optional<std::vector<double>>& particle_bandwidth = std::nullopt,
                                 const std::optional<std::vector<double>>& target_bandwidth = std::nullopt) {
  const KdeEval q = kde_evaluate(particles, queries, particle_bandwidth);
  const KdeEval p = kde_evaluate(target, queries, target_bandwidth);
  const std::size_t nq = queries.rows(), d = queries.cols();
  KdeRatio out{Tensor(Shape{nq}), Tensor(Shape{nq, d}), q.density, p.density, 0};
  for (std::size_t i = 0; i < nq; ++i) {
    const double pd = p.density[i];
    if (pd < kKdeFloor) {
      ++out.floor_hits;
      out.ratio[i] = q.density[i] / kKdeFloor;
      for (std::size_t j = 0; j < d; ++j) out.gradient(i, j) = q.gradient(i, j) / kKdeFloor;
      continue;
    }
    out.ratio[i] = q.density[i] / pd;
    for (std::size_t j = 0; j < d; ++j)
      out.gradient(i, j) = (q.gradient(i, j) * pd - q.density[i] * p.gradient(i, j)) / (pd * pd);
  }
  return out;
}

// Plug-in chi^2 divergence: (1/2) mean over target points of (r_hat - 1)^2.
inline double chi2_plugin(const Tensor& particles, const Tensor& target,
                          const std::optional<std::vector<double>>& particle_bandwidth = std::nullopt,
                          const std::optional<std::vector<double>>& target_bandwidth = std::nullopt) {
  const KdeRatio r = kde_ratio_oracle(particles, target, target, particle_bandwidth, target_bandwidth);
  double s = 0;
  for (double v : r.ratio.storage()) s += (v - 1) * (v - 1);
  return 0.5 * s / static_cast<double>(r.ratio.size());
}

// ---------------------------------------------------------------------------
// Diagnostics

struct DiagnosticsRow {
  std::size_t iteration = 0;
  double fit_loss = std::numeric_limits<double>::quiet_NaN();
  double penalty = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::quiet_NaN();  // mean ||grad R|| over particles
  std::size_t clamped = 0;
  std::map<std::string, double> metrics;
};

struct DiagnosticsTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::vector<double> column(const std::string& name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw std::out_of_range("no diagnostics column '" + name + "'");
    const auto c = static_cast<std::size_t>(it - columns.begin());
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r[c]);
    return out;
  }
};

// Flattens rows into named columns; metric columns are the union of metric
// names, NaN where a row lacks one.
inline DiagnosticsTable diagnostics_table(const std::vector<DiagnosticsRow>& rows) {
  DiagnosticsTable t{{"iter", "fit_loss", "penalty", "grad_norm", "clamped"}, {}};
  std::vector<std::string> names;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.metrics)
      if (std::find(names.begin(), names.end(), k) == names.end()) names.push_back(k);
  std::sort(names.begin(), names.end());
  t.columns.insert(t.columns.end(), names.begin(), names.end());
  for (const auto& r : rows) {
    std::vector<double> row{static_cast<double>(r.iteration), r.fit_loss, r.penalty, r.grad_norm,
                            static_cast<double>(r.clamped)};
    for (const auto& k : names) {
      const auto it = r.metrics.find(k);
      row.push_back(it == r.metrics.end() ? std::numeric_limits<double>::quiet_NaN() : it->second);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace ept
