#pragma once

// Dense row-major tensors of rank 0, 1 or 2 and the handful of kernels the
// autodiff engine and the metrics need.
//
// Matrix products accumulate every output element as a fused multiply-add
// chain over the inner index in ascending order, starting from zero. The
// result of a row therefore does not depend on how many other rows are in the
// batch or how the work is blocked, which is what lets single-point and
// batched evaluations agree bit for bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#if defined(__AVX2__) || defined(__AVX512F__)
#include <immintrin.h>
#endif
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ept {

// Graph tensors are large and short-lived; keep freed blocks in the heap
// instead of returning them to the OS and faulting them back in.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ')';
  return out.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
public:
  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {
    check_rank();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + ept::to_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-1 tensors behave as column vectors in row/column reductions.
  std::size_t rows() const noexcept { return rank() == 0 ? 1 : shape_[0]; }
  std::size_t cols() const noexcept { return rank() == 2 ? shape_[1] : 1; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + ept::to_string(shape_));
    return data_[0];
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != size()) {
      throw ShapeError("cannot reshape " + ept::to_string(shape_) + " to " + ept::to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool operator==(const Tensor& other) const = default;

private:
  void check_rank() const {
    if (shape_.size() > 2) throw ShapeError("tensors of rank > 2 are not supported");
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NonFiniteError(std::string(what) + " contains NaN or Inf");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + to_string(a.shape()));
  }
}

namespace kernels {

// c[0..n) += a * b[0..n), one rounding per element.
inline void axpy_row(double a, const double* __restrict b, double* __restrict c, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) c[j] = std::fma(a, b[j], c[j]);
}

#if defined(__AVX512F__)
struct Simd {
  using reg = __m512d;
  static constexpr std::size_t width = 8;
  static reg zero() { return _mm512_setzero_pd(); }
  static reg broadcast(double x) { return _mm512_set1_pd(x); }
  static reg load(const double* p) { return _mm512_loadu_pd(p); }
  static void store(double* p, reg v) { _mm512_storeu_pd(p, v); }
  static reg fma(reg a, reg b, reg c) { return _mm512_fmadd_pd(a, b, c); }
};
#define EPT_HAVE_SIMD 1
#elif defined(__AVX2__) && defined(__FMA__)
struct Simd {
  using reg = __m256d;
  static constexpr std::size_t width = 4;
  static reg zero() { return _mm256_setzero_pd(); }
  static reg broadcast(double x) { return _mm256_set1_pd(x); }
  static reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  static reg fma(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
};
#define EPT_HAVE_SIMD 1
#endif

// C (r x c) = A (r x k) * B (k x c). Each output element is the fma chain
// over p = 0..k-1 starting from zero, whichever path below computes it; the
// hardware fma and std::fma round identically.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t r, std::size_t k,
                    std::size_t cols) {
  std::size_t full_cols = 0;
#ifdef EPT_HAVE_SIMD
  constexpr std::size_t kRows = 4;
  constexpr std::size_t kVecs = 4;
  constexpr std::size_t kTile = kVecs * Simd::width;
  full_cols = cols - cols % kTile;
  std::size_t i = 0;
  for (; i + kRows <= r; i += kRows) {
    for (std::size_t j = 0; j < full_cols; j += kTile) {
      Simd::reg acc[kRows][kVecs];
      for (auto& row : acc)
        for (auto& v : row) v = Simd::zero();
      for (std::size_t p = 0; p < k; ++p) {
        const double* bp = b + p * cols + j;
        Simd::reg bv[kVecs];
        for (std::size_t v = 0; v < kVecs; ++v) bv[v] = Simd::load(bp + v * Simd::width);
        for (std::size_t rr = 0; rr < kRows; ++rr) {
          const Simd::reg x = Simd::broadcast(a[(i + rr) * k + p]);
          for (std::size_t v = 0; v < kVecs; ++v) acc[rr][v] = Simd::fma(x, bv[v], acc[rr][v]);
        }
      }
      for (std::size_t rr = 0; rr < kRows; ++rr)
        for (std::size_t v = 0; v < kVecs; ++v)
          Simd::store(c + (i + rr) * cols + j + v * Simd::width, acc[rr][v]);
    }
  }
  for (; i < r; ++i) {
    for (std::size_t j = 0; j < full_cols; j += kTile) {
      Simd::reg acc[kVecs];
      for (auto& v : acc) v = Simd::zero();
      for (std::size_t p = 0; p < k; ++p) {
        const Simd::reg x = Simd::broadcast(a[i * k + p]);
        const double* bp = b + p * cols + j;
        for (std::size_t v = 0; v < kVecs; ++v)
          acc[v] = Simd::fma(x, Simd::load(bp + v * Simd::width), acc[v]);
      }
      for (std::size_t v = 0; v < kVecs; ++v) Simd::store(c + i * cols + j + v * Simd::width, acc[v]);
    }
  }
#endif
  if (full_cols == cols) return;
  const std::size_t rest = cols - full_cols;
  for (std::size_t i2 = 0; i2 < r; ++i2) {
    double* crow = c + i2 * cols + full_cols;
    std::fill(crow, crow + rest, 0.0);
    for (std::size_t p = 0; p < k; ++p) axpy_row(a[i2 * k + p], b + p * cols + full_cols, crow, rest);
  }
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t(Shape{a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace kernels

// A * B
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  Tensor c(Shape{a.rows(), b.cols()});
  kernels::gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

// A * B^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + "^T");
  }
  return matmul(a, kernels::transpose(b));
}

// A^T * B
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner dimensions differ " + to_string(a.shape()) + "^T x " +
                     to_string(b.shape()));
  }
  return matmul(kernels::transpose(a), b);
}

// Row-stacks a and b (same column count).
inline Tensor vstack(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols() || a.rank() != b.rank()) {
    throw ShapeError("vstack: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  std::vector<double> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.storage().begin(), a.storage().end());
  data.insert(data.end(), b.storage().begin(), b.storage().end());
  Shape shape = a.shape();
  shape[0] = a.rows() + b.rows();
  return Tensor(std::move(shape), std::move(data));
}

// Gathers rows by index.
inline Tensor take_rows(const Tensor& a, std::span<const std::size_t> idx) {
  Shape shape = a.shape();
  if (shape.empty()) throw ShapeError("take_rows on a scalar");
  shape[0] = idx.size();
  Tensor out(std::move(shape));
  const std::size_t c = a.cols();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a.rows()) throw std::out_of_range("take_rows: index out of range");
    std::copy_n(a.data() + idx[i] * c, c, out.data() + i * c);
  }
  return out;
}

// Rows [begin, end).
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw std::out_of_range("slice_rows: bad range");
  Shape shape = a.shape();
  shape[0] = end - begin;
  const std::size_t c = a.cols();
  return Tensor(std::move(shape),
                std::vector<double>(a.data() + begin * c, a.data() + end * c));
}

}  // namespace ept
