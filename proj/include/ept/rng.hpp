#pragma once

// Counter-based random streams.
//
// A stream is identified by (seed, label). Its i-th 64-bit output is a pure
// function of (key, i), so the state of a stream is just its counter and
// adding a new consumer with a fresh label never shifts an existing stream.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "ept/tensor.hpp"

namespace ept {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

class Stream {
public:
  Stream(std::uint64_t seed, std::string_view label, std::uint64_t counter = 0) noexcept
      : key_(detail::splitmix64(seed ^ detail::splitmix64(detail::fnv1a(label)))),
        counter_(counter) {}

  // Sub-stream, e.g. one per epoch.
  Stream fork(std::uint64_t index) const noexcept {
    Stream s = *this;
    s.key_ = detail::splitmix64(key_ ^ detail::splitmix64(index + 0x5851F42D4C957F2DULL));
    s.counter_ = 0;
    return s;
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t x = key_ + 0xD1B54A32D192ED03ULL * ++counter_;
    return detail::splitmix64(detail::splitmix64(x) ^ key_);
  }

  // Uniform on [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; the bias is < n / 2^64.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (cosine branch only, two draws per variate).
  double normal() noexcept {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t counter() const noexcept { return counter_; }
  void set_counter(std::uint64_t c) noexcept { counter_ = c; }

private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

// Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> permutation(std::size_t n, Stream& stream) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(stream.below(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

inline Tensor normal_matrix(std::size_t rows, std::size_t cols, Stream& stream) {
  Tensor t(Shape{rows, cols});
  for (double& v : t.values()) v = stream.normal();
  return t;
}

}  // namespace ept
