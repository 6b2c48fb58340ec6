#pragma once

// Hand-rolled generators for property tests. Each case draws from its own
// seeded stream so a failure can be replayed from the printed seed.

#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vitscope/tensor.hpp"

namespace vitscope::testing {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo = -1.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(rng_);
  }
  std::size_t index(std::size_t lo, std::size_t hi) {  // inclusive
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  bool coin() { return index(0, 1) == 1; }
  std::vector<double> values(std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform(lo, hi);
    return v;
  }
  Tensor tensor(const Shape& shape, double lo = -1.0, double hi = 1.0,
                bool requires_grad = false) {
    return Tensor::from(shape, values(shape_numel(shape), lo, hi), requires_grad);
  }
  Shape shape(std::size_t rank, std::size_t max_dim = 5) {
    Shape s(rank);
    for (auto& d : s) d = index(1, max_dim);
    return s;
  }
  std::vector<double> unit(std::size_t n) {
    std::normal_distribution<double> g;
    std::vector<double> v(n);
    double norm = 0.0;
    for (auto& x : v) {
      x = g(rng_);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
  }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

/// Runs `body` for `cases` seeds derived from `base`.
template <typename Body>
void for_all(std::size_t cases, std::uint64_t base, Body body) {
  for (std::size_t c = 0; c < cases; ++c) {
    const std::uint64_t seed = base * 1000003u + c;
    SCOPED_TRACE("property case seed " + std::to_string(seed));
    Gen g(seed);
    body(g);
    if (::testing::Test::HasFatalFailure()) return;
  }
}

}  // namespace vitscope::testing
