// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef ATSS_COMMON_HPP_
#define ATSS_COMMON_HPP_

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace atss {

// Malformed files, manifests, corpora. CLI maps these to exit 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finiteness is a contract. CLI maps these to exit 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

#define ATSS_CHECK(cond, msg)                      \
  do {                                             \
    if (!(cond)) throw std::invalid_argument(msg); \
  } while (0)

// mt19937_64 is bit-exact across platforms; the standard distributions are
// not, so uniform/normal transforms are spelled out here.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer on [0, n).
  uint64_t uniform_int(uint64_t n) {
    // Rejection sampling keeps the draw unbiased.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Box-Muller; one value per call, cached pair discarded for simplicity.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Independent child stream; used to hand one seed per sample/tensor.
  uint64_t fork_seed() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace atss

#endif  // ATSS_COMMON_HPP_
