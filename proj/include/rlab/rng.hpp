#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "rlab/tensor.hpp"

namespace rlab {

// Seeded PRNG. The engine is std::mt19937_64, whose output sequence is fixed
// by the standard; the float/int conversions below are written out by hand
// because std::*_distribution results are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 24 bits of mantissa.
  float uniform() { return static_cast<float>(engine_() >> 40) * 0x1.0p-24f; }
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }
  double uniform_double() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n), rejection-sampled (no modulo bias).
  uint64_t below(uint64_t n);
  bool bernoulli(double p) { return uniform_double() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent child stream; used to give each stage its own
  // stream so that adding draws in one stage never shifts another.
  Rng fork(uint64_t salt) const;

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

enum class InitScheme { kUniformScaled, kZeros, kOnes };

// Uniform-scaled draws U(-a, a) with a = sqrt(6 / (fan_in + fan_out)). For a
// rank-2 [out, in] tensor fan_out = out and fan_in = in; rank-1 tensors use
// fan_in = fan_out = n.
Tensor seeded_init(const Shape& shape, InitScheme scheme, Rng& rng);

}  // namespace rlab
