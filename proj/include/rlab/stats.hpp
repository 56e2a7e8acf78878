#pragma once

#include <cstdint>
#include <span>

namespace rlab {

// P[X >= k] for X ~ Binomial(n, p).
double binomial_upper_tail(int64_t k, int64_t n, double p);

struct Interval {
  double low;
  double high;
};
// Two-sided Clopper-Pearson interval for k successes out of n.
Interval binomial_ci(int64_t k, int64_t n, double confidence = 0.95);

// Pearson chi-squared goodness-of-fit p-value against the uniform
// distribution over counts.size() cells.
double chi_squared_uniform_p(std::span<const int64_t> counts);

}  // namespace rlab
