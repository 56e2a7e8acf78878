#include "rlab/stats.hpp"

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>

#include "rlab/error.hpp"

namespace rlab {

double binomial_upper_tail(int64_t k, int64_t n, double p) {
  if (n < 0 || p < 0.0 || p > 1.0) throw ContractError("invalid binomial parameters");
  if (k <= 0) return 1.0;
  if (k > n) return 0.0;
  boost::math::binomial_distribution<double> d(static_cast<double>(n), p);
  return boost::math::cdf(boost::math::complement(d, static_cast<double>(k - 1)));
}

Interval binomial_ci(int64_t k, int64_t n, double confidence) {
  using boost::math::binomial_distribution;
  if (n <= 0 || k < 0 || k > n) throw ContractError("invalid binomial counts");
  const double alpha = (1.0 - confidence) / 2.0;
  const double nn = static_cast<double>(n), kk = static_cast<double>(k);
  return {binomial_distribution<double>::find_lower_bound_on_p(nn, kk, alpha),
          binomial_distribution<double>::find_upper_bound_on_p(nn, kk, alpha)};
}

double chi_squared_uniform_p(std::span<const int64_t> counts) {
  if (counts.size() < 2) throw ContractError("chi-squared test needs >= 2 cells");
  int64_t total = 0;
  for (int64_t c : counts) total += c;
  if (total == 0) throw ContractError("chi-squared test needs observations");
  const double expect = static_cast<double>(total) / static_cast<double>(counts.size());
  double stat = 0.0;
  for (int64_t c : counts) stat += (static_cast<double>(c) - expect) * (static_cast<double>(c) - expect) / expect;
  boost::math::chi_squared_distribution<double> d(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(d, stat));
}

}  // namespace rlab
