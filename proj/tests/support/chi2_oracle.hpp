#pragma once

#include <cmath>

namespace changeseg::testing {

// Chi-squared CDF by composite Simpson integration of the density, written
// independently of the incomplete-gamma code under test. The substitution
// t = u^2 removes the t^(k/2 - 1) singularity at 0 for k = 1:
//   F(T) = int_0^sqrt(T) 2 u^(k-1) exp(-u^2 / 2) / (2^(k/2) Gamma(k/2)) du
inline double chi2_cdf_simpson(int k, double t, int intervals = 4000) {
  if (t <= 0.0) return 0.0;
  const double upper = std::sqrt(t);
  const double log_norm = 0.5 * k * std::log(2.0) + std::lgamma(0.5 * k);
  auto g = [&](double u) {
    if (u == 0.0) return k == 1 ? 2.0 * std::exp(-log_norm) : 0.0;
    return 2.0 * std::exp((k - 1) * std::log(u) - 0.5 * u * u - log_norm);
  };
  const double h = upper / intervals;
  double s = g(0.0) + g(upper);
  for (int i = 1; i < intervals; ++i) s += (i % 2 ? 4.0 : 2.0) * g(i * h);
  return s * h / 3.0;
}

// Quantile by bisection on the Simpson CDF.
inline double chi2_quantile_bisect(int k, double alpha) {
  double lo = 0.0;
  double hi = 1.0;
  while (chi2_cdf_simpson(k, hi) < alpha) hi *= 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-12 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (chi2_cdf_simpson(k, mid) < alpha ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace changeseg::testing
