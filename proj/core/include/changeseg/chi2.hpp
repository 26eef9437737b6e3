#pragma once

namespace changeseg {

// Regularized lower incomplete gamma P(a, x) = gamma(a, x) / Gamma(a).
// Series expansion for x < a + 1, Lentz continued fraction otherwise.
double regularized_lower_gamma(double a, double x);

// t such that P(k/2, t/2) = alpha, i.e. the alpha-quantile of the
// chi-squared distribution with k degrees of freedom. Bracketed
// Newton/bisection to |P - alpha| < 1e-12. Throws InvalidArgument unless
// k >= 1 and 0 < alpha < 1.
double chi2_quantile(int k, double alpha);

}  // namespace changeseg
