#include "changeseg/chi2.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "changeseg/error.hpp"

namespace changeseg {

namespace {

constexpr int kMaxIterations = 10000;
constexpr double kEps = 1e-16;
constexpr double kTiny = 1e-300;

double lower_gamma_series(double a, double x) {
  double ap = a;
  double del = 1.0 / a;
  double sum = del;
  for (int n = 0; n < kMaxIterations; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kEps) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Q(a, x) by the modified Lentz continued fraction.
double upper_gamma_fraction(double a, double x) {
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIterations; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

double chi2_density(int k, double t) {
  const double a = 0.5 * k;
  if (t <= 0.0) return k == 2 ? 0.5 : (k < 2 ? std::numeric_limits<double>::infinity() : 0.0);
  return std::exp((a - 1.0) * std::log(t) - 0.5 * t - a * std::log(2.0) - std::lgamma(a));
}

}  // namespace

double regularized_lower_gamma(double a, double x) {
  if (!(a > 0.0)) throw InvalidArgument("regularized_lower_gamma: a must be positive");
  if (x <= 0.0) return 0.0;
  if (x < a + 1.0) return lower_gamma_series(a, x);
  return 1.0 - upper_gamma_fraction(a, x);
}

double chi2_quantile(int k, double alpha) {
  if (k < 1) throw InvalidArgument("chi2_quantile: degrees of freedom must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw InvalidArgument("chi2_quantile: alpha must lie in (0, 1), got " + std::to_string(alpha));
  }
  const double a = 0.5 * k;
  auto cdf = [a](double t) { return regularized_lower_gamma(a, 0.5 * t); };

  double lo = 0.0;
  double hi = std::max(2.0 * k, 1.0);
  while (cdf(hi) < alpha) {
    lo = hi;
    hi *= 2.0;
  }

  // Newton steps, falling back to bisection whenever a step leaves the
  // bracket.
  double t = 0.5 * (lo + hi);
  for (int it = 0; it < 500; ++it) {
    const double f = cdf(t) - alpha;
    if (f == 0.0) return t;
    if (f < 0.0) {
      lo = t;
    } else {
      hi = t;
    }
    if (std::abs(f) < 1e-15 || hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi) break;
    const double slope = chi2_density(k, t);
    double next = slope > 0.0 && std::isfinite(slope) ? t - f / slope : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    t = next;
  }
  return t;
}

}  // namespace changeseg
