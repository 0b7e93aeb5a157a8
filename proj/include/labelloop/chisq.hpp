// Copyright 2026 The labelloop Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

namespace labelloop::stats {

namespace detail {

inline constexpr int kMaxIterations = 1000;
inline constexpr double kEps = 1e-16;
inline constexpr double kTiny = 1e-300;

// P(a, x) by its power series; converges quickly for x < a + 1.
inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < kMaxIterations; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * kEps) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Q(a, x) by the Legendre continued fraction (modified Lentz); x >= a + 1.
inline double gamma_q_continued_fraction(double a, double x) {
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
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Regularized upper incomplete gamma Q(a, x) = Γ(a, x) / Γ(a).
inline double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0)) throw std::domain_error("regularized_gamma_q: a must be positive");
  if (x < 0.0 || std::isnan(x)) throw std::domain_error("regularized_gamma_q: x must be non-negative");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_continued_fraction(a, x);
}

/// Survival function of the chi-square distribution with `dof` degrees of
/// freedom: P(X >= x).
inline double chi_square_sf(double x, double dof = 1.0) {
  if (x <= 0.0) return 1.0;
  return regularized_gamma_q(dof / 2.0, x / 2.0);
}

}  // namespace labelloop::stats
