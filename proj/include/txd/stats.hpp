#pragma once

#include <optional>
#include <span>

namespace txd {

/// Upper tail P(F > x) of the F distribution; df may be fractional.
double f_upper_tail(double x, double df_num, double df_den);

/// Two-sided P(|T| > |t|) for Student's t.
double t_two_sided(double t, double df);

/// Upper tail of chi-square with k degrees of freedom; k = 0 is a point
/// mass at zero.
double chisq_upper_tail(double x, double k);

/// One signed mean square in a linear combination.
struct MsTerm {
  double coef;
  double ms;
  double df;
};

/// Satterthwaite effective df of Σ coef·MS:
/// (Σ c·MS)² / Σ (c·MS)²/df. Empty when the combination is not positive.
std::optional<double> satterthwaite_df(std::span<const MsTerm> terms);

/// Welford accumulator with an order-independent merge.
struct RunningMean {
  long long n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) noexcept;
  void merge(const RunningMean& other) noexcept;
  double variance() const noexcept { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
  double mc_se() const noexcept;
};

}  // namespace txd
