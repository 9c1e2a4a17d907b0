#include "txd/stats.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <limits>

namespace txd {

double f_upper_tail(double x, double df_num, double df_den) {
  if (!(x > 0.0)) return 1.0;
  if (std::isinf(x)) return 0.0;
  boost::math::fisher_f_distribution<double> dist(df_num, df_den);
  return boost::math::cdf(boost::math::complement(dist, x));
}

double t_two_sided(double t, double df) {
  if (t == 0.0) return 1.0;
  if (std::isinf(t)) return 0.0;
  boost::math::students_t_distribution<double> dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

double chisq_upper_tail(double x, double k) {
  if (k <= 0.0) return x > 0.0 ? 0.0 : 1.0;
  if (!(x > 0.0)) return 1.0;
  boost::math::chi_squared_distribution<double> dist(k);
  return boost::math::cdf(boost::math::complement(dist, x));
}

std::optional<double> satterthwaite_df(std::span<const MsTerm> terms) {
  double num = 0.0;
  double den = 0.0;
  for (const auto& t : terms) {
    const double v = t.coef * t.ms;
    num += v;
    if (v != 0.0) den += v * v / t.df;
  }
  if (!(num > 0.0) || !(den > 0.0)) return std::nullopt;
  return num * num / den;
}

void RunningMean::add(double x) noexcept {
  ++n;
  const double d = x - mean;
  mean += d / static_cast<double>(n);
  m2 += d * (x - mean);
}

void RunningMean::merge(const RunningMean& o) noexcept {
  if (o.n == 0) return;
  if (n == 0) {
    *this = o;
    return;
  }
  const long long total = n + o.n;
  const double d = o.mean - mean;
  mean += d * static_cast<double>(o.n) / static_cast<double>(total);
  m2 += o.m2 + d * d * static_cast<double>(n) * static_cast<double>(o.n) / static_cast<double>(total);
  n = total;
}

double RunningMean::mc_se() const noexcept {
  return n > 1 ? std::sqrt(variance() / static_cast<double>(n)) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace txd
