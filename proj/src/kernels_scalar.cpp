#include "txd/kernels.hpp"

#include <cassert>
#include <cmath>
#include <cstddef>

namespace txd::kernels::scalar {

namespace {

// Knuth's branch-free error-free transformation: a + b == s + err exactly.
inline void two_sum(double a, double b, double& s, double& err) noexcept {
  s = a + b;
  const double bb = s - a;
  err = (a - (s - bb)) + (b - bb);
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) noexcept {
  assert(a.size() == b.size());
  double s = 0.0;
  double c = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double p = a[i] * b[i];
    const double pe = std::fma(a[i], b[i], -p);
    double t = 0.0;
    double se = 0.0;
    two_sum(s, p, t, se);
    s = t;
    c += se + pe;
  }
  return s + c;
}

void add_level_matches(std::span<double> row, std::span<const std::int32_t> levels,
                       std::int32_t level, double weight) noexcept {
  assert(row.size() == levels.size());
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (levels[j] == level) row[j] += weight;
  }
}

double masked_sum(std::span<const double> row, std::span<const std::int32_t> levels,
                  std::int32_t level) noexcept {
  assert(row.size() == levels.size());
  double s = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (levels[j] == level) s += row[j];
  }
  return s;
}

}  // namespace txd::kernels::scalar
