// AVX2/FMA variants. This translation unit is the only one built with
// -mavx2 -mfma; callers reach it through the dispatcher in kernels.cpp.

#include "txd/kernels.hpp"

#include <immintrin.h>

#include <cassert>
#include <cmath>
#include <cstddef>

namespace txd::kernels::avx2 {

namespace {

inline void two_sum(__m256d a, __m256d b, __m256d& s, __m256d& err) {
  s = _mm256_add_pd(a, b);
  const __m256d bb = _mm256_sub_pd(s, a);
  err = _mm256_add_pd(_mm256_sub_pd(a, _mm256_sub_pd(s, bb)), _mm256_sub_pd(b, bb));
}

inline void two_sum_scalar(double a, double b, double& s, double& err) {
  s = a + b;
  const double bb = s - a;
  err = (a - (s - bb)) + (b - bb);
}

// Widens a 4 x int32 lane compare into a 4 x double mask.
inline __m256d level_mask(const std::int32_t* levels, __m128i target) {
  const __m128i lv = _mm_loadu_si128(reinterpret_cast<const __m128i*>(levels));
  const __m128i eq = _mm_cmpeq_epi32(lv, target);
  return _mm256_castsi256_pd(_mm256_cvtepi32_epi64(eq));
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) noexcept {
  assert(a.size() == b.size());
  const std::size_t n = a.size();
  __m256d s = _mm256_setzero_pd();
  __m256d c = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d x = _mm256_loadu_pd(a.data() + i);
    const __m256d y = _mm256_loadu_pd(b.data() + i);
    const __m256d p = _mm256_mul_pd(x, y);
    const __m256d pe = _mm256_fmsub_pd(x, y, p);
    __m256d t;
    __m256d se;
    two_sum(s, p, t, se);
    s = t;
    c = _mm256_add_pd(c, _mm256_add_pd(se, pe));
  }

  alignas(32) double sl[4];
  alignas(32) double cl[4];
  _mm256_store_pd(sl, s);
  _mm256_store_pd(cl, c);

  // Fold the four lanes with the same error-free scheme.
  double acc = 0.0;
  double comp = cl[0] + cl[1] + cl[2] + cl[3];
  for (double v : sl) {
    double t = 0.0;
    double e = 0.0;
    two_sum_scalar(acc, v, t, e);
    acc = t;
    comp += e;
  }
  for (; i < n; ++i) {
    const double p = a[i] * b[i];
    const double pe = std::fma(a[i], b[i], -p);
    double t = 0.0;
    double e = 0.0;
    two_sum_scalar(acc, p, t, e);
    acc = t;
    comp += e + pe;
  }
  return acc + comp;
}

void add_level_matches(std::span<double> row, std::span<const std::int32_t> levels,
                       std::int32_t level, double weight) noexcept {
  assert(row.size() == levels.size());
  const std::size_t n = row.size();
  const __m128i target = _mm_set1_epi32(level);
  const __m256d w = _mm256_set1_pd(weight);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    const __m256d mask = level_mask(levels.data() + j, target);
    const __m256d r = _mm256_loadu_pd(row.data() + j);
    _mm256_storeu_pd(row.data() + j, _mm256_add_pd(r, _mm256_and_pd(mask, w)));
  }
  for (; j < n; ++j) {
    if (levels[j] == level) row[j] += weight;
  }
}

double masked_sum(std::span<const double> row, std::span<const std::int32_t> levels,
                  std::int32_t level) noexcept {
  assert(row.size() == levels.size());
  const std::size_t n = row.size();
  const __m128i target = _mm_set1_epi32(level);
  __m256d acc = _mm256_setzero_pd();
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    const __m256d mask = level_mask(levels.data() + j, target);
    acc = _mm256_add_pd(acc, _mm256_and_pd(mask, _mm256_loadu_pd(row.data() + j)));
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, acc);
  double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; j < n; ++j) {
    if (levels[j] == level) s += row[j];
  }
  return s;
}

}  // namespace txd::kernels::avx2
