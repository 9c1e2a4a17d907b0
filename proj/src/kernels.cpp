#include "txd/kernels.hpp"

#include <atomic>

namespace txd::kernels {

namespace {

bool cpu_has_avx2() noexcept {
#if defined(TXD_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa detect() noexcept { return cpu_has_avx2() ? Isa::Avx2 : Isa::Scalar; }

std::atomic<Isa>& current() noexcept {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

Isa active_isa() noexcept { return current().load(std::memory_order_relaxed); }

bool avx2_available() noexcept {
  static const bool ok = cpu_has_avx2();
  return ok;
}

void force_isa(Isa isa) noexcept {
  if (isa == Isa::Avx2 && !avx2_available()) isa = Isa::Scalar;
  current().store(isa, std::memory_order_relaxed);
}

void reset_isa() noexcept { current().store(detect(), std::memory_order_relaxed); }

std::string_view isa_name(Isa isa) noexcept {
  return isa == Isa::Avx2 ? "avx2" : "scalar";
}

double dot(std::span<const double> a, std::span<const double> b) noexcept {
#if defined(TXD_HAVE_AVX2)
  if (active_isa() == Isa::Avx2) return avx2::dot(a, b);
#endif
  return scalar::dot(a, b);
}

double sum_squares(std::span<const double> a) noexcept { return dot(a, a); }

void add_level_matches(std::span<double> row, std::span<const std::int32_t> levels,
                       std::int32_t level, double weight) noexcept {
#if defined(TXD_HAVE_AVX2)
  if (active_isa() == Isa::Avx2) return avx2::add_level_matches(row, levels, level, weight);
#endif
  scalar::add_level_matches(row, levels, level, weight);
}

double masked_sum(std::span<const double> row, std::span<const std::int32_t> levels,
                  std::int32_t level) noexcept {
#if defined(TXD_HAVE_AVX2)
  if (active_isa() == Isa::Avx2) return avx2::masked_sum(row, levels, level);
#endif
  return scalar::masked_sum(row, levels, level);
}

}  // namespace txd::kernels
