#pragma once

// Data-parallel inner loops. Every kernel has a portable scalar reference in
// txd::kernels::scalar and, on x86-64 builds, an AVX2/FMA variant in
// txd::kernels::avx2. The unqualified entry points dispatch at runtime.

#include <cstdint>
#include <span>
#include <string_view>

namespace txd::kernels {

enum class Isa { Scalar, Avx2 };

/// Instruction set the dispatching entry points currently use.
Isa active_isa() noexcept;

/// True when the CPU and the build both support the AVX2 variants.
bool avx2_available() noexcept;

/// Pins dispatch to a specific variant (tests and benchmarks). Requesting
/// Avx2 on a machine without it falls back to Scalar.
void force_isa(Isa isa) noexcept;

/// Restores automatic selection.
void reset_isa() noexcept;

std::string_view isa_name(Isa isa) noexcept;

/// Dot product accumulated in twice-working precision (compensated
/// TwoProduct/TwoSum), so cancellation in sums of squares is benign.
double dot(std::span<const double> a, std::span<const double> b) noexcept;

/// Compensated sum of squares.
double sum_squares(std::span<const double> a) noexcept;

/// row[j] += weight wherever levels[j] == level.
void add_level_matches(std::span<double> row, std::span<const std::int32_t> levels,
                       std::int32_t level, double weight) noexcept;

/// Sum of row[j] over the positions where levels[j] == level.
double masked_sum(std::span<const double> row, std::span<const std::int32_t> levels,
                  std::int32_t level) noexcept;

namespace scalar {
double dot(std::span<const double> a, std::span<const double> b) noexcept;
void add_level_matches(std::span<double> row, std::span<const std::int32_t> levels,
                       std::int32_t level, double weight) noexcept;
double masked_sum(std::span<const double> row, std::span<const std::int32_t> levels,
                  std::int32_t level) noexcept;
}  // namespace scalar

#if defined(TXD_HAVE_AVX2)
namespace avx2 {
double dot(std::span<const double> a, std::span<const double> b) noexcept;
void add_level_matches(std::span<double> row, std::span<const std::int32_t> levels,
                       std::int32_t level, double weight) noexcept;
double masked_sum(std::span<const double> row, std::span<const std::int32_t> levels,
                  std::int32_t level) noexcept;
}  // namespace avx2
#endif

}  // namespace txd::kernels
