#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <utility>
#include <vector>

namespace txd {

using Rng = std::mt19937_64;

/// splitmix64 finaliser.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Derives an independent stream seed from a master seed and a tag path,
/// e.g. derive_seed(master, {stream, centre, batch}). The result depends on
/// the tags only, never on how many streams were derived before.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags) noexcept;

Rng make_rng(std::uint64_t master, std::initializer_list<std::uint64_t> tags);

/// Unbiased draw from [0, bound) by rejection; bound must be positive.
std::uint64_t uniform_below(Rng& rng, std::uint64_t bound);

/// Fisher–Yates shuffle driven by uniform_below, so results do not depend
/// on the standard library's distribution implementations.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_below(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

/// Standard normal deviate (Marsaglia polar method).
double standard_normal(Rng& rng);

/// Uniform deviate in (0, 1).
double uniform01(Rng& rng);

/// Stream tags, kept stable so seeds stay reproducible across versions.
namespace stream {
inline constexpr std::uint64_t kPermute = 0x7065726d;      // block permutations
inline constexpr std::uint64_t kIntervention = 0x696e7476; // intervention lists
inline constexpr std::uint64_t kTherapist = 0x74686572;    // therapist lists
inline constexpr std::uint64_t kEffects = 0x65666678;      // random effects
inline constexpr std::uint64_t kCovariate = 0x636f7661;    // patient covariates
inline constexpr std::uint64_t kReplicate = 0x7265706c;    // per-replicate master
}  // namespace stream

}  // namespace txd
