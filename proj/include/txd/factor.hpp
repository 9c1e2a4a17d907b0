#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace txd {

enum class Role { Fixed, Random, DependentRandom, Universal, Equality };

std::string_view role_name(Role role) noexcept;

/// A partition of the experimental units 0..N-1. Levels are relabelled
/// canonically (first occurrence in unit order), so two factors describe
/// the same partition iff their level vectors are equal.
class Factor {
 public:
  Factor() = default;
  Factor(std::string name, std::span<const std::int32_t> level_of, Role role = Role::Random);

  static Factor universal(std::size_t n_units);
  static Factor equality(std::size_t n_units);

  const std::string& name() const noexcept { return name_; }
  Role role() const noexcept { return role_; }
  std::size_t n_units() const noexcept { return levels_.size(); }
  std::int32_t n_levels() const noexcept { return n_levels_; }
  std::int32_t level(std::size_t unit) const { return levels_[unit]; }
  std::span<const std::int32_t> levels() const noexcept { return levels_; }

  /// Number of units at each level.
  const std::vector<std::int32_t>& level_sizes() const noexcept { return sizes_; }

  /// True when every level has the same number of units.
  bool is_uniform() const noexcept;

  Factor renamed(std::string name) const;
  Factor with_role(Role role) const;

  bool same_partition(const Factor& other) const noexcept { return levels_ == other.levels_; }

 private:
  std::string name_;
  Role role_ = Role::Random;
  std::vector<std::int32_t> levels_;
  std::vector<std::int32_t> sizes_;
  std::int32_t n_levels_ = 0;
};

/// F∧G: levels are the occupied (F, G) level pairs.
Factor infimum(const Factor& f, const Factor& g, std::string name = {});

/// F∨G: connected components of the level co-occurrence graph.
Factor supremum(const Factor& f, const Factor& g, std::string name = {});

/// True iff every class of F lies inside a class of G.
bool is_finer(const Factor& f, const Factor& g);

/// Combinatorial orthogonality: for every occupied (f, g) pair the count
/// equals n_f n_g / n_{F∨G class}. Both factors must be uniform for the
/// stratum decomposition to be exact, which is checked separately.
bool are_orthogonal(const Factor& f, const Factor& g);

/// Canonical component order for interaction keys: I, C, T, B, then the
/// remaining names alphabetically.
int component_rank(std::string_view component) noexcept;

/// Splits "I:T:B" into components.
std::vector<std::string> split_key(std::string_view key);

/// Joins components in canonical order, dropping duplicates.
std::string join_key(std::vector<std::string> components);

/// "I:T:B" -> "I∧T∧B".
std::string display_key(std::string_view key);

}  // namespace txd
