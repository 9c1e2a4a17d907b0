#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "txd/factor.hpp"

namespace txd {

struct LatticeNode {
  Factor factor;
  Role role = Role::Random;
  std::int32_t df = 0;
  int depth = 0;  // longest chain of strictly coarser nodes above this one

  const std::string& key() const noexcept { return factor.name(); }
  /// Random nodes that carry their own variance parameter.
  bool has_parameter() const noexcept { return role == Role::Random; }
};

enum class Structure { Random, Fixed };

/// Fixed and random Hasse diagrams over one unit set. The random structure
/// always contains U and E and is closed under pairwise suprema; a supremum
/// that coincides with a fixed factor is kept as a dependent random node
/// under the fixed factor's name.
class FactorLattice {
 public:
  static FactorLattice build(std::vector<Factor> fixed, std::vector<Factor> random);

  std::size_t n_units() const noexcept { return n_units_; }

  /// Random-structure nodes in table order: by depth, then by the
  /// colexicographic order of the main factors each node lies within.
  const std::vector<LatticeNode>& random_nodes() const noexcept { return random_; }
  const std::vector<LatticeNode>& fixed_nodes() const noexcept { return fixed_; }
  const std::vector<LatticeNode>& nodes(Structure s) const noexcept {
    return s == Structure::Random ? random_ : fixed_;
  }

  /// Covering pairs (coarser index, finer index) for the chosen structure.
  const std::vector<std::pair<std::size_t, std::size_t>>& edges(Structure s) const noexcept {
    return s == Structure::Random ? random_edges_ : fixed_edges_;
  }

  std::optional<std::size_t> find_random(std::string_view key) const;
  std::optional<std::size_t> find_fixed(std::string_view key) const;

  /// finer_eq(a, b): random node a is finer than or equal to node b.
  bool finer_eq(std::size_t a, std::size_t b) const { return finer_[a * random_.size() + b] != 0; }

  /// Index of the random node whose stratum holds the fixed factor: the
  /// supremum of all random nodes finer than or equal to it.
  std::size_t stratum_of_fixed(std::size_t fixed_index) const;

  /// Indices of random nodes with their own variance parameter.
  std::vector<std::size_t> parameter_nodes() const;

  std::map<std::string, std::int32_t> degrees_of_freedom() const;

 private:
  std::size_t n_units_ = 0;
  std::vector<LatticeNode> random_;
  std::vector<LatticeNode> fixed_;
  std::vector<std::pair<std::size_t, std::size_t>> random_edges_;
  std::vector<std::pair<std::size_t, std::size_t>> fixed_edges_;
  std::vector<char> finer_;
};

/// Graphviz rendering: open diamonds for fixed factors, filled diamonds for
/// random ones and half-filled diamonds for dependent random factors.
std::string emit_hasse_dot(const FactorLattice& lattice, Structure which);

}  // namespace txd
