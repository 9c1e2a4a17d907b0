#include "txd/lattice.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "txd/error.hpp"

namespace txd {

namespace {

std::optional<std::size_t> find_partition(const std::vector<LatticeNode>& nodes, const Factor& f) {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].factor.same_partition(f)) return i;
  }
  return std::nullopt;
}

std::vector<char> order_matrix(const std::vector<LatticeNode>& nodes) {
  const std::size_t n = nodes.size();
  std::vector<char> m(n * n, 0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) m[a * n + b] = is_finer(nodes[a].factor, nodes[b].factor);
  }
  return m;
}

// Orders nodes by depth, then by the colex order of the ranks of the main
// factors (single-component nodes) each node is finer than.
void sort_nodes(std::vector<LatticeNode>& nodes, const std::vector<Factor>& mains) {
  const std::size_t n = nodes.size();
  auto finer = order_matrix(nodes);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return nodes[a].factor.n_levels() < nodes[b].factor.n_levels();
  });
  // Longest chain from the top; processing coarse-to-fine by level count is
  // a valid topological order because strictly coarser means fewer levels.
  for (std::size_t ii = 0; ii < n; ++ii) {
    const std::size_t a = idx[ii];
    int depth = 0;
    for (std::size_t jj = 0; jj < ii; ++jj) {
      const std::size_t b = idx[jj];
      if (finer[a * n + b] && !nodes[a].factor.same_partition(nodes[b].factor)) {
        depth = std::max(depth, nodes[b].depth + 1);
      }
    }
    nodes[a].depth = depth;
  }

  auto signature = [&](const LatticeNode& node) {
    std::vector<std::pair<int, std::string>> s;
    for (const auto& m : mains) {
      if (is_finer(node.factor, m)) s.emplace_back(component_rank(m.name()), m.name());
    }
    std::sort(s.begin(), s.end());
    return s;
  };
  std::vector<std::vector<std::pair<int, std::string>>> sig(n);
  for (std::size_t i = 0; i < n; ++i) sig[i] = signature(nodes[i]);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (nodes[a].depth != nodes[b].depth) return nodes[a].depth < nodes[b].depth;
    const auto& sa = sig[a];
    const auto& sb = sig[b];
    auto ia = sa.rbegin();
    auto ib = sb.rbegin();
    for (; ia != sa.rend() && ib != sb.rend(); ++ia, ++ib) {
      if (*ia != *ib) return *ia < *ib;
    }
    return sa.size() < sb.size();
  });
  std::vector<LatticeNode> sorted;
  sorted.reserve(n);
  for (std::size_t i : order) sorted.push_back(std::move(nodes[i]));
  nodes = std::move(sorted);
}

void assign_df(std::vector<LatticeNode>& nodes, const std::vector<char>& finer) {
  const std::size_t n = nodes.size();
  // Nodes are sorted so every strictly coarser node precedes a finer one.
  for (std::size_t a = 0; a < n; ++a) {
    std::int64_t df = nodes[a].factor.n_levels();
    for (std::size_t b = 0; b < a; ++b) {
      if (finer[a * n + b]) df -= nodes[b].df;
    }
    if (df < 0) {
      throw StructuralError("negative degrees of freedom for '" + nodes[a].key() +
                            "': the factors do not form a valid design");
    }
    nodes[a].df = static_cast<std::int32_t>(df);
  }
}

std::vector<std::pair<std::size_t, std::size_t>> covering_edges(const std::vector<LatticeNode>& nodes,
                                                                const std::vector<char>& finer) {
  const std::size_t n = nodes.size();
  auto strictly = [&](std::size_t a, std::size_t b) { return a != b && finer[a * n + b]; };
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t lo = 0; lo < n; ++lo) {
    for (std::size_t hi = 0; hi < n; ++hi) {
      if (!strictly(lo, hi)) continue;
      bool covered = true;
      for (std::size_t mid = 0; mid < n && covered; ++mid) {
        if (strictly(lo, mid) && strictly(mid, hi)) covered = false;
      }
      if (covered) edges.emplace_back(hi, lo);
    }
  }
  std::sort(edges.begin(), edges.end());
  return edges;
}

}  // namespace

FactorLattice FactorLattice::build(std::vector<Factor> fixed, std::vector<Factor> random) {
  if (fixed.empty() && random.empty()) throw StructuralError("lattice needs at least one factor");
  const std::size_t n_units = !fixed.empty() ? fixed.front().n_units() : random.front().n_units();
  for (const auto& f : fixed) {
    if (f.n_units() != n_units) throw StructuralError("factor '" + f.name() + "' has the wrong unit count");
  }
  for (const auto& f : random) {
    if (f.n_units() != n_units) throw StructuralError("factor '" + f.name() + "' has the wrong unit count");
  }

  FactorLattice lat;
  lat.n_units_ = n_units;
  const Factor top = Factor::universal(n_units);
  const Factor bottom = Factor::equality(n_units);

  // Fixed structure: U plus the declared fixed factors.
  lat.fixed_.push_back({top, Role::Universal});
  for (auto& f : fixed) {
    if (f.same_partition(top)) continue;
    if (find_partition(lat.fixed_, f)) continue;
    lat.fixed_.push_back({f.with_role(Role::Fixed), Role::Fixed});
  }

  auto fixed_match = [&](const Factor& f) -> std::optional<std::size_t> {
    for (std::size_t i = 1; i < lat.fixed_.size(); ++i) {
      if (lat.fixed_[i].factor.same_partition(f)) return i;
    }
    return std::nullopt;
  };

  // Random structure, closed under suprema.
  auto& nodes = lat.random_;
  nodes.push_back({top, Role::Universal});
  nodes.push_back({bottom, Role::Equality});
  for (auto& f : random) {
    if (f.same_partition(top) || f.same_partition(bottom)) {
      throw StructuralError("random term '" + f.name() +
                            "' coincides with the universal or equality factor");
    }
    if (find_partition(nodes, f)) continue;
    if (auto fi = fixed_match(f)) {
      nodes.push_back({lat.fixed_[*fi].factor.with_role(Role::DependentRandom), Role::DependentRandom});
    } else {
      nodes.push_back({f.with_role(Role::Random), Role::Random});
    }
  }
  for (bool grew = true; grew;) {
    grew = false;
    const std::size_t n = nodes.size();
    for (std::size_t a = 0; a < n && !grew; ++a) {
      for (std::size_t b = a + 1; b < n && !grew; ++b) {
        Factor s = supremum(nodes[a].factor, nodes[b].factor);
        if (find_partition(nodes, s)) continue;
        if (auto fi = fixed_match(s)) {
          nodes.push_back({lat.fixed_[*fi].factor.with_role(Role::DependentRandom), Role::DependentRandom});
        } else {
          // A supremum with no declared counterpart carries no parameter.
          nodes.push_back({s.with_role(Role::DependentRandom), Role::DependentRandom});
        }
        grew = true;
      }
    }
  }

  std::vector<Factor> mains;
  auto add_main = [&](const Factor& f) {
    if (split_key(f.name()).size() == 1 && f.role() != Role::Universal && f.role() != Role::Equality) {
      for (const auto& m : mains) {
        if (m.name() == f.name()) return;
      }
      mains.push_back(f);
    }
  };
  for (const auto& n : nodes) add_main(n.factor);
  for (const auto& n : lat.fixed_) add_main(n.factor);

  sort_nodes(nodes, mains);
  lat.finer_ = order_matrix(nodes);
  assign_df(nodes, lat.finer_);
  std::int64_t total = 0;
  for (const auto& n : nodes) total += n.df;
  if (total != static_cast<std::int64_t>(n_units)) {
    throw StructuralError("stratum degrees of freedom sum to " + std::to_string(total) + ", not " +
                          std::to_string(n_units));
  }
  lat.random_edges_ = covering_edges(nodes, lat.finer_);

  sort_nodes(lat.fixed_, mains);
  const auto fixed_order = order_matrix(lat.fixed_);
  assign_df(lat.fixed_, fixed_order);
  lat.fixed_edges_ = covering_edges(lat.fixed_, fixed_order);
  return lat;
}

std::optional<std::size_t> FactorLattice::find_random(std::string_view key) const {
  for (std::size_t i = 0; i < random_.size(); ++i) {
    if (random_[i].key() == key) return i;
  }
  return std::nullopt;
}

std::optional<std::size_t> FactorLattice::find_fixed(std::string_view key) const {
  for (std::size_t i = 0; i < fixed_.size(); ++i) {
    if (fixed_[i].key() == key) return i;
  }
  return std::nullopt;
}

std::size_t FactorLattice::stratum_of_fixed(std::size_t fixed_index) const {
  const Factor& f = fixed_.at(fixed_index).factor;
  Factor acc = Factor::equality(n_units_);
  for (const auto& node : random_) {
    if (is_finer(node.factor, f)) acc = supremum(acc, node.factor);
  }
  auto hit = find_partition(random_, acc);
  if (!hit) throw StructuralError("no stratum found for fixed factor '" + f.name() + "'");
  return *hit;
}

std::vector<std::size_t> FactorLattice::parameter_nodes() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < random_.size(); ++i) {
    if (random_[i].has_parameter()) out.push_back(i);
  }
  return out;
}

std::map<std::string, std::int32_t> FactorLattice::degrees_of_freedom() const {
  std::map<std::string, std::int32_t> out;
  for (const auto& n : random_) out[n.key()] = n.df;
  return out;
}

std::string emit_hasse_dot(const FactorLattice& lattice, Structure which) {
  const auto& nodes = lattice.nodes(which);
  std::ostringstream os;
  os << "digraph " << (which == Structure::Random ? "random" : "fixed") << " {\n";
  os << "  rankdir=TB;\n";
  os << "  node [shape=diamond, fontname=\"Helvetica\"];\n";
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    os << "  n" << i << " [label=\"" << display_key(n.key()) << "\\n" << n.factor.n_levels() << " | "
       << n.df << "\"";
    if (which == Structure::Fixed) {
      os << ", style=filled, fillcolor=white";
    } else if (n.role == Role::DependentRandom) {
      os << ", style=filled, fillcolor=\"black;0.5:white\", class=dependent";
    } else {
      os << ", style=filled, fillcolor=black, fontcolor=white";
    }
    os << "];\n";
  }
  for (const auto& [hi, lo] : lattice.edges(which)) os << "  n" << hi << " -> n" << lo << ";\n";
  os << "}\n";
  return os.str();
}

}  // namespace txd
