#include "txd/factor.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_map>

#include "txd/error.hpp"

namespace txd {

std::string_view role_name(Role role) noexcept {
  switch (role) {
    case Role::Fixed: return "fixed";
    case Role::Random: return "random";
    case Role::DependentRandom: return "dependent-random";
    case Role::Universal: return "universal";
    case Role::Equality: return "equality";
  }
  return "unknown";
}

Factor::Factor(std::string name, std::span<const std::int32_t> level_of, Role role)
    : name_(std::move(name)), role_(role), levels_(level_of.size()) {
  std::unordered_map<std::int32_t, std::int32_t> relabel;
  relabel.reserve(level_of.size());
  for (std::size_t u = 0; u < level_of.size(); ++u) {
    auto [it, inserted] = relabel.try_emplace(level_of[u], n_levels_);
    if (inserted) {
      ++n_levels_;
      sizes_.push_back(0);
    }
    levels_[u] = it->second;
    ++sizes_[static_cast<std::size_t>(it->second)];
  }
}

Factor Factor::universal(std::size_t n_units) {
  std::vector<std::int32_t> lv(n_units, 0);
  return Factor("U", lv, Role::Universal);
}

Factor Factor::equality(std::size_t n_units) {
  std::vector<std::int32_t> lv(n_units);
  std::iota(lv.begin(), lv.end(), 0);
  return Factor("E", lv, Role::Equality);
}

bool Factor::is_uniform() const noexcept {
  return std::adjacent_find(sizes_.begin(), sizes_.end(), std::not_equal_to<>()) == sizes_.end();
}

Factor Factor::renamed(std::string name) const {
  Factor f = *this;
  f.name_ = std::move(name);
  return f;
}

Factor Factor::with_role(Role role) const {
  Factor f = *this;
  f.role_ = role;
  return f;
}

namespace {

void require_same_units(const Factor& f, const Factor& g) {
  if (f.n_units() != g.n_units()) {
    throw StructuralError("factors '" + f.name() + "' and '" + g.name() +
                          "' are defined on different unit sets (" + std::to_string(f.n_units()) +
                          " vs " + std::to_string(g.n_units()) + ")");
  }
}

std::string default_inf_name(const Factor& f, const Factor& g) {
  if (g.role() == Role::Universal) return f.name();
  if (f.role() == Role::Universal) return g.name();
  if (f.role() == Role::Equality || g.role() == Role::Equality) return "E";
  auto parts = split_key(f.name());
  auto more = split_key(g.name());
  parts.insert(parts.end(), more.begin(), more.end());
  return join_key(std::move(parts));
}

struct DisjointSets {
  std::vector<std::int32_t> parent;
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::int32_t find(std::int32_t x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      auto& p = parent[static_cast<std::size_t>(x)];
      p = parent[static_cast<std::size_t>(p)];
      x = p;
    }
    return x;
  }
  void unite(std::int32_t a, std::int32_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }
};

}  // namespace

Factor infimum(const Factor& f, const Factor& g, std::string name) {
  require_same_units(f, g);
  const auto ng = static_cast<std::int64_t>(g.n_levels());
  std::vector<std::int32_t> combined(f.n_units());
  std::unordered_map<std::int64_t, std::int32_t> pairs;
  for (std::size_t u = 0; u < f.n_units(); ++u) {
    const std::int64_t key = static_cast<std::int64_t>(f.level(u)) * ng + g.level(u);
    auto [it, inserted] = pairs.try_emplace(key, static_cast<std::int32_t>(pairs.size()));
    combined[u] = it->second;
  }
  if (name.empty()) name = default_inf_name(f, g);
  Role role = Role::Random;
  if (static_cast<std::size_t>(pairs.size()) == f.n_units()) role = Role::Equality;
  if (pairs.size() == 1) role = Role::Universal;
  return Factor(std::move(name), combined, role);
}

Factor supremum(const Factor& f, const Factor& g, std::string name) {
  require_same_units(f, g);
  // Union-find over F levels [0, nf) and G levels [nf, nf + ng).
  const std::int32_t nf = f.n_levels();
  DisjointSets sets(static_cast<std::size_t>(nf + g.n_levels()));
  for (std::size_t u = 0; u < f.n_units(); ++u) sets.unite(f.level(u), nf + g.level(u));
  std::vector<std::int32_t> lv(f.n_units());
  for (std::size_t u = 0; u < f.n_units(); ++u) lv[u] = sets.find(f.level(u));
  Factor out(name.empty() ? "sup(" + f.name() + "," + g.name() + ")" : std::move(name), lv);
  if (out.n_levels() == 1) return Factor(out.name(), out.levels(), Role::Universal);
  return out;
}

bool is_finer(const Factor& f, const Factor& g) {
  require_same_units(f, g);
  std::vector<std::int32_t> image(static_cast<std::size_t>(f.n_levels()), -1);
  for (std::size_t u = 0; u < f.n_units(); ++u) {
    auto& slot = image[static_cast<std::size_t>(f.level(u))];
    if (slot < 0) {
      slot = g.level(u);
    } else if (slot != g.level(u)) {
      return false;
    }
  }
  return true;
}

bool are_orthogonal(const Factor& f, const Factor& g) {
  require_same_units(f, g);
  const Factor s = supremum(f, g);
  const Factor fg = infimum(f, g);
  // Class sizes of F∨G, and F, G level sizes.
  const auto& nf = f.level_sizes();
  const auto& ng = g.level_sizes();
  const auto& ns = s.level_sizes();
  const auto& nfg = fg.level_sizes();
  // Every (f, g) pair inside a common supremum class must be occupied with
  // count n_f n_g / n_s; checking occupied pairs plus the pair total suffices.
  std::vector<std::int64_t> expected_pairs(static_cast<std::size_t>(s.n_levels()), 0);
  std::vector<std::int64_t> f_in_s(static_cast<std::size_t>(s.n_levels()), 0);
  std::vector<std::int64_t> g_in_s(static_cast<std::size_t>(s.n_levels()), 0);
  std::vector<char> seen_f(static_cast<std::size_t>(f.n_levels()), 0);
  std::vector<char> seen_g(static_cast<std::size_t>(g.n_levels()), 0);
  std::vector<char> seen_fg(static_cast<std::size_t>(fg.n_levels()), 0);
  std::vector<std::int64_t> occupied(static_cast<std::size_t>(s.n_levels()), 0);
  for (std::size_t u = 0; u < f.n_units(); ++u) {
    const auto si = static_cast<std::size_t>(s.level(u));
    const auto fi = static_cast<std::size_t>(f.level(u));
    const auto gi = static_cast<std::size_t>(g.level(u));
    const auto pi = static_cast<std::size_t>(fg.level(u));
    if (!seen_f[fi]) { seen_f[fi] = 1; ++f_in_s[si]; }
    if (!seen_g[gi]) { seen_g[gi] = 1; ++g_in_s[si]; }
    if (!seen_fg[pi]) {
      seen_fg[pi] = 1;
      ++occupied[si];
      // n_fg * n_s == n_f * n_g
      if (static_cast<std::int64_t>(nfg[pi]) * ns[si] !=
          static_cast<std::int64_t>(nf[fi]) * ng[gi]) {
        return false;
      }
    }
  }
  for (std::size_t si = 0; si < ns.size(); ++si) {
    if (occupied[si] != f_in_s[si] * g_in_s[si]) return false;
  }
  return true;
}

int component_rank(std::string_view component) noexcept {
  static constexpr std::string_view order[] = {"I", "C", "T", "B"};
  for (int i = 0; i < 4; ++i) {
    if (component == order[i]) return i;
  }
  return 4;
}

std::vector<std::string> split_key(std::string_view key) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= key.size()) {
    const std::size_t pos = key.find(':', start);
    const std::size_t end = pos == std::string_view::npos ? key.size() : pos;
    if (end > start) parts.emplace_back(key.substr(start, end - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::string join_key(std::vector<std::string> components) {
  std::sort(components.begin(), components.end(), [](const std::string& a, const std::string& b) {
    const int ra = component_rank(a);
    const int rb = component_rank(b);
    return ra != rb ? ra < rb : a < b;
  });
  components.erase(std::unique(components.begin(), components.end()), components.end());
  std::string out;
  for (const auto& c : components) {
    if (!out.empty()) out += ':';
    out += c;
  }
  return out;
}

std::string display_key(std::string_view key) {
  std::string out;
  for (char ch : key) {
    if (ch == ':') {
      out += "∧";
    } else {
      out += ch;
    }
  }
  return out;
}

}  // namespace txd
