#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "oracle.hpp"
#include "txd/design.hpp"
#include "txd/error.hpp"
#include "txd/rng.hpp"

using namespace txd;

namespace {

MatchingInputs inputs_for(const DesignSpec& spec, std::uint64_t seed) {
  Rng rng = make_rng(seed, {1});
  MatchingInputs in;
  const std::size_t n = spec.n_units();
  in.x2.resize(n);
  in.x3.assign(n, std::vector<double>(static_cast<std::size_t>(spec.nI)));
  in.m2.resize(static_cast<std::size_t>(spec.n_therapists()));
  in.m3.assign(static_cast<std::size_t>(spec.n_therapists()), std::vector<double>(static_cast<std::size_t>(spec.nI)));
  for (auto& x : in.x2) x = standard_normal(rng);
  for (auto& r : in.x3) for (auto& x : r) x = standard_normal(rng);
  for (auto& x : in.m2) x = standard_normal(rng);
  for (auto& r : in.m3) for (auto& x : r) x = standard_normal(rng);
  return in;
}

}  // namespace

TEST_CASE("example counts") {
  CHECK(DesignSpec::example_a().n_units() == 320);
  CHECK(DesignSpec::example_b().n_units() == 320);
  CHECK(DesignSpec::example_c().n_units() == 960);
  CHECK(DesignSpec::example_c().n_therapists() == 48);
  CHECK(parse_shape("b") == Shape::RandomisedBlock);
  CHECK_THROWS_AS(parse_shape("z"), ConfigError);
}

TEST_CASE("invalid counts are rejected") {
  DesignSpec s = DesignSpec::example_a();
  s.nT = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = DesignSpec::example_a();
  s.nR = -1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("systematic design covers every cell equally per block") {
  const DesignSpec spec = DesignSpec::example_c();
  const auto t = systematic_design(spec);
  REQUIRE(t.size() == spec.n_units());
  for (int c = 0; c < spec.nC; ++c) {
    for (int b = 0; b < spec.nB; ++b) {
      const auto counts = cell_counts(t, c, b);
      std::size_t nonzero = 0;
      for (auto k : counts) {
        if (k != 0) {
          CHECK(k == spec.nR);
          ++nonzero;
        }
      }
      CHECK(nonzero == static_cast<std::size_t>(spec.nI * spec.nT));
    }
  }
}

TEST_CASE("randomisation permutes within blocks and is seed deterministic") {
  DesignSpec spec = DesignSpec::example_b();
  spec.seed = 99;
  const auto a = randomise(spec);
  const auto b = randomise(spec);
  CHECK(a.to_csv() == b.to_csv());
  spec.seed = 100;
  CHECK(randomise(spec).to_csv() != a.to_csv());
  const auto sys = systematic_design(spec);
  for (int bl = 0; bl < spec.nB; ++bl) CHECK(cell_counts(a, 0, bl) == cell_counts(sys, 0, bl));
  CHECK(a.to_csv().rfind("patient,centre,batch,therapist,intervention\n", 0) == 0);
}

TEST_CASE("permutation of a four-row block is uniform") {
  DesignSpec spec;
  spec.shape = Shape::CompletelyRandomised;
  spec.nI = 2;
  spec.nT = 2;
  spec.nR = 1;
  std::map<std::vector<std::pair<int, int>>, long> seen;
  const long seeds = 10000;
  for (long s = 0; s < seeds; ++s) {
    spec.seed = static_cast<std::uint64_t>(s);
    const auto t = randomise(spec);
    std::vector<std::pair<int, int>> key;
    for (const auto& r : t.rows) key.emplace_back(r.therapist, r.intervention);
    ++seen[key];
  }
  CHECK(seen.size() == 24);
  for (const auto& [k, n] : seen) CHECK(oracle::within_binomial(n, seeds, 1.0 / 24.0));
}

TEST_CASE("methods three to five balance every block exactly") {
  for (const DesignSpec& base : {DesignSpec::example_a(), DesignSpec::example_b(), DesignSpec::example_c()}) {
    for (int m = 3; m <= 5; ++m) {
      DesignSpec spec = base;
      spec.seed = 5;
      const auto in = inputs_for(spec, 5);
      const auto t = assign_by_method(spec, m, &in);
      for (int c = 0; c < spec.nC; ++c) {
        for (int b = 0; b < spec.nB; ++b) CHECK(cell_counts(t, c, b) == cell_counts(systematic_design(spec), c, b));
      }
    }
  }
}

TEST_CASE("matched methods keep per-therapist loads") {
  DesignSpec spec = DesignSpec::example_a();
  spec.seed = 3;
  const auto in = inputs_for(spec, 3);
  for (int m = 1; m <= 2; ++m) {
    const auto t = assign_by_method(spec, m, &in);
    std::map<int, int> load;
    std::map<int, int> arm;
    for (const auto& r : t.rows) {
      ++load[r.therapist];
      ++arm[r.intervention];
    }
    for (const auto& [th, n] : load) CHECK(n == spec.nI * spec.nR);
    for (const auto& [i, n] : arm) CHECK(n == spec.nT * spec.nR);
  }
  CHECK_THROWS(assign_by_method(spec, 1, nullptr));
  CHECK_THROWS_AS(assign_by_method(spec, 6, nullptr), ConfigError);
}

TEST_CASE("method four coincides with joint randomisation") {
  DesignSpec spec = DesignSpec::example_b();
  spec.seed = 17;
  CHECK(assign_by_method(spec, 4, nullptr).to_csv() == randomise(spec).to_csv());
}

TEST_CASE("seed streams are order independent") {
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
  Rng r = make_rng(4, {5});
  for (int i = 0; i < 1000; ++i) {
    const auto v = uniform_below(r, 7);
    CHECK(v < 7);
  }
}
