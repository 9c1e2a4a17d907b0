#include <doctest.h>

#include <algorithm>

#include "oracle.hpp"
#include "txd/error.hpp"
#include "txd/formula.hpp"
#include "txd/sim.hpp"

using namespace txd;

namespace {

bool same_lattice(const FactorLattice& a, const FactorLattice& b) {
  if (a.random_nodes().size() != b.random_nodes().size()) return false;
  for (const auto& n : a.random_nodes()) {
    const auto idx = b.find_random(n.key());
    if (!idx || !b.random_nodes()[*idx].factor.same_partition(n.factor) || b.random_nodes()[*idx].role != n.role) {
      return false;
    }
  }
  return a.edges(Structure::Random).size() == b.edges(Structure::Random).size();
}

}  // namespace

TEST_CASE("parse tree shape") {
  const auto ast = parse_formula("y ~ I + Error(T + I:T)");
  CHECK(ast.response == "y");
  CHECK(ast.notation == RandomNotation::Error);
  REQUIRE(ast.fixed.size() == 1);
  CHECK(ast.fixed[0].name == "I");
  REQUIRE(ast.random.size() == 2);
  CHECK(ast.random[1].kind == FormulaExpr::Kind::Colon);
  CHECK(ast.random[1].offset == 18);
}

TEST_CASE("star expands to main effects and interactions") {
  const auto ex = expand(parse_formula("y~I+Error(I*T*B)"));
  CHECK(term_keys(ex.random) == std::vector<std::string>{"I", "T", "B", "I:T", "I:B", "T:B", "I:T:B"});
  CHECK(render(ex) == "y~I+Error(I+T+B+I:T+I:B+T:B+I:T:B)");
  CHECK(term_keys(parse_formula("y~A:B+B:A+A").fixed) == std::vector<std::string>{"A", "A:B"});
  CHECK(term_keys(parse_formula("y~(1|A*B)").random) == std::vector<std::string>{"A", "B", "A:B"});
}

TEST_CASE("rendering is byte-stable") {
  for (int ex = 1; ex <= 3; ++ex) {
    for (const auto& text : {oracle::aov_formula(ex), oracle::lmer_formula(ex)}) {
      CAPTURE(text);
      const std::string once = render(parse_formula(text));
      CHECK(once == text);
      CHECK(render(parse_formula(once)) == once);
      const std::string norm = render(expand(parse_formula(text)));
      CHECK(render(expand(parse_formula(norm))) == norm);
      CHECK(parse_formula(render(parse_formula(" " + text + " "))) == parse_formula(text));
    }
  }
}

TEST_CASE("aov and lmer formulas give the same lattices") {
  for (int ex = 1; ex <= 3; ++ex) {
    CAPTURE(ex);
    const auto t = SimConfig::for_example(ex).design();
    const auto table = systematic_design(t);
    const auto a = to_model(parse_formula(oracle::aov_formula(ex)), table);
    const auto l = to_model(parse_formula(oracle::lmer_formula(ex)), table);
    CHECK(same_lattice(a.lattice, l.lattice));
    auto ka = a.spec.random_terms, kl = l.spec.random_terms;
    std::sort(ka.begin(), ka.end());
    std::sort(kl.begin(), kl.end());
    CHECK(ka == kl);
    auto want = ModelSpec::for_shape(t.shape).random_terms;
    std::sort(want.begin(), want.end());
    CHECK(ka == want);
  }
}

TEST_CASE("long identifiers bind to design columns") {
  const auto table = systematic_design(DesignSpec::example_a());
  const auto m = to_model(parse_formula("y~intervention+Error(therapist+intervention:therapist)"), table);
  CHECK(m.spec.random_terms == std::vector<std::string>{"T", "I:T"});
  CHECK_THROWS_AS(to_model(parse_formula("y~I+Error(Q)"), table), BindingError);
  CHECK_THROWS_AS(to_model(parse_formula("y~T+Error(I)"), table), ConfigError);
  CHECK_THROWS_AS(to_model(parse_formula("y~I+(1|1)"), table), StructuralError);
}

TEST_CASE("syntax errors carry byte offsets") {
  auto offset_of = [](const char* text) -> long {
    try {
      parse_formula(text);
    } catch (const ParseError& e) {
      return static_cast<long>(e.offset());
    }
    return -1;
  };
  CHECK(offset_of("y ~ I + ") == 8);
  CHECK(offset_of("y ~ I + Error(T") == 15);
  CHECK(offset_of("~ I") == 0);
  CHECK(offset_of("y ~ I )") == 6);
  CHECK(offset_of("y ~ I + Error(T) + (1|T)") == 19);
  CHECK(offset_of("y ~ 1:T") == 4);
  CHECK(offset_of("y ~ I + Error(T) + Error(B)") == 19);
  CHECK(offset_of("y ~ I + Error()") == 14);
  CHECK(offset_of("y ~ I $") == 6);
}
