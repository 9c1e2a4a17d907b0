#pragma once

// Model formulas in the aov/lmer style:
//
//   formula := IDENT '~' sum
//   sum     := summand ('+' summand)*
//   summand := 'Error' '(' sum ')' | '(' '1' '|' cross ')' | cross
//   cross   := inter ('*' inter)*
//   inter   := atom (':' atom)*
//   atom    := IDENT | '1'
//
// ':' binds tighter than '*', which binds tighter than '+'. Whitespace is
// ignored. Error(...) terms and (1|...) terms are both random terms.

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "txd/design.hpp"
#include "txd/lattice.hpp"
#include "txd/mixed_model.hpp"

namespace txd {

struct FormulaExpr {
  enum class Kind { Name, One, Colon, Star };
  Kind kind = Kind::Name;
  std::string name;               // Kind::Name
  std::vector<FormulaExpr> args;  // Colon / Star operands, left to right
  std::size_t offset = 0;

  bool operator==(const FormulaExpr&) const = default;
};

enum class RandomNotation { None, Error, Bar };

struct FormulaAst {
  std::string response;
  std::vector<FormulaExpr> fixed;   // summands outside Error/(1|..)
  std::vector<FormulaExpr> random;  // summands inside Error(...) or one per (1|..)
  RandomNotation notation = RandomNotation::None;

  bool operator==(const FormulaAst&) const = default;
};

/// Throws ParseError (with byte offset) on malformed input.
FormulaAst parse_formula(std::string_view text);

/// Replaces every '*' by its main effects and interactions and drops
/// duplicate terms. Terms are ordered by size, then first appearance.
FormulaAst expand(const FormulaAst& ast);

/// Canonical text without spaces, e.g. "y~I+Error(T+I:T)" or
/// "y~I+(1|T)+(1|I:T)".
std::string render(const FormulaAst& ast);

/// Expanded term keys with identifiers as written, e.g. {"T", "I:T"}.
std::vector<std::string> term_keys(const std::vector<FormulaExpr>& terms);

/// Maps an identifier to a design column key: I/intervention, T/therapist,
/// B/batch, C/centre. Unknown names throw BindingError.
std::string resolve_identifier(std::string_view name);

struct BoundModel {
  FactorLattice lattice;
  ModelSpec spec;
};

/// Binds a formula to a design. Random terms that coincide with the fixed
/// factor become dependent random nodes and carry no variance parameter.
BoundModel to_model(const FormulaAst& ast, const AllocationTable& design);

}  // namespace txd
