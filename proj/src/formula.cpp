#include "txd/formula.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "txd/error.hpp"

namespace txd {

namespace {

class Parser {
 public:
  explicit Parser(std::string_view text) : s_(text) {}

  FormulaAst run() {
    FormulaAst ast;
    skip();
    if (!is_ident_start()) fail("expected response name");
    ast.response = ident();
    expect('~');
    summands(ast, /*top=*/true);
    skip();
    if (pos_ != s_.size()) fail(std::string("unexpected '") + s_[pos_] + "'");
    return ast;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const { throw ParseError(what, pos_); }

  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  bool peek(char c) {
    skip();
    return pos_ < s_.size() && s_[pos_] == c;
  }

  void expect(char c) {
    if (!peek(c)) {
      if (pos_ >= s_.size()) fail(std::string("expected '") + c + "' before end of input");
      fail(std::string("expected '") + c + "'");
    }
    ++pos_;
  }

  bool is_ident_start() {
    skip();
    return pos_ < s_.size() && std::isalpha(static_cast<unsigned char>(s_[pos_]));
  }

  std::string ident() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() &&
           (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_')) {
      ++pos_;
    }
    return std::string(s_.substr(start, pos_ - start));
  }

  bool at_error_keyword() {
    skip();
    if (s_.substr(pos_, 5) != "Error") return false;
    std::size_t q = pos_ + 5;
    if (q < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[q])) || s_[q] == '_')) return false;
    while (q < s_.size() && std::isspace(static_cast<unsigned char>(s_[q]))) ++q;
    return q < s_.size() && s_[q] == '(';
  }

  void summands(FormulaAst& ast, bool top) {
    do {
      skip();
      if (top && at_error_keyword()) {
        const std::size_t at = pos_;
        pos_ += 5;
        expect('(');
        if (ast.notation == RandomNotation::Bar) throw ParseError("Error() cannot be mixed with (1|...) terms", at);
        if (ast.notation == RandomNotation::Error) throw ParseError("only one Error() clause is allowed", at);
        ast.notation = RandomNotation::Error;
        if (peek(')')) fail("empty Error() clause");
        FormulaAst inner;
        summands(inner, /*top=*/false);
        for (auto& e : inner.fixed) ast.random.push_back(std::move(e));
        expect(')');
      } else if (peek('(')) {
        const std::size_t at = pos_;
        if (!top) fail("random-effect term not allowed here");
        ++pos_;
        expect('1');
        expect('|');
        if (ast.notation == RandomNotation::Error) throw ParseError("(1|...) cannot be mixed with Error()", at);
        ast.notation = RandomNotation::Bar;
        ast.random.push_back(cross());
        expect(')');
      } else {
        ast.fixed.push_back(cross());
      }
    } while (peek('+') && (++pos_, true));
  }

  FormulaExpr cross() {
    FormulaExpr first = inter();
    if (!peek('*')) return first;
    FormulaExpr e;
    e.kind = FormulaExpr::Kind::Star;
    e.offset = first.offset;
    e.args.push_back(std::move(first));
    while (peek('*')) {
      ++pos_;
      e.args.push_back(inter());
    }
    return e;
  }

  FormulaExpr inter() {
    FormulaExpr first = atom();
    if (!peek(':')) return first;
    FormulaExpr e;
    e.kind = FormulaExpr::Kind::Colon;
    e.offset = first.offset;
    e.args.push_back(std::move(first));
    while (peek(':')) {
      ++pos_;
      e.args.push_back(atom());
    }
    for (const auto& a : e.args) {
      if (a.kind == FormulaExpr::Kind::One) throw ParseError("'1' cannot appear in an interaction", a.offset);
    }
    return e;
  }

  FormulaExpr atom() {
    skip();
    FormulaExpr e;
    e.offset = pos_;
    if (pos_ >= s_.size()) fail("unexpected end of input");
    if (s_[pos_] == '1') {
      ++pos_;
      if (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) fail("unexpected number");
      e.kind = FormulaExpr::Kind::One;
      return e;
    }
    if (!is_ident_start()) {
      if (s_[pos_] == ')') fail("unbalanced ')'");
      fail(std::string("unexpected '") + s_[pos_] + "'");
    }
    e.kind = FormulaExpr::Kind::Name;
    e.name = ident();
    return e;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

using TermSet = std::vector<std::vector<std::string>>;  // each term: identifiers in written order

void add_unique(TermSet& out, std::vector<std::string> term) {
  auto same = [&](const std::vector<std::string>& t) {
    return std::set<std::string>(t.begin(), t.end()) == std::set<std::string>(term.begin(), term.end());
  };
  if (std::none_of(out.begin(), out.end(), same)) out.push_back(std::move(term));
}

TermSet terms_of(const FormulaExpr& e) {
  TermSet out;
  switch (e.kind) {
    case FormulaExpr::Kind::Name:
      out.push_back({e.name});
      break;
    case FormulaExpr::Kind::One:
      out.push_back({});
      break;
    case FormulaExpr::Kind::Colon: {
      out.push_back({});
      for (const auto& a : e.args) {
        TermSet next;
        for (const auto& l : out) {
          for (const auto& r : terms_of(a)) {
            auto t = l;
            for (const auto& x : r) {
              if (std::find(t.begin(), t.end(), x) == t.end()) t.push_back(x);
            }
            add_unique(next, std::move(t));
          }
        }
        out = std::move(next);
      }
      break;
    }
    case FormulaExpr::Kind::Star: {
      for (const auto& a : e.args) {
        TermSet rhs = terms_of(a);
        TermSet next = out;
        for (const auto& r : rhs) add_unique(next, r);
        for (const auto& l : out) {
          for (const auto& r : rhs) {
            auto t = l;
            for (const auto& x : r) {
              if (std::find(t.begin(), t.end(), x) == t.end()) t.push_back(x);
            }
            add_unique(next, std::move(t));
          }
        }
        out = std::move(next);
      }
      break;
    }
  }
  return out;
}

std::vector<FormulaExpr> expand_list(const std::vector<FormulaExpr>& list) {
  TermSet all;
  for (const auto& e : list) {
    for (auto& t : terms_of(e)) add_unique(all, std::move(t));
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.size() < b.size(); });
  std::vector<FormulaExpr> out;
  for (const auto& t : all) {
    FormulaExpr e;
    if (t.empty()) {
      e.kind = FormulaExpr::Kind::One;
    } else if (t.size() == 1) {
      e.name = t.front();
    } else {
      e.kind = FormulaExpr::Kind::Colon;
      for (const auto& x : t) {
        FormulaExpr a;
        a.name = x;
        e.args.push_back(std::move(a));
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::string render_expr(const FormulaExpr& e) {
  switch (e.kind) {
    case FormulaExpr::Kind::Name:
      return e.name;
    case FormulaExpr::Kind::One:
      return "1";
    case FormulaExpr::Kind::Colon:
    case FormulaExpr::Kind::Star: {
      const char op = e.kind == FormulaExpr::Kind::Colon ? ':' : '*';
      std::string s;
      for (std::size_t i = 0; i < e.args.size(); ++i) {
        if (i) s += op;
        s += render_expr(e.args[i]);
      }
      return s;
    }
  }
  return {};
}

void clear_offsets(FormulaExpr& e) {
  e.offset = 0;
  for (auto& a : e.args) clear_offsets(a);
}

}  // namespace

FormulaAst parse_formula(std::string_view text) { return Parser(text).run(); }

FormulaAst expand(const FormulaAst& ast) {
  FormulaAst out;
  out.response = ast.response;
  out.notation = ast.notation;
  out.fixed = expand_list(ast.fixed);
  out.random = expand_list(ast.random);
  for (auto& e : out.fixed) clear_offsets(e);
  for (auto& e : out.random) clear_offsets(e);
  return out;
}

std::string render(const FormulaAst& ast) {
  std::string s = ast.response + "~";
  bool first = true;
  auto sep = [&] {
    if (!first) s += '+';
    first = false;
  };
  for (const auto& e : ast.fixed) {
    sep();
    s += render_expr(e);
  }
  if (ast.notation == RandomNotation::Error && !ast.random.empty()) {
    sep();
    s += "Error(";
    for (std::size_t i = 0; i < ast.random.size(); ++i) {
      if (i) s += '+';
      s += render_expr(ast.random[i]);
    }
    s += ')';
  } else {
    for (const auto& e : ast.random) {
      sep();
      s += "(1|" + render_expr(e) + ")";
    }
  }
  return s;
}

std::vector<std::string> term_keys(const std::vector<FormulaExpr>& terms) {
  std::vector<std::string> out;
  for (const auto& e : expand_list(terms)) out.push_back(render_expr(e));
  return out;
}

std::string resolve_identifier(std::string_view name) {
  if (name == "I" || name == "intervention") return "I";
  if (name == "T" || name == "therapist") return "T";
  if (name == "B" || name == "batch") return "B";
  if (name == "C" || name == "centre") return "C";
  throw BindingError("unknown factor '" + std::string(name) + "'");
}

BoundModel to_model(const FormulaAst& ast, const AllocationTable& design) {
  const FormulaAst ex = expand(ast);
  auto resolve = [](const FormulaExpr& e) {
    std::vector<std::string> parts;
    if (e.kind == FormulaExpr::Kind::Name) {
      parts.push_back(resolve_identifier(e.name));
    } else {
      for (const auto& a : e.args) parts.push_back(resolve_identifier(a.name));
    }
    return join_key(std::move(parts));
  };

  ModelSpec spec;
  spec.fixed.clear();
  std::vector<Factor> fixed;
  for (const auto& e : ex.fixed) {
    if (e.kind == FormulaExpr::Kind::One) continue;
    const std::string key = resolve(e);
    if (key != "I") throw ConfigError("only the intervention factor I can be a fixed term (got '" + key + "')");
    spec.fixed = key;
    fixed.push_back(design_term(design, key).with_role(Role::Fixed));
  }

  std::vector<Factor> random;
  for (const auto& e : ex.random) {
    if (e.kind == FormulaExpr::Kind::One) throw StructuralError("random term '1' is the universal factor");
    const std::string key = resolve(e);
    Factor f = design_term(design, key);
    random.push_back(f);
    const bool dependent = std::any_of(fixed.begin(), fixed.end(), [&](const Factor& x) { return x.same_partition(f); });
    if (!dependent) spec.random_terms.push_back(key);
  }
  FactorLattice lattice = FactorLattice::build(fixed, random);
  return {std::move(lattice), std::move(spec)};
}

}  // namespace txd
