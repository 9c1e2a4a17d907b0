#include "txd/anova.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "txd/error.hpp"
#include "txd/kernels.hpp"
#include "txd/rng.hpp"

namespace txd {

namespace {

std::string stratum_label(const std::string& key) {
  if (key == "U") return "Mean";
  if (key == "E") return "Patients";
  if (key == "I") return "Interventions";
  if (key == "T") return "Therapists";
  if (key == "B") return "Batches";
  if (key == "C") return "Centres";
  return display_key(key);
}

std::string subspace_name(const std::string& key) {
  if (key == "U") return "W_0";
  if (split_key(key).size() == 1) return "W_" + key;
  return "W_{" + display_key(key) + "}";
}

std::vector<double> level_means(const Factor& f, const Eigen::VectorXd& y) {
  std::vector<double> sums(static_cast<std::size_t>(f.n_levels()), 0.0);
  for (std::size_t u = 0; u < f.n_units(); ++u) sums[static_cast<std::size_t>(f.level(u))] += y[static_cast<Eigen::Index>(u)];
  const auto& sizes = f.level_sizes();
  for (std::size_t l = 0; l < sums.size(); ++l) sums[l] /= sizes[l];
  return sums;
}

Eigen::VectorXd average(const Factor& f, const Eigen::VectorXd& y) {
  const auto means = level_means(f, y);
  Eigen::VectorXd out(y.size());
  for (std::size_t u = 0; u < f.n_units(); ++u) out[static_cast<Eigen::Index>(u)] = means[static_cast<std::size_t>(f.level(u))];
  return out;
}

double sum_sq(const Eigen::VectorXd& v) {
  return kernels::sum_squares(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

std::string format_number(double v, int precision = 4) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(precision) << std::fixed << v;
  return os.str();
}

std::string format_p(const std::optional<double>& p) {
  if (!p) return "";
  std::ostringstream os;
  if (*p < 1e-4) {
    os << std::setprecision(2) << std::scientific << *p;
  } else {
    os << std::setprecision(4) << std::fixed << *p;
  }
  return os.str();
}

std::vector<EmsTerm> to_terms(const Decomposition& dec, const Eigen::VectorXd& a) {
  std::vector<EmsTerm> out;
  const auto& nodes = dec.lattice().random_nodes();
  for (std::size_t h = 0; h < dec.basis().size(); ++h) {
    double c = a[static_cast<Eigen::Index>(h)];
    if (std::abs(c - std::round(c)) < tol::kCombination) c = std::round(c);
    if (c == 0.0) continue;
    out.push_back({nodes[dec.basis()[h]].key(), c});
  }
  // Positive terms first, each group in lattice order.
  std::stable_partition(out.begin(), out.end(), [](const EmsTerm& t) { return t.coef > 0; });
  return out;
}

}  // namespace

std::string xi_symbol(const std::string& key) {
  if (key == "0" || key == "U") return "ξ_0";
  if (split_key(key).size() == 1) return "ξ_" + key;
  return "ξ_{" + display_key(key) + "}";
}

std::string EmsExpression::to_string() const {
  std::string out = fixed_part;
  for (const auto& t : xi) {
    const bool neg = t.coef < 0;
    const double mag = std::abs(t.coef);
    if (out.empty()) {
      if (neg) out += "−";
    } else {
      out += neg ? " − " : " + ";
    }
    if (mag != 1.0) {
      std::ostringstream os;
      os << mag;
      out += os.str();
    }
    out += xi_symbol(t.stratum);
  }
  return out;
}

Eigen::MatrixXd averaging_operator(const Factor& f) {
  const auto n = static_cast<Eigen::Index>(f.n_units());
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  const auto& sizes = f.level_sizes();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto li = f.level(static_cast<std::size_t>(i));
    const double w = 1.0 / sizes[static_cast<std::size_t>(li)];
    for (Eigen::Index j = 0; j < n; ++j) {
      if (f.level(static_cast<std::size_t>(j)) == li) P(i, j) = w;
    }
  }
  return P;
}

std::vector<StratumProjector> decompose(const FactorLattice& lattice) {
  const auto& nodes = lattice.random_nodes();
  const auto n = static_cast<Eigen::Index>(lattice.n_units());
  std::vector<StratumProjector> out;
  out.reserve(nodes.size());
  Rng rng(0x51a7);
  Eigen::MatrixXd probe(n, 4);
  for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = standard_normal(rng);

  for (std::size_t a = 0; a < nodes.size(); ++a) {
    Eigen::MatrixXd Q = averaging_operator(nodes[a].factor);
    for (std::size_t b = 0; b < a; ++b) {
      if (lattice.finer_eq(a, b)) Q -= out[b].Q;
    }
    const Eigen::MatrixXd qp = Q * probe;
    const double idem = (Q * qp - qp).cwiseAbs().maxCoeff();
    const double asym = (Q - Q.transpose()).cwiseAbs().maxCoeff();
    const double trace = Q.trace();
    if (idem > tol::kProjector * std::max(1.0, probe.cwiseAbs().maxCoeff()) * 10 || asym > tol::kProjector ||
        std::abs(trace - nodes[a].df) > 1e-8) {
      throw StructuralError("stratum '" + nodes[a].key() +
                            "' does not give an idempotent projector: the design is not orthogonal");
    }
    out.push_back({nodes[a].key(), nodes[a].df, std::move(Q)});
  }
  return out;
}

Decomposition::Decomposition(const FactorLattice& lattice, const std::string& fixed_key)
    : lattice_(&lattice), fixed_key_(fixed_key) {
  const auto& nodes = lattice.random_nodes();
  for (const auto& n : nodes) {
    if (!n.factor.is_uniform()) {
      throw StructuralError("factor '" + n.key() + "' is not equally replicated; stratum ANOVA needs an orthogonal design");
    }
  }
  for (std::size_t a = 0; a < nodes.size(); ++a) {
    for (std::size_t b = a + 1; b < nodes.size(); ++b) {
      if (!are_orthogonal(nodes[a].factor, nodes[b].factor)) {
        throw StructuralError("factors '" + nodes[a].key() + "' and '" + nodes[b].key() + "' are not orthogonal");
      }
    }
  }
  coarser_.resize(nodes.size());
  for (std::size_t a = 0; a < nodes.size(); ++a) {
    for (std::size_t b = 0; b < a; ++b) {
      if (lattice.finer_eq(a, b)) coarser_[a].push_back(b);
    }
  }
  for (std::size_t a = 0; a < nodes.size(); ++a) {
    if (nodes[a].role == Role::Equality || nodes[a].has_parameter()) basis_.push_back(a);
  }
  // E first so index 0 of every coefficient vector is the residual variance.
  std::stable_partition(basis_.begin(), basis_.end(), [&](std::size_t i) { return nodes[i].role == Role::Equality; });

  if (!fixed_key.empty()) {
    auto fi = lattice.find_fixed(fixed_key);
    if (!fi) throw StructuralError("lattice has no fixed factor '" + fixed_key + "'");
    const Factor& f = lattice.fixed_nodes()[*fi].factor;
    if (!f.is_uniform()) throw StructuralError("fixed factor '" + fixed_key + "' is not equally replicated");
    for (const auto& n : nodes) {
      if (!are_orthogonal(f, n.factor)) {
        throw StructuralError("fixed factor '" + fixed_key + "' is not orthogonal to '" + n.key() + "'");
      }
    }
    fixed_factor_ = f;
    fixed_stratum_ = lattice.stratum_of_fixed(*fi);
    fixed_df_ = f.n_levels() - 1;
    if (fixed_df_ > nodes[fixed_stratum_].df) {
      throw StructuralError("fixed factor '" + fixed_key + "' does not fit inside its stratum");
    }
    // The treatment subspace must lie inside its stratum.
    Rng rng(0xf1ed);
    Eigen::VectorXd v(static_cast<Eigen::Index>(lattice.n_units()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = standard_normal(rng);
    const Eigen::VectorXd w = fixed_part(v);
    const auto parts = project(w);
    const double scale = std::max(1.0, w.cwiseAbs().maxCoeff());
    for (std::size_t s = 0; s < parts.size(); ++s) {
      const Eigen::VectorXd expect = s == fixed_stratum_ ? w : Eigen::VectorXd::Zero(w.size());
      if ((parts[s] - expect).cwiseAbs().maxCoeff() > 1e-9 * scale) {
        throw StructuralError("treatment subspace of '" + fixed_key + "' is not contained in stratum '" +
                              nodes[fixed_stratum_].key() + "'");
      }
    }
  }
}

std::vector<Eigen::VectorXd> Decomposition::project(const Eigen::VectorXd& y) const {
  const auto& nodes = lattice_->random_nodes();
  if (static_cast<std::size_t>(y.size()) != lattice_->n_units()) {
    throw UsageError("outcome length " + std::to_string(y.size()) + " does not match the design (" +
                     std::to_string(lattice_->n_units()) + " units)");
  }
  std::vector<Eigen::VectorXd> q(nodes.size());
  for (std::size_t a = 0; a < nodes.size(); ++a) {
    if (nodes[a].role == Role::Equality) {
      q[a] = y;
    } else {
      q[a] = average(nodes[a].factor, y);
    }
    for (std::size_t b : coarser_[a]) q[a] -= q[b];
  }
  return q;
}

Eigen::VectorXd Decomposition::fixed_part(const Eigen::VectorXd& y) const {
  if (!fixed_factor_) return Eigen::VectorXd::Zero(y.size());
  return average(*fixed_factor_, y).array() - y.mean();
}

double Decomposition::replication(std::size_t node) const {
  return static_cast<double>(lattice_->n_units()) / lattice_->random_nodes()[node].factor.n_levels();
}

Eigen::VectorXd Decomposition::xi_coefficients(std::size_t node) const {
  Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(basis_.size()));
  c[0] = 1.0;
  for (std::size_t h = 1; h < basis_.size(); ++h) {
    if (lattice_->finer_eq(basis_[h], node)) c[static_cast<Eigen::Index>(h)] = replication(basis_[h]);
  }
  return c;
}

Eigen::VectorXd Decomposition::express(const Eigen::VectorXd& coefficients) const {
  const auto k = static_cast<Eigen::Index>(basis_.size());
  Eigen::MatrixXd A(k, k);
  for (Eigen::Index h = 0; h < k; ++h) A.col(h) = xi_coefficients(basis_[static_cast<std::size_t>(h)]);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  if (!lu.isInvertible()) throw StructuralError("stratum eigenvalue system is singular");
  return lu.solve(coefficients);
}

const AnovaRow* AnovaTable::find(const std::string& stratum_key, const std::string& source) const {
  for (const auto& r : rows) {
    if (r.stratum_key == stratum_key && r.source == source) return &r;
  }
  return nullptr;
}

const TestResult* AnovaTable::find_test(const std::string& effect) const {
  for (const auto& t : tests) {
    if (t.effect == effect) return &t;
  }
  return nullptr;
}

std::map<std::string, EmsExpression> ems_table(const FactorLattice& lattice, const std::string& fixed_key) {
  const Decomposition dec(lattice, fixed_key);
  std::map<std::string, EmsExpression> out;
  const auto& nodes = lattice.random_nodes();
  for (std::size_t s = 0; s < nodes.size(); ++s) {
    const auto& node = nodes[s];
    const std::string label = stratum_label(node.key());
    EmsExpression own;
    if (node.role == Role::Universal) {
      own = {"‖τ_0‖²", {{"0", 1.0}}};
      out[node.key() + "/Mean"] = own;
      continue;
    }
    if (node.role == Role::DependentRandom) {
      own.xi = to_terms(dec, dec.express(dec.xi_coefficients(s)));
    } else {
      own.xi = {{node.key(), 1.0}};
    }
    if (s == dec.fixed_stratum()) {
      EmsExpression fx = own;
      fx.fixed_part = "‖τ_" + fixed_key + "‖²";
      out[node.key() + "/Interventions"] = fx;
      if (node.df > dec.fixed_df()) out[node.key() + "/Residual"] = own;
    } else {
      out[node.key() + "/" + label] = own;
    }
  }
  return out;
}

AnovaTable anova(const Eigen::VectorXd& y, const FactorLattice& lattice, const std::string& fixed_key) {
  const Decomposition dec(lattice, fixed_key);
  const auto parts = dec.project(y);
  const auto ems = ems_table(lattice, fixed_key);
  const auto& nodes = lattice.random_nodes();

  AnovaTable t;
  t.n_units = lattice.n_units();
  for (std::size_t s = 0; s < nodes.size(); ++s) {
    const auto& node = nodes[s];
    const std::string key = node.key();
    const double ss = sum_sq(parts[s]);
    const bool holds_fixed = s == dec.fixed_stratum();
    const bool split = holds_fixed && node.df > dec.fixed_df();
    std::string label = stratum_label(key);
    if (split) label = "Treatments";
    const std::string stratum = subspace_name(key) + " " + label;
    auto make = [&](const std::string& source, std::int32_t df, double sum) {
      AnovaRow r;
      r.stratum_key = key;
      r.stratum = stratum;
      r.source = source;
      r.df = df;
      r.ss = sum;
      r.ms = df > 0 ? sum / df : 0.0;
      auto it = ems.find(key + "/" + source);
      if (it != ems.end()) r.ems = it->second;
      return r;
    };
    if (node.df == 0) continue;
    if (node.role == Role::Universal) {
      t.rows.push_back(make("Mean", node.df, ss));
      continue;
    }
    if (holds_fixed) {
      const Eigen::VectorXd fx = dec.fixed_part(y);
      t.rows.push_back(make("Interventions", dec.fixed_df(), sum_sq(fx)));
      if (split) {
        const Eigen::VectorXd res = parts[s] - fx;
        t.rows.push_back(make("Residual", node.df - dec.fixed_df(), sum_sq(res)));
        t.stratum_ms[key] = {t.rows.back().ms, static_cast<double>(t.rows.back().df)};
      }
      AnovaRow total = make("Total", node.df, ss);
      total.is_total = true;
      total.ems = {};
      t.rows.push_back(total);
      continue;
    }
    t.rows.push_back(make(label, node.df, ss));
    if (node.role != Role::DependentRandom) t.stratum_ms[key] = {t.rows.back().ms, static_cast<double>(node.df)};
  }
  AnovaRow grand;
  grand.stratum = "Total";
  grand.df = static_cast<std::int32_t>(lattice.n_units());
  grand.ss = sum_sq(y);
  grand.ms = grand.ss / grand.df;
  grand.is_total = true;
  t.rows.push_back(grand);

  t.tests = f_tests(t, dec);
  const std::string fixed_stratum_key = dec.fixed_stratum() != Decomposition::npos ? nodes[dec.fixed_stratum()].key() : "";
  for (auto& r : t.rows) {
    if (r.is_total || r.source == "Mean") continue;
    const bool fixed_row = r.source == "Interventions" && r.stratum_key == fixed_stratum_key;
    const std::string effect = fixed_row ? fixed_key : display_key(r.stratum_key);
    for (std::size_t k = 0; k < t.tests.size(); ++k) {
      if (t.tests[k].effect == effect) r.test = k;
    }
  }
  return t;
}

std::vector<TestResult> f_tests(const AnovaTable& table, const Decomposition& dec) {
  const auto& lattice = dec.lattice();
  const auto& nodes = lattice.random_nodes();
  std::vector<TestResult> out;

  auto build = [&](const std::string& effect, double ms_num, double df_num, const Eigen::VectorXd& null_coef) {
    TestResult r;
    r.effect = effect;
    r.df_num = df_num;
    r.denominator = to_terms(dec, dec.express(null_coef));
    std::vector<MsTerm> terms;
    double den = 0.0;
    bool missing = false;
    for (const auto& term : r.denominator) {
      auto it = table.stratum_ms.find(term.stratum);
      if (it == table.stratum_ms.end()) {
        missing = true;
        break;
      }
      terms.push_back({term.coef, it->second.first, it->second.second});
      den += term.coef * it->second.first;
    }
    if (missing || r.denominator.empty()) {
      r.note = "no mean square matches the null expectation; test undefined";
      return r;
    }
    const bool single = r.denominator.size() == 1 && r.denominator.front().coef == 1.0;
    r.kind = single ? TestKind::ExactF : TestKind::ApproximateF;
    if (!(den > 0.0)) {
      r.note = "residual estimate nonpositive; test undefined";
      r.df_den = std::numeric_limits<double>::quiet_NaN();
      return r;
    }
    if (single) {
      r.df_den = terms.front().df;
    } else {
      r.df_den = satterthwaite_df(terms).value();
    }
    r.statistic = ms_num / den;
    r.p_value = f_upper_tail(r.statistic, r.df_num, r.df_den);
    return r;
  };

  if (dec.fixed_stratum() != Decomposition::npos) {
    const std::size_t s = dec.fixed_stratum();
    const AnovaRow* row = table.find(nodes[s].key(), "Interventions");
    if (row != nullptr) out.push_back(build(dec.fixed_key(), row->ms, row->df, dec.xi_coefficients(s)));
  }
  for (std::size_t h = 1; h < dec.basis().size(); ++h) {
    const std::size_t g = dec.basis()[h];
    auto it = table.stratum_ms.find(nodes[g].key());
    if (it == table.stratum_ms.end()) continue;
    Eigen::VectorXd null_coef = dec.xi_coefficients(g);
    null_coef[static_cast<Eigen::Index>(h)] = 0.0;
    out.push_back(build(display_key(nodes[g].key()), it->second.first, it->second.second, null_coef));
  }
  return out;
}

std::optional<double> satterthwaite_fixed_df(double ms_a, double ms_b, double ms_ab, int nI, int na, int nB) {
  const double d_a = static_cast<double>(nI - 1) * (na - 1);
  const double d_b = static_cast<double>(nI - 1) * (nB - 1);
  const double d_ab = d_a * (nB - 1);
  const MsTerm terms[] = {{1.0, ms_a, d_a}, {1.0, ms_b, d_b}, {-1.0, ms_ab, d_ab}};
  return satterthwaite_df(terms);
}

ComponentEstimates estimate_components_anova(const AnovaTable& table, const Decomposition& dec,
                                             bool allow_negative) {
  const auto& nodes = dec.lattice().random_nodes();
  const auto k = static_cast<Eigen::Index>(dec.basis().size());
  Eigen::MatrixXd A(k, k);
  Eigen::VectorXd ms(k);
  for (Eigen::Index h = 0; h < k; ++h) {
    const std::size_t node = dec.basis()[static_cast<std::size_t>(h)];
    A.row(h) = dec.xi_coefficients(node).transpose();
    auto it = table.stratum_ms.find(nodes[node].key());
    if (it == table.stratum_ms.end()) throw StructuralError("no mean square for stratum '" + nodes[node].key() + "'");
    ms[h] = it->second.first;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  if (!lu.isInvertible()) throw StructuralError("expected-mean-square system is singular");
  const Eigen::VectorXd sigma = lu.solve(ms);
  ComponentEstimates est;
  for (Eigen::Index h = 0; h < k; ++h) {
    const std::string key = nodes[dec.basis()[static_cast<std::size_t>(h)]].key();
    double v = sigma[h];
    const bool neg = v < 0.0;
    if (neg && !allow_negative) v = 0.0;
    est.sigma2[key] = v;
    est.truncated[key] = neg && !allow_negative;
  }
  return est;
}

std::string AnovaTable::to_markdown() const {
  std::ostringstream os;
  os << "| Stratum | Source | df | SS | MS | EMS | F | df_den | p |\n";
  os << "|---|---|---:|---:|---:|---|---:|---:|---:|\n";
  std::string last;
  for (const auto& r : rows) {
    const bool show_stratum = r.stratum != last;
    last = r.stratum;
    os << "| " << (show_stratum ? r.stratum : "") << " | " << r.source << " | " << r.df << " | "
       << format_number(r.ss) << " | " << (r.is_total ? "" : format_number(r.ms)) << " | " << r.ems.to_string() << " | ";
    if (r.test) {
      const auto& t = tests[*r.test];
      if (t.p_value) {
        os << format_number(t.statistic) << " | " << format_number(t.df_den, 2) << " | " << format_p(t.p_value);
      } else {
        os << " | | " << t.note;
      }
    } else {
      os << " | | ";
    }
    os << " |\n";
  }
  return os.str();
}

std::string AnovaTable::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "Stratum,Source,df,SS,MS,EMS,F,df_den,p\n";
  for (const auto& r : rows) {
    os << '"' << r.stratum << "\"," << '"' << r.source << "\"," << r.df << ',' << r.ss << ',';
    if (!r.is_total) os << r.ms;
    os << ",\"" << r.ems.to_string() << "\",";
    if (r.test && tests[*r.test].p_value) {
      const auto& t = tests[*r.test];
      os << t.statistic << ',' << t.df_den << ',' << *t.p_value;
    } else {
      os << ",,";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace txd
