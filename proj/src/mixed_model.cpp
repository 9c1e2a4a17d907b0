#include "txd/mixed_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "txd/error.hpp"
#include "txd/stats.hpp"

namespace txd {

ModelSpec ModelSpec::for_shape(Shape shape) {
  ModelSpec s;
  switch (shape) {
    case Shape::CompletelyRandomised:
      s.random_terms = {"T", "I:T"};
      break;
    case Shape::RandomisedBlock:
      s.random_terms = {"T", "B", "T:B", "I:T", "I:B", "I:T:B"};
      break;
    case Shape::Multicentre:
      s.random_terms = {"T", "B", "C", "T:B", "C:B", "I:T", "I:B", "I:C", "I:C:B", "I:T:B"};
      break;
  }
  return s;
}

Eigen::MatrixXd effect_coding(int n_levels) {
  if (n_levels < 2) throw ConfigError("effect coding needs at least two levels");
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(n_levels, n_levels - 1);
  for (int k = 0; k < n_levels - 1; ++k) {
    const int m = n_levels - k;  // levels involved
    for (int i = 0; i < m - 1; ++i) c(i, k) = 1.0 / (m - 1);
    c(m - 1, k) = -1.0;
  }
  return c;
}

bool ModelFit::any_boundary() const {
  return std::any_of(boundary.begin(), boundary.end(), [](const auto& kv) { return kv.second; });
}

std::string ModelFit::to_json() const {
  using nlohmann::ordered_json;
  ordered_json j;
  auto test_json = [](const TTest& t) {
    ordered_json o;
    o["estimate"] = t.estimate;
    o["se"] = t.se;
    o["df"] = std::isfinite(t.df) ? ordered_json(t.df) : ordered_json(nullptr);
    o["t"] = t.t;
    o["p"] = t.p_value ? ordered_json(*t.p_value) : ordered_json(nullptr);
    return o;
  };
  if (!tests.empty()) j["fixed"] = test_json(tests.front());
  if (tests.size() > 1) {
    ordered_json all = ordered_json::array();
    for (const auto& t : tests) all.push_back(test_json(t));
    j["contrasts"] = all;
  }
  j["intercept"] = beta.size() > 0 ? beta[0] : 0.0;
  ordered_json comp;
  ordered_json bnd;
  for (const auto& key : spec.random_terms) {
    comp[key] = components.at(key);
    bnd[key] = boundary.at(key);
  }
  comp["E"] = sigma2_e;
  j["components"] = comp;
  j["boundary"] = bnd;
  j["reml_loglik"] = reml_loglik;
  j["converged"] = converged;
  j["iterations"] = iterations;
  j["backend"] = backend;
  j["n"] = n;
  return j.dump(2) + "\n";
}

Factor design_term(const AllocationTable& design, const std::string& key) {
  const auto parts = split_key(key);
  if (parts.empty()) throw BindingError("empty term");
  Factor f = design.factor(parts.front());
  for (std::size_t i = 1; i < parts.size(); ++i) f = infimum(f, design.factor(parts[i]));
  return f.renamed(join_key(parts));
}

RemlProblem make_problem(const Eigen::VectorXd& y, const AllocationTable& design, const ModelSpec& spec) {
  const std::size_t n = design.size();
  if (static_cast<std::size_t>(y.size()) != n) throw UsageError("outcome length does not match the design");
  RemlProblem p;
  p.y = y;
  if (spec.fixed.empty()) {
    p.X = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(n), 1);
    p.fixed = Factor::universal(n);
  } else {
    p.fixed = design_term(design, spec.fixed);
    const int nl = p.fixed.n_levels();
    const Eigen::MatrixXd c = spec.contrasts ? *spec.contrasts : effect_coding(nl);
    if (c.rows() != nl || c.cols() != nl - 1) throw ConfigError("contrast matrix has the wrong shape");
    // Level order of the fixed factor follows the design's own codes.
    const auto codes = design.column(split_key(spec.fixed).front());
    p.X.resize(static_cast<Eigen::Index>(n), nl);
    for (std::size_t u = 0; u < n; ++u) {
      p.X(static_cast<Eigen::Index>(u), 0) = 1.0;
      const auto code = codes[u];
      if (code < 0 || code >= nl) throw StructuralError("fixed factor codes are not 0..levels-1");
      p.X.row(static_cast<Eigen::Index>(u)).tail(nl - 1) = c.row(code);
    }
  }
  for (const auto& key : spec.random_terms) p.terms.push_back(design_term(design, key));
  return p;
}

namespace {

std::unique_ptr<RemlEvaluator> choose_backend(const RemlProblem& p, Backend b) {
  switch (b) {
    case Backend::Dense:
      return make_dense_evaluator(p);
    case Backend::Block:
      return make_block_evaluator(p);
    case Backend::Strata: {
      auto e = make_strata_evaluator(p);
      if (!e) throw StructuralError("realised design is not orthogonal; strata backend unavailable");
      return e;
    }
    case Backend::Auto:
      break;
  }
  if (auto e = make_strata_evaluator(p)) return e;
  return make_block_evaluator(p);
}

struct Point {
  Eigen::VectorXd gamma;
  UnitEval e;
  double ll = -std::numeric_limits<double>::infinity();
};

// Covariance of θ̂ = (free σ²_k..., σ²_e) from a central-difference Hessian
// of the analytic score, or from the average information.
std::optional<Eigen::MatrixXd> theta_covariance(const RemlEvaluator& ev, const Point& at,
                                                const std::vector<std::size_t>& free, std::size_t n,
                                                std::size_t p, DfMethod method) {
  const auto K = static_cast<std::size_t>(at.gamma.size());
  const double s = at.e.r2 / static_cast<double>(n - p);
  const auto m = static_cast<Eigen::Index>(free.size() + 1);
  auto pick = [&](const Eigen::VectorXd& full) {
    Eigen::VectorXd v(m);
    for (std::size_t a = 0; a < free.size(); ++a) v[static_cast<Eigen::Index>(a)] = full[static_cast<Eigen::Index>(free[a])];
    v[m - 1] = full[static_cast<Eigen::Index>(K)];
    return v;
  };
  Eigen::MatrixXd info(m, m);
  if (method != DfMethod::FiniteDifference) {
    const Eigen::MatrixXd ai = method == DfMethod::AverageInformation
                                   ? Eigen::MatrixXd(at.e.AI / (s * s * s))
                                   : observed_information(at.e, ev.expected_information(at.gamma), s);
    for (Eigen::Index a = 0; a < m; ++a) {
      const Eigen::Index ia = a == m - 1 ? static_cast<Eigen::Index>(K) : static_cast<Eigen::Index>(free[static_cast<std::size_t>(a)]);
      for (Eigen::Index b = 0; b < m; ++b) {
        const Eigen::Index ib = b == m - 1 ? static_cast<Eigen::Index>(K) : static_cast<Eigen::Index>(free[static_cast<std::size_t>(b)]);
        info(a, b) = ai(ia, ib);
      }
    }
  } else {
    Eigen::VectorXd theta(static_cast<Eigen::Index>(K + 1));
    for (std::size_t k = 0; k < K; ++k) theta[static_cast<Eigen::Index>(k)] = at.gamma[static_cast<Eigen::Index>(k)] * s;
    theta[static_cast<Eigen::Index>(K)] = s;
    auto score_at = [&](const Eigen::VectorXd& th) {
      const double se = th[static_cast<Eigen::Index>(K)];
      const Eigen::VectorXd g = th.head(static_cast<Eigen::Index>(K)) / se;
      return pick(theta_score(ev.evaluate(g, false), se));
    };
    for (Eigen::Index a = 0; a < m; ++a) {
      const Eigen::Index idx = a == m - 1 ? static_cast<Eigen::Index>(K) : static_cast<Eigen::Index>(free[static_cast<std::size_t>(a)]);
      const double v = theta[idx];
      const double h = std::min(1e-4 * std::max(v, 1e-2 * s), 0.5 * v);
      Eigen::VectorXd up = theta;
      Eigen::VectorXd dn = theta;
      up[idx] += h;
      dn[idx] -= h;
      info.col(a) = -(score_at(up) - score_at(dn)) / (2.0 * h);
    }
    info = 0.5 * (info + info.transpose()).eval();
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all()) return std::nullopt;
  return ldlt.solve(Eigen::MatrixXd::Identity(m, m));
}

}  // namespace

ModelFit fit_reml(const Eigen::VectorXd& y, const AllocationTable& design, const ModelSpec& spec,
                  const RemlOptions& options) {
  return fit_reml(make_problem(y, design, spec), spec, options);
}

ModelFit fit_reml(const RemlProblem& problem, const ModelSpec& spec, const RemlOptions& options) {
  const std::size_t n = problem.n();
  const std::size_t p = problem.p();
  const std::size_t K = problem.k();
  if (K != spec.random_terms.size()) throw UsageError("problem terms do not match the model spec");
  if (n <= p) throw StructuralError("no residual degrees of freedom");
  const double ldx = logdet_crossprod(problem.X);
  const auto ev = choose_backend(problem, options.backend);

  ModelFit fit;
  fit.spec = spec;
  fit.n = n;
  fit.backend = ev->name();

  auto evaluate = [&](const Eigen::VectorXd& g) {
    Point pt;
    pt.gamma = g;
    pt.e = ev->evaluate(g, true);
    pt.ll = profiled_loglik(pt.e, n, p, ldx);
    return pt;
  };

  Point cur = evaluate(Eigen::VectorXd::Constant(static_cast<Eigen::Index>(K), options.start));
  fit.loglik_trace.push_back(cur.ll);
  const auto Ki = static_cast<Eigen::Index>(K);

  for (int it = 1; it <= options.max_iter && K > 0; ++it) {
    fit.iterations = it;
    const Eigen::VectorXd grad = profiled_gradient(cur.e, n, p);
    const Eigen::MatrixXd info = profiled_information(cur.e, cur.gamma, n, p);
    std::vector<Eigen::Index> fr;
    for (Eigen::Index k = 0; k < Ki; ++k) {
      if (!(cur.gamma[k] <= 0.0 && grad[k] <= 0.0)) fr.push_back(k);
    }
    if (fr.empty()) {
      fit.converged = true;
      break;
    }
    const auto m = static_cast<Eigen::Index>(fr.size());
    Eigen::MatrixXd H(m, m);
    Eigen::VectorXd g(m);
    for (Eigen::Index a = 0; a < m; ++a) {
      g[a] = grad[fr[static_cast<std::size_t>(a)]];
      for (Eigen::Index b = 0; b < m; ++b) H(a, b) = info(fr[static_cast<std::size_t>(a)], fr[static_cast<std::size_t>(b)]);
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    Eigen::VectorXd d;
    if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0.0).all()) {
      d = ldlt.solve(g);
    } else {
      d = g.array() / H.diagonal().array().abs().max(1e-12);
    }
    Eigen::VectorXd dir = Eigen::VectorXd::Zero(Ki);
    for (Eigen::Index a = 0; a < m; ++a) dir[fr[static_cast<std::size_t>(a)]] = d[a];

    // Monotone backtracking along the projected path.
    bool moved = false;
    Point next;
    double t = 1.0;
    for (int bt = 0; bt < 40; ++bt, t *= 0.5) {
      const Eigen::VectorXd trial = (cur.gamma + t * dir).cwiseMax(0.0);
      next = evaluate(trial);
      if (next.ll >= cur.ll) {
        moved = true;
        break;
      }
    }
    if (!moved) {
      fit.converged = true;  // no ascent available at working precision
      break;
    }
    const double dll = std::abs(next.ll - cur.ll) / (1.0 + std::abs(cur.ll));
    double dstep = 0.0;
    for (Eigen::Index k = 0; k < Ki; ++k) {
      dstep = std::max(dstep, std::abs(next.gamma[k] - cur.gamma[k]) / (1.0 + cur.gamma[k]));
    }
    cur = std::move(next);
    fit.loglik_trace.push_back(cur.ll);
    if (dll < options.rel_tol && dstep < options.step_tol) {
      fit.converged = true;
      break;
    }
  }
  if (K == 0) fit.converged = true;

  const double s = cur.e.r2 / static_cast<double>(n - p);
  fit.gamma = cur.gamma;
  fit.sigma2_e = s;
  fit.reml_loglik = cur.ll;
  fit.beta = cur.e.beta;
  fit.beta_cov = s * cur.e.H1;
  std::vector<std::size_t> free;
  for (std::size_t k = 0; k < K; ++k) {
    const double g = cur.gamma[static_cast<Eigen::Index>(k)];
    fit.components[spec.random_terms[k]] = g * s;
    fit.boundary[spec.random_terms[k]] = g <= 0.0;
    if (g > 0.0) free.push_back(k);
  }
  fit.components["E"] = s;

  const auto cov = theta_covariance(*ev, cur, free, n, p, options.df_method);
  for (Eigen::Index j = 1; j < fit.beta.size(); ++j) {
    TTest t;
    t.estimate = fit.beta[j];
    const double var = fit.beta_cov(j, j);
    t.se = std::sqrt(std::max(var, 0.0));
    t.df = std::numeric_limits<double>::quiet_NaN();
    if (cov) {
      Eigen::VectorXd grad(static_cast<Eigen::Index>(free.size() + 1));
      for (std::size_t a = 0; a < free.size(); ++a) grad[static_cast<Eigen::Index>(a)] = cur.e.dvar_beta[free[a]](j, j);
      grad[static_cast<Eigen::Index>(free.size())] = cur.e.dvar_beta[K](j, j);
      const double v = grad.dot(*cov * grad);
      if (v > 0.0) t.df = 2.0 * var * var / v;
    }
    if (t.se > 0.0) {
      t.t = t.estimate / t.se;
      if (std::isfinite(t.df)) t.p_value = t_two_sided(t.t, t.df);
    }
    fit.tests.push_back(t);
  }
  return fit;
}

TTest fixed_effect_test(const ModelFit& fit, std::size_t index) {
  if (index == 0 || index > fit.tests.size()) throw UsageError("no such fixed-effect contrast");
  return fit.tests[index - 1];
}

LrTest lr_test_random(const ModelFit& full, const ModelFit& reduced) {
  if (full.n != reduced.n || full.spec.fixed != reduced.spec.fixed || full.beta.size() != reduced.beta.size()) {
    throw UsageError("likelihood-ratio test needs fits on the same data and fixed part");
  }
  for (const auto& key : reduced.spec.random_terms) {
    if (std::find(full.spec.random_terms.begin(), full.spec.random_terms.end(), key) == full.spec.random_terms.end()) {
      throw UsageError("reduced model term '" + key + "' is not in the full model");
    }
  }
  LrTest r;
  r.dropped = static_cast<int>(full.spec.random_terms.size() - reduced.spec.random_terms.size());
  r.statistic = std::max(0.0, 2.0 * (full.reml_loglik - reduced.reml_loglik));
  if (r.statistic == 0.0 || r.dropped == 0) {
    r.p_value = 1.0;
  } else {
    r.p_value = 0.5 * chisq_upper_tail(r.statistic, r.dropped - 1) + 0.5 * chisq_upper_tail(r.statistic, r.dropped);
  }
  return r;
}

}  // namespace txd
