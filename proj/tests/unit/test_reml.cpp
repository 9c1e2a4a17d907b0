#include <doctest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <random>

#include "oracle.hpp"
#include "txd/anova.hpp"
#include "txd/error.hpp"
#include "txd/formula.hpp"
#include "txd/mixed_model.hpp"
#include "txd/reml_evaluator.hpp"
#include "txd/sim.hpp"

using namespace txd;

namespace {

// y drawn from N(Xβ, V) with V from the oracle covariance.
Eigen::VectorXd draw(const AllocationTable& t, const std::map<std::string, double>& sigma2, double effect,
                     std::uint64_t seed) {
  const Eigen::MatrixXd V = oracle::covariance(t, sigma2);
  const Eigen::MatrixXd L = V.llt().matrixL();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Eigen::VectorXd z(V.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = nd(rng);
  Eigen::VectorXd y = L * z;
  for (std::size_t u = 0; u < t.size(); ++u) {
    y[static_cast<Eigen::Index>(u)] += t.rows[u].intervention == 0 ? effect : -effect;
  }
  return y;
}

AllocationTable toy_table(std::uint64_t seed) {
  DesignSpec s;
  s.nI = 2;
  s.nT = 4;
  s.nR = 4;
  s.seed = seed;
  return randomise(s);
}

// Unbalanced variant: drop a few units so no closed form applies.
RemlProblem toy_problem(std::uint64_t seed, bool unbalanced) {
  const auto t = toy_table(seed);
  const Eigen::VectorXd y = draw(t, {{"T", 0.4}, {"I:T", 0.3}, {"E", 1.0}}, 0.5, seed);
  RemlProblem p = make_problem(y, t, ModelSpec::for_shape(Shape::CompletelyRandomised));
  if (!unbalanced) return p;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index u = 0; u < p.y.size(); ++u) {
    if (u % 7 != 3) keep.push_back(u);
  }
  RemlProblem q;
  q.y.resize(static_cast<Eigen::Index>(keep.size()));
  q.X.resize(static_cast<Eigen::Index>(keep.size()), p.X.cols());
  std::vector<std::vector<std::int32_t>> lev(p.terms.size());
  std::vector<std::int32_t> fl;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    q.y[static_cast<Eigen::Index>(i)] = p.y[keep[i]];
    q.X.row(static_cast<Eigen::Index>(i)) = p.X.row(keep[i]);
    for (std::size_t k = 0; k < p.terms.size(); ++k) lev[k].push_back(p.terms[k].level(static_cast<std::size_t>(keep[i])));
    fl.push_back(p.fixed.level(static_cast<std::size_t>(keep[i])));
  }
  for (std::size_t k = 0; k < p.terms.size(); ++k) q.terms.emplace_back(p.terms[k].name(), lev[k]);
  q.fixed = Factor(p.fixed.name(), fl, Role::Fixed);
  return q;
}

Eigen::MatrixXd dense_v(const RemlProblem& p, const Eigen::VectorXd& theta) {
  std::vector<std::vector<long>> terms;
  std::vector<double> s;
  for (std::size_t k = 0; k < p.k(); ++k) {
    terms.emplace_back(p.terms[k].levels().begin(), p.terms[k].levels().end());
    s.push_back(theta[static_cast<Eigen::Index>(k)]);
  }
  return oracle::covariance(terms, s, theta[static_cast<Eigen::Index>(p.k())]);
}

void check_same(const UnitEval& a, const UnitEval& b, double tol) {
  CHECK(std::abs(a.logdet_V1 - b.logdet_V1) < tol * (1 + std::abs(a.logdet_V1)));
  CHECK(std::abs(a.logdet_XVX1 - b.logdet_XVX1) < tol * (1 + std::abs(a.logdet_XVX1)));
  CHECK(std::abs(a.r2 - b.r2) < tol * (1 + a.r2));
  CHECK((a.beta - b.beta).norm() < tol * (1 + a.beta.norm()));
  CHECK((a.tr_PJ - b.tr_PJ).norm() < tol * (1 + a.tr_PJ.norm()));
  CHECK(std::abs(a.tr_P - b.tr_P) < tol * (1 + a.tr_P));
  CHECK((a.q - b.q).norm() < tol * (1 + a.q.norm()));
  CHECK((a.AI - b.AI).norm() < tol * (1 + a.AI.norm()));
  REQUIRE(a.dvar_beta.size() == b.dvar_beta.size());
  for (std::size_t k = 0; k < a.dvar_beta.size(); ++k) CHECK((a.dvar_beta[k] - b.dvar_beta[k]).norm() < tol * (1 + a.dvar_beta[k].norm()));
}

}  // namespace

TEST_CASE("restricted likelihood matches the dense oracle") {
  for (bool unbalanced : {false, true}) {
    const RemlProblem p = toy_problem(1, unbalanced);
    const Eigen::VectorXd theta = (Eigen::VectorXd(3) << 0.5, 0.2, 1.3).finished();
    const Eigen::VectorXd gamma = theta.head(2) / theta[2];
    const double ldx = logdet_crossprod(p.X);
    for (const auto& ev : {make_dense_evaluator(p), make_block_evaluator(p)}) {
      const double ll = restricted_loglik(ev->evaluate(gamma, false), theta[2], p.n(), p.p(), ldx);
      CHECK(ll == doctest::Approx(oracle::reml_loglik(p.y, p.X, dense_v(p, theta))).epsilon(1e-10));
    }
  }
}

TEST_CASE("analytic score matches finite differences on a 32-unit toy") {
  for (bool unbalanced : {false, true}) {
    CAPTURE(unbalanced);
    const RemlProblem p = toy_problem(2, unbalanced);
    if (!unbalanced) REQUIRE(p.n() == 32);
    const Eigen::VectorXd theta = (Eigen::VectorXd(3) << 0.35, 0.6, 0.9).finished();
    const auto ev = make_block_evaluator(p);
    const Eigen::VectorXd score = theta_score(ev->evaluate(theta.head(2) / theta[2], false), theta[2]);
    for (Eigen::Index a = 0; a < 3; ++a) {
      const double h = 1e-5 * theta[a];
      Eigen::VectorXd up = theta, dn = theta;
      up[a] += h;
      dn[a] -= h;
      const double fd = (oracle::reml_loglik(p.y, p.X, dense_v(p, up)) - oracle::reml_loglik(p.y, p.X, dense_v(p, dn))) / (2 * h);
      CHECK(std::abs(score[a] - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
    // Profiled gradient in γ.
    const Eigen::VectorXd gamma = theta.head(2) / theta[2];
    const Eigen::VectorXd g = profiled_gradient(ev->evaluate(gamma, false), p.n(), p.p());
    const double ldx = logdet_crossprod(p.X);
    for (Eigen::Index a = 0; a < 2; ++a) {
      const double h = 1e-6;
      Eigen::VectorXd up = gamma, dn = gamma;
      up[a] += h;
      dn[a] -= h;
      const double fd = (profiled_loglik(ev->evaluate(up, false), p.n(), p.p(), ldx) -
                         profiled_loglik(ev->evaluate(dn, false), p.n(), p.p(), ldx)) / (2 * h);
      CHECK(std::abs(g[a] - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("observed information matches differenced scores") {
  const RemlProblem p = toy_problem(3, true);
  const auto ev = make_dense_evaluator(p);
  const Eigen::VectorXd theta = (Eigen::VectorXd(3) << 0.3, 0.5, 1.1).finished();
  const double s = theta[2];
  const UnitEval e = ev->evaluate(theta.head(2) / s, true);
  const Eigen::MatrixXd obs = observed_information(e, ev->expected_information(theta.head(2) / s), s);
  for (Eigen::Index a = 0; a < 3; ++a) {
    const double h = 1e-5;
    Eigen::VectorXd up = theta, dn = theta;
    up[a] += h;
    dn[a] -= h;
    const Eigen::VectorXd su = theta_score(ev->evaluate(up.head(2) / up[2], false), up[2]);
    const Eigen::VectorXd sd = theta_score(ev->evaluate(dn.head(2) / dn[2], false), dn[2]);
    const Eigen::VectorXd col = -(su - sd) / (2 * h);
    CHECK((col - obs.col(a)).norm() <= 1e-6 * (1 + obs.col(a).norm()));
  }
}

TEST_CASE("backends agree") {
  SUBCASE("balanced designs, all three backends") {
    for (int ex = 1; ex <= 2; ++ex) {
      SimConfig c = SimConfig::for_example(ex);
      const Dataset d = generate_dataset(c, 1);
      const RemlProblem p = make_problem(d.y, d.table, c.model());
      const auto strata = make_strata_evaluator(p);
      REQUIRE(strata != nullptr);
      const auto dense = make_dense_evaluator(p);
      const auto block = make_block_evaluator(p);
      Eigen::VectorXd g = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(p.k()), 0.05, 0.9);
      g[0] = 0.0;
      const UnitEval ed = dense->evaluate(g, true);
      check_same(ed, strata->evaluate(g, true), 1e-9);
      check_same(ed, block->evaluate(g, true), 1e-9);
      const Eigen::MatrixXd ei = dense->expected_information(g);
      CHECK((ei - strata->expected_information(g)).norm() < 1e-9 * ei.norm());
      CHECK((ei - block->expected_information(g)).norm() < 1e-9 * ei.norm());
    }
  }
  SUBCASE("unbalanced toy, every block grouping") {
    const RemlProblem p = toy_problem(4, true);
    CHECK(make_strata_evaluator(p) == nullptr);
    const Eigen::VectorXd g = (Eigen::VectorXd(2) << 0.7, 0.2).finished();
    const auto dense = make_dense_evaluator(p);
    const UnitEval ed = dense->evaluate(g, true);
    const Eigen::MatrixXd ei = dense->expected_information(g);
    for (int bt : {-3, -2, -1, 0, 1}) {
      CAPTURE(bt);
      const auto block = make_block_evaluator(p, bt);
      check_same(ed, block->evaluate(g, true), 1e-9);
      CHECK((ei - block->expected_information(g)).norm() < 1e-9 * ei.norm());
    }
  }
}

TEST_CASE("fits are monotone and converge") {
  for (int m : {1, 4, 5}) {
    SimConfig c = SimConfig::for_example(1);
    c.method = m;
    c.delta2 = 0.2;
    const Dataset d = generate_dataset(c, 8);
    const ModelFit f = fit_reml(d.y, d.table, c.model());
    CHECK(f.converged);
    for (std::size_t i = 1; i < f.loglik_trace.size(); ++i) CHECK(f.loglik_trace[i] >= f.loglik_trace[i - 1]);
    CHECK(f.reml_loglik == f.loglik_trace.back());
    CHECK(std::isfinite(f.tests.front().df));
  }
}

TEST_CASE("ANOVA and REML coincide on balanced data with interior estimates") {
  SimConfig c = SimConfig::for_example(1);
  int checked = 0;
  for (std::uint64_t rep = 0; rep < 30; ++rep) {
    const Dataset d = generate_dataset(c, rep);
    const auto bm = to_model(parse_formula(oracle::aov_formula(1)), d.table);
    const auto table = anova(d.y, bm.lattice, "I");
    const auto comp = estimate_components_anova(table, Decomposition(bm.lattice, "I"), true);
    if (comp.sigma2.at("T") <= 0.0 || comp.sigma2.at("I:T") <= 0.0) continue;
    ++checked;
    const ModelFit f = fit_reml(d.y, d.table, c.model());
    for (const char* k : {"T", "I:T", "E"}) CHECK(f.components.at(k) == doctest::Approx(comp.sigma2.at(k)).epsilon(1e-6));
    // Balanced case: the GLS effect is the contrast of arm means and its
    // variance is the I∧T stratum residual mean square over N.
    const double ms = table.find("I:T", "Residual")->ms;
    CHECK(f.se_delta1() == doctest::Approx(std::sqrt(ms / 320.0)).epsilon(1e-8));
    CHECK(f.tests.front().df == doctest::Approx(15.0).epsilon(1e-6));
  }
  CHECK(checked > 10);
}

TEST_CASE("three-level interventions give uncorrelated balanced contrasts") {
  DesignSpec s;
  s.nI = 3;
  s.nT = 5;
  s.nR = 4;
  s.seed = 12;
  const auto t = randomise(s);
  const Eigen::VectorXd y = draw(t, {{"T", 0.3}, {"I:T", 0.2}, {"E", 1.0}}, 0.3, 12);
  const ModelFit f = fit_reml(y, t, ModelSpec::for_shape(Shape::CompletelyRandomised));
  REQUIRE(f.tests.size() == 2);
  CHECK(std::abs(f.beta_cov(1, 2)) < 1e-10 * f.beta_cov(1, 1));
  const auto j = nlohmann::json::parse(f.to_json());
  CHECK(j.at("contrasts").size() == 2);
  CHECK(j.contains("components"));
  CHECK(j.at("converged").get<bool>());
}

TEST_CASE("boundary estimates") {
  const auto t = toy_table(21);
  const Eigen::VectorXd y = draw(t, {{"E", 1.0}}, 0.4, 21);
  RemlOptions o;
  o.df_method = DfMethod::ObservedInformation;
  const ModelFit f = fit_reml(y, t, ModelSpec::for_shape(Shape::CompletelyRandomised), o);
  CHECK(f.converged);
  if (f.any_boundary()) {
    // Dropping a zero component leaves the likelihood unchanged.
    ModelSpec reduced = ModelSpec::for_shape(Shape::CompletelyRandomised);
    reduced.random_terms.clear();
    for (const auto& [k, b] : f.boundary) {
      if (!b) reduced.random_terms.push_back(k);
    }
    const ModelFit r = fit_reml(y, t, reduced);
    CHECK(r.reml_loglik == doctest::Approx(f.reml_loglik).epsilon(1e-8));
    const LrTest lr = lr_test_random(f, r);
    CHECK(lr.p_value == doctest::Approx(1.0));
  }
  for (const auto& [k, v] : f.components) CHECK(v >= 0.0);
}

TEST_CASE("df methods agree where they should") {
  SimConfig c = SimConfig::for_example(1);
  c.method = 1;
  const Dataset d = generate_dataset(c, 2);
  RemlOptions obs, fd, ai;
  fd.df_method = DfMethod::FiniteDifference;
  ai.df_method = DfMethod::AverageInformation;
  const double d_obs = fit_reml(d.y, d.table, c.model(), obs).tests.front().df;
  const double d_fd = fit_reml(d.y, d.table, c.model(), fd).tests.front().df;
  const double d_ai = fit_reml(d.y, d.table, c.model(), ai).tests.front().df;
  CHECK(d_obs == doctest::Approx(d_fd).epsilon(1e-6));
  CHECK(std::isfinite(d_ai));
}

TEST_CASE("likelihood-ratio test") {
  SimConfig c = SimConfig::for_example(1);
  const Dataset d = generate_dataset(c, 3);
  const ModelFit full = fit_reml(d.y, d.table, c.model());
  ModelSpec small = c.model();
  small.random_terms = {"T"};
  const ModelFit red = fit_reml(d.y, d.table, small);
  const LrTest lr = lr_test_random(full, red);
  CHECK(lr.dropped == 1);
  CHECK(lr.statistic >= 0.0);
  CHECK(lr.p_value == doctest::Approx(0.5 * chisq_upper_tail(lr.statistic, 1)));
  CHECK_THROWS_AS(lr_test_random(red, full), UsageError);
}

TEST_CASE("structural problems are reported") {
  SimConfig c = SimConfig::for_example(1);
  const Dataset d = generate_dataset(c, 0);
  ModelSpec bad = c.model();
  bad.random_terms = {"T", "X"};
  CHECK_THROWS(fit_reml(d.y, d.table, bad));
  CHECK_THROWS_AS(effect_coding(1), ConfigError);
}
