// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "oracle.hpp"
#include "txd/anova.hpp"
#include "txd/design.hpp"
#include "txd/formula.hpp"
#include "txd/mixed_model.hpp"
#include "txd/reml_evaluator.hpp"
#include "txd/rng.hpp"
#include "txd/sim.hpp"

using namespace txd;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("FAILED " + what);
    }
  }
  void note(const std::string& what) { notes.push_back(what); }
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0, double e = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d, e);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int jobs() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

// ---------------------------------------------------------------------------

Outcome anova_skeletons() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  for (int ex = 1; ex <= 3; ++ex) {
    const SimConfig c = SimConfig::for_example(ex);
    const Dataset d = generate_dataset(c, 0);
    const auto bm = to_model(parse_formula(oracle::aov_formula(ex)), d.table);
    const auto table = anova(d.y, bm.lattice, "I");
    const auto want = oracle::anova_skeleton(ex);
    o.check(table.rows.size() == want.size(), "row count, example " + std::to_string(ex));
    for (std::size_t r = 0; r < std::min(want.size(), table.rows.size()); ++r) {
      const auto& got = table.rows[r];
      const bool same = got.stratum_key == want[r].stratum_key && got.source == want[r].source && got.df == want[r].df &&
                        got.ems.to_string() == want[r].ems;
      o.check(same, "example " + std::to_string(ex) + " row " + std::to_string(r) + ": " + got.source + " " +
                        std::to_string(got.df) + " " + got.ems.to_string());
    }
  }
  const double sec = seconds_since(t0);
  o.check(sec < 1.0, fmt("runtime %.2f s >= 1 s", sec));
  o.note(fmt("3 designs, runtime %.3f s", sec));
  return o;
}

Outcome covariance_eigenvalues() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int ex = 1; ex <= 3; ++ex) {
    const SimConfig c = SimConfig::for_example(ex);
    const Dataset d = generate_dataset(c, 0);
    const auto bm = to_model(parse_formula(oracle::aov_formula(ex)), d.table);
    const Decomposition dec(bm.lattice, "I");
    const auto qs = decompose(bm.lattice);
    const Eigen::MatrixXd V = oracle::covariance(d.table, c.truths);
    const auto& nodes = bm.lattice.random_nodes();
    for (std::size_t s = 0; s < nodes.size(); ++s) {
      const Eigen::VectorXd coef = dec.xi_coefficients(s);
      double xi = 0.0;
      for (std::size_t h = 0; h < dec.basis().size(); ++h) {
        xi += coef[static_cast<Eigen::Index>(h)] * c.truths.at(nodes[dec.basis()[h]].key());
      }
      const Eigen::MatrixXd& Q = qs[s].Q;
      const double rel = (V * Q - xi * Q).norm() / (xi * Q.norm());
      worst = std::max(worst, rel);
      o.check(rel <= 1e-8, fmt("example %g stratum ", ex) + nodes[s].key() + fmt(" rel %.2e", rel));
      if (ex == 1 && nodes[s].key() == "I:T") o.check(std::abs(xi - 2.25) < 1e-12, fmt("xi_IT = %.6f", xi));
      if (ex == 1 && nodes[s].key() == "T") o.check(std::abs(xi - 4.25) < 1e-12, fmt("xi_T = %.6f", xi));
    }
  }
  const double sec = seconds_since(t0);
  o.check(sec < 30.0, fmt("runtime %.1f s >= 30 s", sec));
  o.note(fmt("worst relative residual %.2e, xi_IT = 2.25, xi_T = 4.25, runtime %.1f s", worst, sec));
  return o;
}

Outcome satterthwaite_spots() {
  Outcome o;
  const double b = *satterthwaite_fixed_df(1.3, 1.3, 1.3, 2, 16, 5);
  const double c = *satterthwaite_fixed_df(0.4, 0.4, 0.4, 2, 6, 5);
  const double single = *satterthwaite_fixed_df(0.9, 0.0, 0.0, 2, 16, 5);
  o.check(std::abs(b - 3.0) < 1e-12, fmt("design b %.15g", b));
  o.check(std::abs(c - 2.0) < 1e-12, fmt("design c %.15g", c));
  o.check(std::abs(single - 15.0) < 1e-12, fmt("single term %.15g", single));
  o.note(fmt("equal MS: %.12g (b), %.12g (c); single term: %.12g", b, c, single));
  return o;
}

Outcome anova_equals_reml() {
  Outcome o;
  const SimConfig c = SimConfig::for_example(1);
  int interior = 0;
  double worst_comp = 0.0, worst_est = 0.0, worst_se = 0.0;
  for (std::uint64_t rep = 0; interior < 200 && rep < 2000; ++rep) {
    const Dataset d = generate_dataset(c, rep);
    const auto bm = to_model(parse_formula(oracle::aov_formula(1)), d.table);
    const auto table = anova(d.y, bm.lattice, "I");
    const Decomposition dec(bm.lattice, "I");
    const auto comp = estimate_components_anova(table, dec, true);
    if (comp.sigma2.at("T") <= 0.0 || comp.sigma2.at("I:T") <= 0.0) continue;
    ++interior;
    const ModelFit f = fit_reml(d.y, d.table, c.model());
    o.check(f.converged, "REML converged, replicate " + std::to_string(rep));
    for (const char* k : {"T", "I:T", "E"}) {
      worst_comp = std::max(worst_comp, std::abs(f.components.at(k) - comp.sigma2.at(k)) / comp.sigma2.at(k));
    }
    double arm[2] = {0.0, 0.0};
    int cnt[2] = {0, 0};
    for (std::size_t u = 0; u < d.table.size(); ++u) {
      arm[d.table.rows[u].intervention] += d.y[static_cast<Eigen::Index>(u)];
      ++cnt[d.table.rows[u].intervention];
    }
    const double est = 0.5 * (arm[0] / cnt[0] - arm[1] / cnt[1]);
    const double se = std::sqrt(table.find("I:T", "Residual")->ms / static_cast<double>(d.table.size()));
    worst_est = std::max(worst_est, std::abs(f.delta1() - est) / std::abs(est));
    worst_se = std::max(worst_se, std::abs(f.se_delta1() - se) / se);
  }
  o.check(interior == 200, "found 200 interior datasets");
  o.check(worst_comp <= 1e-6, fmt("component rel %.2e", worst_comp));
  o.check(worst_est <= 1e-8, fmt("estimate rel %.2e", worst_est));
  o.check(worst_se <= 1e-8, fmt("SE rel %.2e", worst_se));
  o.note(fmt("%g datasets; max rel diff components %.1e, estimate %.1e, SE %.1e", interior, worst_comp, worst_est, worst_se));
  return o;
}

// ---------------------------------------------------------------------------

struct StudyRuns {
  std::vector<SimSummary> cells;
  int failed = 0;
  bool monotone = true;
};

SimSummary run_cell(StudyRuns& runs, int example, int method, double d3, double d2, int reps) {
  SimConfig c = SimConfig::for_example(example);
  c.method = method;
  c.delta3 = d3;
  c.delta2 = d2;
  c.replications = reps;
  SimSummary s = run_study(c, jobs());
  runs.failed += s.n_failed;
  runs.monotone = runs.monotone && s.monotone;
  runs.cells.push_back(s);
  return s;
}

const SimSummary& cell(const StudyRuns& r, int example, int method, double d3, double d2) {
  for (const auto& s : r.cells) {
    if (s.config.example == example && s.config.method == method && s.config.delta3 == d3 && s.config.delta2 == d2) return s;
  }
  throw std::runtime_error("missing cell");
}

Outcome simulation_study(StudyRuns& runs, double& example1_seconds) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  for (int m = 1; m <= 5; ++m) {
    for (double d3 : {0.0, 0.2}) {
      for (double d2 : {0.0, 0.2}) {
        if (d3 != 0.0 && m >= 2 && m <= 4) continue;
        const SimSummary s = run_cell(runs, 1, m, d3, d2, 1000);
        o.check(std::abs(s.delta1.mean - 0.315) <= 0.01,
                fmt("D%g1 (%.1f, %.1f) mean delta1 %.4f", m, d3, d2, s.delta1.mean));
      }
    }
  }
  example1_seconds = seconds_since(t0);
  std::vector<SimSummary> ex1(runs.cells.begin(), runs.cells.end());
  std::cout << compare_methods(ex1).to_markdown() << "\n";

  const auto& base = cell(runs, 1, 4, 0.0, 0.0);
  o.check(std::abs(base.se.mean - 0.082) <= 0.005, fmt("baseline SE %.4f", base.se.mean));
  o.check(std::abs(base.type1.mean - 0.05) <= 0.02, fmt("baseline Type I %.3f", base.type1.mean));
  o.check(std::abs(base.type2.mean - 0.06) <= 0.02, fmt("baseline Type II %.3f", base.type2.mean));
  o.check(std::abs(base.boundary.mean - 0.14) <= 0.04, fmt("baseline boundary %.3f", base.boundary.mean));
  const auto& conf = cell(runs, 1, 1, 0.2, 0.0);
  o.check(conf.sigma_v1.mean >= 0.8, fmt("confounded sigma2_v1 %.3f", conf.sigma_v1.mean));
  o.check(conf.type2.mean >= 0.55, fmt("confounded Type II %.3f", conf.type2.mean));
  const auto& infl = cell(runs, 1, 5, 0.2, 0.2);
  o.check(infl.type1.mean >= 0.12, fmt("inflation Type I %.3f", infl.type1.mean));
  o.note(fmt("baseline SE %.4f, Type I %.3f, Type II %.3f, boundary %.3f", base.se.mean, base.type1.mean,
             base.type2.mean, base.boundary.mean));
  o.note(fmt("confounded sigma2_v1 %.3f, Type II %.3f; inflation Type I %.3f", conf.sigma_v1.mean, conf.type2.mean,
             infl.type1.mean));
  o.note(fmt("example 1: 14 cells x 1000 replicates in %.1f s on %g thread(s)", example1_seconds, jobs()));

  // Examples 2 and 3: direction signatures at 500 replicates.
  for (int ex : {2, 3}) {
    const double truth = SimConfig::for_example(ex).truths.at("delta1");
    const double su1 = SimConfig::for_example(ex).truths.at("T");
    for (int m = 1; m <= 4; ++m) {
      for (double d2 : {0.0, 0.2}) run_cell(runs, ex, m, 0.0, d2, 500);
    }
    for (double d3 : {0.0, 0.2}) run_cell(runs, ex, 5, d3, 0.0, 500);
    for (const auto& s : runs.cells) {
      if (s.config.example != ex) continue;
      const double bias = s.delta1.mean - truth;
      o.check(std::abs(bias) <= 3.0 * s.delta1.mc_se,
              fmt("example %g D%g: bias %.4f beyond 3 MC SE (%.4f)", ex, s.config.method, bias, s.delta1.mc_se));
    }
    for (int m = 1; m <= 3; ++m) {
      const double u = cell(runs, ex, m, 0.0, 0.2).sigma_u1.mean;
      o.check(u > 5.0 * su1, fmt("example %g D%g: matched therapists absorb the covariate (sigma2_u1 %.3f)", ex, m, u));
    }
    const auto& r0 = cell(runs, ex, 4, 0.0, 0.0);
    const auto& r2 = cell(runs, ex, 4, 0.0, 0.2);
    o.check(r2.sigma_u1.mean < 2.0 * su1, fmt("example %g D4: sigma2_u1 %.3f under randomisation", ex, r2.sigma_u1.mean));
    o.check(r2.se.mean > r0.se.mean, fmt("example %g D4: SE %.4f not above %.4f", ex, r2.se.mean, r0.se.mean));
    const auto& v0 = cell(runs, ex, 5, 0.0, 0.0);
    const auto& v2 = cell(runs, ex, 5, 0.2, 0.0);
    const double sd0 = v0.delta1.mc_se * std::sqrt(static_cast<double>(v0.n_ok));
    const double sd2 = v2.delta1.mc_se * std::sqrt(static_cast<double>(v2.n_ok));
    o.check(sd2 > sd0, fmt("example %g D5: spread of delta1 %.4f not above %.4f", ex, sd2, sd0));
    o.note(fmt("example %g: D5 sd(delta1) %.3f -> %.3f, Type I %.3f -> %.3f", ex, sd0, sd2, v0.type1.mean,
               v2.type1.mean));
  }
  const double sec = seconds_since(t0);
  o.note(fmt("total %.1f s", sec));
  return o;
}

Outcome reml_internals(const StudyRuns& runs) {
  Outcome o;
  // 32-unit toy: 2 interventions x 4 therapists x 4 replicates.
  DesignSpec s;
  s.nI = 2;
  s.nT = 4;
  s.nR = 4;
  s.seed = 9;
  const AllocationTable t = randomise(s);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  Eigen::VectorXd y(32);
  for (Eigen::Index u = 0; u < 32; ++u) y[u] = nd(rng) + (t.rows[static_cast<std::size_t>(u)].therapist % 3) * 0.5;
  const RemlProblem p = make_problem(y, t, ModelSpec::for_shape(Shape::CompletelyRandomised));
  const auto ev = make_block_evaluator(p);
  double worst = 0.0;
  for (const Eigen::Vector3d& theta : {Eigen::Vector3d(0.3, 0.2, 1.0), Eigen::Vector3d(1.5, 0.05, 0.6)}) {
    const Eigen::VectorXd score = theta_score(ev->evaluate(theta.head(2) / theta[2], false), theta[2]);
    for (Eigen::Index a = 0; a < 3; ++a) {
      auto ll = [&](double step) {
        Eigen::Vector3d th = theta;
        th[a] += step;
        std::vector<std::vector<long>> terms;
        for (const auto& f : p.terms) terms.emplace_back(f.levels().begin(), f.levels().end());
        return oracle::reml_loglik(p.y, p.X, oracle::covariance(terms, {th[0], th[1]}, th[2]));
      };
      const double h = 1e-5 * theta[a];
      const double fd = (ll(h) - ll(-h)) / (2.0 * h);
      worst = std::max(worst, std::abs(score[a] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  o.check(worst <= 1e-5, fmt("gradient rel %.2e", worst));
  o.check(runs.monotone, "non-monotone REML iteration in the simulation runs");
  int ex1_failed = 0;
  for (const auto& c : runs.cells) {
    if (c.config.example == 1) ex1_failed += c.n_failed;
  }
  o.check(ex1_failed == 0, fmt("%g failed fits in the 14 000 example-1 fits", ex1_failed));
  o.note(fmt("gradient vs finite differences: max rel %.1e; monotone in all fits; %g failed fits (examples 1-3: %g)", worst,
             ex1_failed, runs.failed));
  return o;
}

// ---------------------------------------------------------------------------

Outcome formula_front_end() {
  Outcome o;
  const std::map<int, std::set<std::string>> want{
      {1, {"U", "T", "I:T", "E"}},
      {2, {"U", "I", "T", "B", "I:T", "I:B", "T:B", "I:T:B", "E"}},
      {3, {"U", "I", "C", "B", "I:C", "T", "I:B", "C:B", "I:T", "I:C:B", "T:B", "I:T:B", "E"}}};
  for (int ex = 1; ex <= 3; ++ex) {
    const AllocationTable table = systematic_design(SimConfig::for_example(ex).design());
    std::vector<FactorLattice> lattices;
    for (const auto& text : {oracle::aov_formula(ex), oracle::lmer_formula(ex)}) {
      const FormulaAst ast = parse_formula(text);
      o.check(render(ast) == text, "render " + text);
      const std::string norm = render(expand(ast));
      o.check(render(expand(parse_formula(norm))) == norm, "normalised round trip " + norm);
      lattices.push_back(to_model(ast, table).lattice);
    }
    for (const auto& lat : lattices) {
      std::set<std::string> keys;
      for (const auto& n : lat.random_nodes()) keys.insert(n.key());
      o.check(keys == want.at(ex), "node set, example " + std::to_string(ex));
    }
    const auto& a = lattices[0].random_nodes();
    const auto& b = lattices[1];
    for (const auto& n : a) {
      const auto idx = b.find_random(n.key());
      o.check(idx && b.random_nodes()[*idx].factor.same_partition(n.factor), "partition " + n.key());
    }
    // Dependent I node in designs b and c.
    if (ex > 1) {
      const auto i = lattices[0].find_random("I");
      o.check(i && a[*i].role == Role::DependentRandom, "dependent I, example " + std::to_string(ex));
    }
  }
  o.note("6 formulas: stable rendering, aov and lmer lattices equal as partitions, expected node sets");
  return o;
}

Outcome randomiser_statistics() {
  Outcome o;
  DesignSpec s;
  s.nI = 2;
  s.nT = 2;
  s.nR = 1;
  std::map<std::string, long> seen;
  const long seeds = 10000;
  for (long k = 0; k < seeds; ++k) {
    s.seed = static_cast<std::uint64_t>(k);
    seen[randomise(s).to_csv()]++;
  }
  o.check(seen.size() == 24, "all 24 orderings seen");
  long lo = seeds, hi = 0;
  for (const auto& [k, n] : seen) {
    lo = std::min(lo, n);
    hi = std::max(hi, n);
    o.check(oracle::within_binomial(n, seeds, 1.0 / 24.0), "count " + std::to_string(n) + " outside 3 sigma");
  }
  int blocks = 0;
  for (int ex = 1; ex <= 3; ++ex) {
    for (int m = 3; m <= 5; ++m) {
      for (std::uint64_t rep = 0; rep < 20; ++rep) {
        SimConfig c = SimConfig::for_example(ex);
        c.method = m;
        c.delta3 = m == 5 ? 0.2 : 0.0;
        const Dataset d = generate_dataset(c, rep);
        const auto sys = systematic_design(c.design());
        for (int cc = 0; cc < sys.spec.nC; ++cc) {
          for (int b = 0; b < sys.spec.nB; ++b) {
            ++blocks;
            o.check(cell_counts(d.table, cc, b) == cell_counts(sys, cc, b), "block balance");
          }
        }
      }
    }
  }
  o.note(fmt("24 orderings, counts %g..%g (expected %.1f); %g blocks balanced", lo, hi, seeds / 24.0, blocks));
  return o;
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  std::map<int, std::pair<std::string, Outcome>> results;
  auto record = [&](int id, const char* name, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o.pass = false;
      o.note(std::string("exception: ") + e.what());
    }
    results[id] = {name, o};
  };
  StudyRuns runs;
  double ex1_seconds = 0.0;
  record(1, "ANOVA strata, sources, df and EMS for designs a, b, c", anova_skeletons);
  record(2, "Cov(Y) Q_F = xi_F Q_F on every stratum", covariance_eigenvalues);
  record(3, "Satterthwaite df spot values", satterthwaite_spots);
  record(4, "ANOVA and REML agree on balanced design-a data", anova_equals_reml);
  record(5, "simulation study: example 1 cells and example 2-3 signatures",
         [&] { return simulation_study(runs, ex1_seconds); });
  record(6, "formula parsing, normalisation and lattices", formula_front_end);
  record(7, "REML gradient, monotone iterations, no failed fits", [&] { return reml_internals(runs); });
  record(8, "permutation uniformity and block balance", randomiser_statistics);

  bool all = true;
  for (const auto& [id, r] : results) {
    const auto& [name, o] = r;
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << name << "\n";
    for (const auto& n : o.notes) std::cout << "      " << n << "\n";
  }
  std::cout << fmt("total runtime %.1f s\n", seconds_since(t0));
  return all ? 0 : 1;
}
