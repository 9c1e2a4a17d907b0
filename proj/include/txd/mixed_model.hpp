#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "txd/design.hpp"
#include "txd/reml_evaluator.hpp"

namespace txd {

/// Random-intercept terms over factor keys ("T", "I:T", ...) plus an
/// effect-coded fixed factor. Every term carries its own independent
/// variance; intercepts and slopes are uncorrelated by construction.
struct ModelSpec {
  std::string fixed = "I";                 // "" for an intercept-only model
  std::vector<std::string> random_terms;
  std::optional<Eigen::MatrixXd> contrasts;  // n_levels × (n_levels − 1); default effect_coding

  /// The analysis model matching a design shape.
  static ModelSpec for_shape(Shape shape);
};

/// Sum-to-zero contrasts. Two levels give (1, −1); more levels use the
/// Helmert-style set whose k-th column averages the first m = n−k levels
/// against level m+1, e.g. (½, ½, −1) and (1, −1, 0) for three levels.
Eigen::MatrixXd effect_coding(int n_levels);

enum class Backend { Auto, Strata, Block, Dense };
/// Information matrix behind the Satterthwaite df. ObservedInformation is
/// analytic; FiniteDifference differences the score and serves as a check.
enum class DfMethod { ObservedInformation, AverageInformation, FiniteDifference };

struct RemlOptions {
  double rel_tol = 1e-10;   // relative change of the restricted log-likelihood
  double step_tol = 1e-7;   // max |Δγ| / (1 + γ)
  int max_iter = 200;
  double start = 0.1;       // initial variance ratio for every term
  Backend backend = Backend::Auto;
  DfMethod df_method = DfMethod::ObservedInformation;
};

struct TTest {
  double estimate = 0.0;
  double se = 0.0;
  double df = 0.0;
  double t = 0.0;
  std::optional<double> p_value;  // empty when SE or df is undefined
};

struct ModelFit {
  ModelSpec spec;
  std::size_t n = 0;
  Eigen::VectorXd beta;          // (δ0, δ1, ...)
  Eigen::MatrixXd beta_cov;
  std::vector<TTest> tests;      // one per non-intercept coefficient
  std::map<std::string, double> components;  // term keys plus "E"
  std::map<std::string, bool> boundary;
  Eigen::VectorXd gamma;         // σ²_k / σ²_e
  double sigma2_e = 0.0;
  double reml_loglik = 0.0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> loglik_trace;
  std::string backend;

  double delta1() const { return beta.size() > 1 ? beta[1] : 0.0; }
  double se_delta1() const { return tests.empty() ? 0.0 : tests.front().se; }
  bool any_boundary() const;

  /// {fixed: {estimate, se, df, t, p}, components, boundary, reml_loglik, converged, ...}
  std::string to_json() const;
};

/// Factor for a term key on an allocation table ("I:T" is I∧T).
Factor design_term(const AllocationTable& design, const std::string& key);

/// Builds y, X and the term partitions for a model on a design.
RemlProblem make_problem(const Eigen::VectorXd& y, const AllocationTable& design, const ModelSpec& spec);

/// REML by projected average-information Newton steps on the variance
/// ratios with σ²_e profiled out. Fixed effects by GLS at the optimum.
ModelFit fit_reml(const Eigen::VectorXd& y, const AllocationTable& design, const ModelSpec& spec,
                  const RemlOptions& options = {});

/// Same, on a prepared problem whose terms follow spec.random_terms.
ModelFit fit_reml(const RemlProblem& problem, const ModelSpec& spec, const RemlOptions& options = {});

/// Satterthwaite t-test for coefficient `index` (1 = δ1).
TTest fixed_effect_test(const ModelFit& fit, std::size_t index = 1);

struct LrTest {
  double statistic = 0.0;
  int dropped = 0;
  double p_value = 1.0;
};

/// Restricted likelihood-ratio test of a nested random-effects model. The
/// reference distribution is the equal mixture of χ²_{m−1} and χ²_m for m
/// dropped components (χ²_0 is a point mass at zero).
LrTest lr_test_random(const ModelFit& full, const ModelFit& reduced);

}  // namespace txd
