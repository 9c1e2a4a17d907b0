#pragma once

// Restricted-likelihood building blocks. Every backend evaluates the model
// V = s·V1(γ), V1 = I + Σ_k γ_k Z_k Z_k', at s = 1; results for other s
// follow by scaling (see restricted_loglik and theta_score).

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "txd/factor.hpp"

namespace txd {

struct RemlProblem {
  Eigen::VectorXd y;
  Eigen::MatrixXd X;
  std::vector<Factor> terms;  // random-intercept partitions, one per variance parameter
  Factor fixed;               // factor spanned by X (for the strata backend)

  std::size_t n() const noexcept { return static_cast<std::size_t>(y.size()); }
  std::size_t p() const noexcept { return static_cast<std::size_t>(X.cols()); }
  std::size_t k() const noexcept { return terms.size(); }
};

/// Quantities at (γ, s = 1). Index K of the AI matrix is the residual.
struct UnitEval {
  double logdet_V1 = 0.0;
  double logdet_XVX1 = 0.0;
  double r2 = 0.0;          // y' P1 y
  Eigen::VectorXd beta;     // GLS estimate
  Eigen::MatrixXd H1;       // (X' V1^-1 X)^-1
  Eigen::VectorXd tr_PJ;    // tr(P1 J_k)
  double tr_P = 0.0;        // tr(P1)
  Eigen::VectorXd q;        // ‖Z_k' P1 y‖²
  double q_e = 0.0;         // ‖P1 y‖²
  std::vector<Eigen::MatrixXd> dvar_beta;  // ∂Var(β)/∂θ_k, k = 0..K (K = residual)
  Eigen::MatrixXd AI;       // ½ u_k' P1 u_l with u_k = J_k P1 y, u_K = P1 y
  bool has_ai = false;
};

class RemlEvaluator {
 public:
  virtual ~RemlEvaluator() = default;
  virtual UnitEval evaluate(const Eigen::VectorXd& gamma, bool need_ai) const = 0;
  /// ½ tr(P1 J_k P1 J_l) at s = 1, (K+1)×(K+1) with J_K = I.
  virtual Eigen::MatrixXd expected_information(const Eigen::VectorXd& gamma) const = 0;
  virtual std::string name() const = 0;
};

/// Explicit N×N covariance. Reference implementation for tests.
std::unique_ptr<RemlEvaluator> make_dense_evaluator(const RemlProblem& problem);

/// Block-diagonal part over the levels of one grouping factor plus a
/// Woodbury correction for terms that cross it. `block_term` selects the
/// grouping (index into terms, -1 for a single block, -2 for automatic,
/// -3 for no blocking).
std::unique_ptr<RemlEvaluator> make_block_evaluator(const RemlProblem& problem, int block_term = -2);

/// Closed forms over the strata of an orthogonal design; null when the
/// realised design is not orthogonal.
std::unique_ptr<RemlEvaluator> make_strata_evaluator(const RemlProblem& problem);

/// log|X'X|, needed to put the restricted likelihood on the usual scale.
double logdet_crossprod(const Eigen::MatrixXd& X);

/// Restricted log-likelihood at (γ, s).
double restricted_loglik(const UnitEval& e, double s, std::size_t n, std::size_t p, double logdet_xtx);

/// Profiled restricted log-likelihood (s = r2 / (n − p)).
double profiled_loglik(const UnitEval& e, std::size_t n, std::size_t p, double logdet_xtx);

/// Score with respect to θ = (σ²_1..σ²_K, σ²_e) at γ = θ/σ²_e, s = σ²_e.
Eigen::VectorXd theta_score(const UnitEval& e, double s);

/// Gradient of the profiled log-likelihood with respect to γ.
Eigen::VectorXd profiled_gradient(const UnitEval& e, std::size_t n, std::size_t p);

/// Observed information for θ from the analytic pieces:
/// (2·AI/s − EI)/s², where EI is expected_information at the same γ.
Eigen::MatrixXd observed_information(const UnitEval& e, const Eigen::MatrixXd& ei, double s);

/// Average-information matrix for γ with s profiled out (Schur complement).
Eigen::MatrixXd profiled_information(const UnitEval& e, const Eigen::VectorXd& gamma, std::size_t n,
                                     std::size_t p);

}  // namespace txd
