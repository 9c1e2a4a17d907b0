#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "txd/design.hpp"
#include "txd/lattice.hpp"
#include "txd/stats.hpp"

namespace txd {

/// Shared numerical tolerances.
namespace tol {
inline constexpr double kProjector = 1e-10;  // idempotence / orthogonality
inline constexpr double kCombination = 1e-9; // integer EMS coefficients
}  // namespace tol

struct EmsTerm {
  std::string stratum;  // random-node key, "0" for the mean stratum
  double coef = 1.0;
};

struct EmsExpression {
  std::string fixed_part;  // "", "‖τ_0‖²" or "‖τ_I‖²"
  std::vector<EmsTerm> xi;

  std::string to_string() const;
};

/// ξ symbol for a stratum key: ξ_T, ξ_{I∧T}, ξ_0 for the mean.
std::string xi_symbol(const std::string& key);

struct StratumProjector {
  std::string key;
  std::int32_t df = 0;
  Eigen::MatrixXd Q;
};

/// Dense stratum projectors Q_F = P_F − Σ Q_G (G strictly coarser). Throws
/// StructuralError if any result is not idempotent within tolerance.
std::vector<StratumProjector> decompose(const FactorLattice& lattice);

/// Dense averaging operator of a factor.
Eigen::MatrixXd averaging_operator(const Factor& f);

/// Operator-form stratum decomposition for an orthogonal block structure.
class Decomposition {
 public:
  /// `fixed_key` names the fixed treatment factor ("" for none). Throws
  /// StructuralError unless all factors are uniform and pairwise orthogonal.
  Decomposition(const FactorLattice& lattice, const std::string& fixed_key);

  const FactorLattice& lattice() const noexcept { return *lattice_; }
  std::size_t n_strata() const noexcept { return lattice_->random_nodes().size(); }

  /// Q_F y for every stratum, in lattice order.
  std::vector<Eigen::VectorXd> project(const Eigen::VectorXd& y) const;

  /// (P_I − P_U) y: the fixed-treatment part, zero if there is no fixed factor.
  Eigen::VectorXd fixed_part(const Eigen::VectorXd& y) const;

  /// Stratum holding the fixed factor, or npos.
  std::size_t fixed_stratum() const noexcept { return fixed_stratum_; }
  std::int32_t fixed_df() const noexcept { return fixed_df_; }
  const std::string& fixed_key() const noexcept { return fixed_key_; }

  /// Replication r_F = N / n_levels(F) of a random node.
  double replication(std::size_t node) const;

  /// ξ coefficient vectors over the basis (E, parameter nodes...).
  const std::vector<std::size_t>& basis() const noexcept { return basis_; }
  Eigen::VectorXd xi_coefficients(std::size_t node) const;

  /// Expresses a coefficient vector as Σ a_H ξ_H over basis strata.
  Eigen::VectorXd express(const Eigen::VectorXd& coefficients) const;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  const FactorLattice* lattice_;
  std::string fixed_key_;
  std::optional<Factor> fixed_factor_;
  std::size_t fixed_stratum_ = npos;
  std::int32_t fixed_df_ = 0;
  std::vector<std::size_t> basis_;
  std::vector<std::vector<std::size_t>> coarser_;  // strictly coarser strata per node
};

enum class TestKind { ExactF, ApproximateF };

struct TestResult {
  std::string effect;  // display key
  double statistic = 0.0;
  double df_num = 0.0;
  double df_den = 0.0;
  std::optional<double> p_value;  // empty when untestable
  TestKind kind = TestKind::ExactF;
  std::vector<EmsTerm> denominator;  // signed MS combination used
  std::string note;
};

struct AnovaRow {
  std::string stratum_key;  // random-node key, or "" for the grand total
  std::string stratum;      // label, e.g. "W_T Therapists"
  std::string source;
  std::int32_t df = 0;
  double ss = 0.0;
  double ms = 0.0;
  EmsExpression ems;
  bool is_total = false;
  std::optional<std::size_t> test;  // index into AnovaTable::tests
};

struct AnovaTable {
  std::size_t n_units = 0;
  std::vector<AnovaRow> rows;
  std::vector<TestResult> tests;
  /// Mean square used for each basis stratum in F ratios (residual MS
  /// where the stratum also holds the fixed source).
  std::map<std::string, std::pair<double, double>> stratum_ms;  // key -> (MS, df)

  const AnovaRow* find(const std::string& stratum_key, const std::string& source) const;
  const TestResult* find_test(const std::string& effect) const;

  std::string to_markdown() const;
  std::string to_csv() const;
};

/// Symbolic EMS per source, keyed by "stratum/source".
std::map<std::string, EmsExpression> ems_table(const FactorLattice& lattice, const std::string& fixed_key);

/// Full stratum ANOVA with F tests.
AnovaTable anova(const Eigen::VectorXd& y, const FactorLattice& lattice, const std::string& fixed_key = "I");

/// F tests by the null-EMS matching rule. Called by anova(); exposed so a
/// table with edited mean squares can be re-tested.
std::vector<TestResult> f_tests(const AnovaTable& table, const Decomposition& dec);

/// Eq.-style Satterthwaite df for the fixed effect in designs b and c:
/// combination MS_a + MS_b − MS_ab with divisors (nI−1)(na−1), (nI−1)(nB−1),
/// (nI−1)(na−1)(nB−1), where a is T (design b) or C (design c).
std::optional<double> satterthwaite_fixed_df(double ms_a, double ms_b, double ms_ab, int nI, int na, int nB);

struct ComponentEstimates {
  std::map<std::string, double> sigma2;  // parameter keys plus "E"
  std::map<std::string, bool> truncated;
};

/// Solves observed MS = EMS(σ²) for the variance components.
ComponentEstimates estimate_components_anova(const AnovaTable& table, const Decomposition& dec,
                                             bool allow_negative);

}  // namespace txd
