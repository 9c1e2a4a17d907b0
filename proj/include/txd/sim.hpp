#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "txd/design.hpp"
#include "txd/mixed_model.hpp"

namespace txd {

/// How the matching covariates reach the outcome. MeanShift: therapist
/// centres are N(δ, 1) and the covariate enters with coefficient 1 when
/// δ ≠ 0. Coefficient: centres are N(0, 1) and the covariate enters as δ·x.
enum class CovariateChannel { MeanShift, Coefficient };

struct SimConfig {
  int example = 1;                       // 1, 2, 3 for designs a, b, c
  std::map<std::string, double> truths;  // "delta0", "delta1", term keys, "E"
  double delta2 = 0.0;
  double delta3 = 0.0;
  int method = 4;
  int replications = 1000;
  std::uint64_t master_seed = 20240101;
  double alpha = 0.05;
  CovariateChannel channel = CovariateChannel::MeanShift;
  RemlOptions reml;

  /// Design counts and truths of one of the three examples.
  static SimConfig for_example(int example);

  DesignSpec design() const;
  ModelSpec model() const;

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

struct Dataset {
  AllocationTable table;
  Eigen::VectorXd y;
  MatchingInputs covariates;
};

/// Deterministic in (master_seed, replicate).
Dataset generate_dataset(const SimConfig& config, std::uint64_t replicate);

struct ReplicateResult {
  bool ok = false;
  double delta1 = 0.0;
  double se = 0.0;
  double df = 0.0;
  double sigma_u1 = 0.0;
  double sigma_v1 = 0.0;
  bool boundary = false;
  bool reject_truth = false;  // H0: δ1 = 0 rejected on the generated data
  bool reject_null = false;   // same, on the data with δ1 removed
  int iterations = 0;
  std::vector<double> loglik_trace;
};

/// Fits one replicate. The δ1 = 0 twin differs from the data only inside
/// the fixed-effect column space, so its fit is the same up to a shift of
/// δ̂1 by δ1 and is not refitted.
ReplicateResult run_replicate(const SimConfig& config, std::uint64_t replicate);

struct Metric {
  double mean = 0.0;
  double mc_se = 0.0;
};

struct SimSummary {
  SimConfig config;
  int n_ok = 0;
  int n_failed = 0;
  Metric delta1;
  Metric se;
  Metric sigma_u1;
  Metric sigma_v1;
  Metric type1;
  Metric type2;
  Metric boundary;
  Metric df;
  bool monotone = true;  // every accepted REML iterate was non-decreasing
};

/// Runs every replicate on `jobs` threads. Results are aggregated in
/// replicate order, so the summary does not depend on `jobs`.
SimSummary run_study(const SimConfig& config, int jobs = 1);

/// Table 3 style side-by-side report over methods and (δ3, δ2) cells.
struct ComparisonReport {
  int example = 1;
  std::vector<int> methods;
  std::vector<SimSummary> cells;

  std::string to_markdown() const;
  std::string to_csv() const;
};

/// Throws UsageError when the summaries mix examples.
ComparisonReport compare_methods(const std::vector<SimSummary>& summaries);

/// One CSV row per summary with Table 3 column names.
std::string summaries_csv(const std::vector<SimSummary>& summaries);

}  // namespace txd
