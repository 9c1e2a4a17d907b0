#include "txd/sim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <thread>

#include "txd/error.hpp"
#include "txd/rng.hpp"
#include "txd/stats.hpp"

namespace txd {

SimConfig SimConfig::for_example(int example) {
  SimConfig c;
  c.example = example;
  switch (example) {
    case 1:
      c.truths = {{"delta0", 0.0}, {"delta1", 0.315}, {"T", 0.10}, {"I:T", 0.15}, {"E", 0.75}};
      break;
    case 2:
      c.truths = {{"delta0", 0.0}, {"delta1", 0.18}, {"T", 0.10},   {"I:T", 0.15}, {"E", 0.35},
                  {"B", 0.10},     {"T:B", 0.10},    {"I:B", 0.10}, {"I:T:B", 0.10}};
      break;
    case 3:
      c.truths = {{"delta0", 0.0}, {"delta1", 0.18}, {"T", 0.10},   {"I:T", 0.10},   {"E", 0.20},
                  {"B", 0.10},     {"T:B", 0.05},    {"I:B", 0.10}, {"I:T:B", 0.05}, {"C", 0.10},
                  {"C:B", 0.05},   {"I:C", 0.10},    {"I:C:B", 0.05}};
      break;
    default:
      throw ConfigError("example must be 1, 2 or 3");
  }
  return c;
}

DesignSpec SimConfig::design() const {
  switch (example) {
    case 1: return DesignSpec::example_a();
    case 2: return DesignSpec::example_b();
    case 3: return DesignSpec::example_c();
    default: throw ConfigError("example must be 1, 2 or 3");
  }
}

ModelSpec SimConfig::model() const { return ModelSpec::for_shape(design().shape); }

void SimConfig::validate() const {
  if (example < 1 || example > 3) throw ConfigError("example must be 1, 2 or 3");
  if (method < 1 || method > 5) throw ConfigError("method must be between 1 and 5");
  if (replications <= 0) throw ConfigError("replications must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if ((method == 2 || method == 3 || method == 4) && delta3 != 0.0) {
    throw ConfigError("delta3 must be zero for method " + std::to_string(method) +
                      " (therapists are assigned before the intervention is known)");
  }
  for (const char* key : {"delta0", "delta1", "E"}) {
    if (!truths.count(key)) throw ConfigError(std::string("missing truth '") + key + "'");
  }
  for (const auto& term : model().random_terms) {
    const auto it = truths.find(term);
    if (it == truths.end()) throw ConfigError("missing variance for term '" + term + "'");
    if (it->second < 0.0) throw ConfigError("variance for term '" + term + "' is negative");
  }
  if (truths.at("E") <= 0.0) throw ConfigError("residual variance must be positive");
}

namespace {

// Natural level code of a term: mixed radix over (I, T, B, C) so random
// effects are attached to real labels, not to first-occurrence order.
struct TermCoder {
  std::vector<std::string> parts;
  std::vector<int> radix;
  std::size_t size = 1;

  TermCoder(const std::string& key, const DesignSpec& spec) : parts(split_key(key)) {
    for (const auto& p : parts) {
      int r = 1;
      if (p == "I") r = spec.nI;
      else if (p == "T") r = spec.n_therapists();
      else if (p == "B") r = spec.nB;
      else if (p == "C") r = spec.nC;
      else throw ConfigError("unknown factor in term '" + key + "'");
      radix.push_back(r);
      size *= static_cast<std::size_t>(r);
    }
  }

  std::size_t code(const Allocation& a) const {
    std::size_t c = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      int v = 0;
      switch (parts[k][0]) {
        case 'I': v = a.intervention; break;
        case 'T': v = a.therapist; break;
        case 'B': v = a.batch; break;
        default: v = a.centre; break;
      }
      c = c * static_cast<std::size_t>(radix[k]) + static_cast<std::size_t>(v);
    }
    return c;
  }
};

std::uint64_t replicate_seed(const SimConfig& c, std::uint64_t replicate) {
  return derive_seed(c.master_seed, {stream::kReplicate, replicate});
}

}  // namespace

Dataset generate_dataset(const SimConfig& config, std::uint64_t replicate) {
  config.validate();
  const std::uint64_t seed = replicate_seed(config, replicate);
  DesignSpec spec = config.design();
  spec.seed = seed;
  const std::size_t n = spec.n_units();
  const int nt = spec.n_therapists();
  const bool shift = config.channel == CovariateChannel::MeanShift;

  Dataset d;
  auto& cov = d.covariates;
  Rng crng = make_rng(seed, {stream::kCovariate});
  const double c2 = shift ? config.delta2 : 0.0;
  const double c3 = shift ? config.delta3 : 0.0;
  cov.m2.resize(static_cast<std::size_t>(nt));
  cov.m3.assign(static_cast<std::size_t>(nt), std::vector<double>(static_cast<std::size_t>(spec.nI)));
  for (int j = 0; j < nt; ++j) {
    cov.m2[static_cast<std::size_t>(j)] = c2 + standard_normal(crng);
    for (int i = 0; i < spec.nI; ++i) cov.m3[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = c3 + standard_normal(crng);
  }
  // Latent patient types: each therapist of the centre is the type of
  // nI·nR patients per block, in random order.
  std::vector<std::int32_t> type(n);
  const std::size_t bs = spec.block_size();
  for (int c = 0; c < spec.nC; ++c) {
    for (int b = 0; b < spec.nB; ++b) {
      std::vector<std::int32_t> v;
      v.reserve(bs);
      for (int j = 0; j < spec.nT; ++j) v.insert(v.end(), static_cast<std::size_t>(spec.nI * spec.nR), c * spec.nT + j);
      shuffle(v, crng);
      std::copy(v.begin(), v.end(), type.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(c) * spec.nB + b) * bs));
    }
  }
  cov.x2.resize(n);
  cov.x3.assign(n, std::vector<double>(static_cast<std::size_t>(spec.nI)));
  for (std::size_t p = 0; p < n; ++p) {
    const auto g = static_cast<std::size_t>(type[p]);
    cov.x2[p] = cov.m2[g] + standard_normal(crng);
    for (int i = 0; i < spec.nI; ++i) {
      cov.x3[p][static_cast<std::size_t>(i)] = cov.m3[g][static_cast<std::size_t>(i)] + standard_normal(crng);
    }
  }
  cov.use_x2 = true;
  cov.use_x3 = config.method == 1;

  d.table = assign_by_method(spec, config.method, &cov);

  const ModelSpec model = config.model();
  const Eigen::MatrixXd contrasts = effect_coding(spec.nI);
  d.y.resize(static_cast<Eigen::Index>(n));
  const double delta0 = config.truths.at("delta0");
  const double delta1 = config.truths.at("delta1");
  for (std::size_t u = 0; u < n; ++u) {
    d.y[static_cast<Eigen::Index>(u)] = delta0 + delta1 * contrasts(d.table.rows[u].intervention, 0);
  }
  for (std::size_t k = 0; k < model.random_terms.size(); ++k) {
    const auto& key = model.random_terms[k];
    const TermCoder coder(key, spec);
    const double sd = std::sqrt(config.truths.at(key));
    Rng rng = make_rng(seed, {stream::kEffects, k});
    std::vector<double> effect(coder.size);
    for (auto& e : effect) e = sd * standard_normal(rng);
    for (std::size_t u = 0; u < n; ++u) d.y[static_cast<Eigen::Index>(u)] += effect[coder.code(d.table.rows[u])];
  }
  Rng erng = make_rng(seed, {stream::kEffects, 0xe});
  const double sde = std::sqrt(config.truths.at("E"));
  for (std::size_t u = 0; u < n; ++u) d.y[static_cast<Eigen::Index>(u)] += sde * standard_normal(erng);

  const double w2 = shift ? 1.0 : config.delta2;
  const double w3 = shift ? 1.0 : config.delta3;
  for (std::size_t u = 0; u < n; ++u) {
    const auto& row = d.table.rows[u];
    const auto p = static_cast<std::size_t>(row.patient);
    if (config.delta2 != 0.0) d.y[static_cast<Eigen::Index>(u)] += w2 * cov.x2[p];
    if (config.delta3 != 0.0) d.y[static_cast<Eigen::Index>(u)] += w3 * cov.x3[p][static_cast<std::size_t>(row.intervention)];
  }
  return d;
}

ReplicateResult run_replicate(const SimConfig& config, std::uint64_t replicate) {
  ReplicateResult r;
  try {
    const Dataset d = generate_dataset(config, replicate);
    const ModelFit fit = fit_reml(d.y, d.table, config.model(), config.reml);
    r.iterations = fit.iterations;
    r.loglik_trace = fit.loglik_trace;
    if (!fit.converged || fit.tests.empty()) return r;
    const TTest& t = fit.tests.front();
    if (!(t.se > 0.0) || !std::isfinite(t.df)) return r;
    r.delta1 = t.estimate;
    r.se = t.se;
    r.df = t.df;
    r.sigma_u1 = fit.components.at("T");
    r.sigma_v1 = fit.components.at("I:T");
    r.boundary = fit.boundary.at("T") || fit.boundary.at("I:T");
    const double crit = std::abs(t.t);
    r.reject_truth = t_two_sided(crit, t.df) < config.alpha;
    const double t0 = (t.estimate - config.truths.at("delta1")) / t.se;
    r.reject_null = t_two_sided(t0, t.df) < config.alpha;
    r.ok = true;
  } catch (const StructuralError&) {
    r.ok = false;
  }
  return r;
}

SimSummary run_study(const SimConfig& config, int jobs) {
  config.validate();
  const auto reps = static_cast<std::size_t>(config.replications);
  std::vector<ReplicateResult> results(reps);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < reps; i = next++) results[i] = run_replicate(config, i);
  };
  const int nthreads = std::max(1, std::min<int>(jobs, static_cast<int>(reps)));
  std::vector<std::thread> pool;
  for (int k = 1; k < nthreads; ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  SimSummary s;
  s.config = config;
  RunningMean d1, se, su, sv, t1, t2, bd, df;
  for (const auto& r : results) {
    for (std::size_t k = 1; k < r.loglik_trace.size(); ++k) {
      if (r.loglik_trace[k] < r.loglik_trace[k - 1]) s.monotone = false;
    }
    if (!r.ok) {
      ++s.n_failed;
      continue;
    }
    ++s.n_ok;
    d1.add(r.delta1);
    se.add(r.se);
    su.add(r.sigma_u1);
    sv.add(r.sigma_v1);
    t1.add(r.reject_null ? 1.0 : 0.0);
    t2.add(r.reject_truth ? 0.0 : 1.0);
    bd.add(r.boundary ? 1.0 : 0.0);
    df.add(r.df);
  }
  auto metric = [](const RunningMean& m) { return Metric{m.mean, m.mc_se()}; };
  s.delta1 = metric(d1);
  s.se = metric(se);
  s.sigma_u1 = metric(su);
  s.sigma_v1 = metric(sv);
  s.type1 = metric(t1);
  s.type2 = metric(t2);
  s.boundary = metric(bd);
  s.df = metric(df);
  return s;
}

namespace {

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string label(int method, int example) { return "D" + std::to_string(method) + std::to_string(example); }

}  // namespace

ComparisonReport compare_methods(const std::vector<SimSummary>& summaries) {
  if (summaries.empty()) throw UsageError("no summaries to compare");
  ComparisonReport r;
  r.example = summaries.front().config.example;
  std::set<int> methods;
  for (const auto& s : summaries) {
    if (s.config.example != r.example) throw UsageError("summaries come from different examples");
    methods.insert(s.config.method);
  }
  r.methods.assign(methods.begin(), methods.end());
  r.cells = summaries;
  return r;
}

std::string ComparisonReport::to_markdown() const {
  std::set<std::pair<double, double>> rows;  // (δ3, δ2)
  for (const auto& c : cells) rows.insert({c.config.delta3, c.config.delta2});
  auto find = [&](int method, double d3, double d2) -> const SimSummary* {
    for (const auto& c : cells) {
      if (c.config.method == method && c.config.delta3 == d3 && c.config.delta2 == d2) return &c;
    }
    return nullptr;
  };
  struct Column {
    std::string title;
    std::string (*value)(const SimSummary&);
  };
  const Column columns[] = {
      {"δ̂1", [](const SimSummary& s) { return fmt(s.delta1.mean, 3); }},
      {"SE(δ̂1)", [](const SimSummary& s) { return fmt(s.se.mean, 3); }},
      {"σ̂²_u1", [](const SimSummary& s) { return fmt(s.sigma_u1.mean, 2); }},
      {"σ̂²_v1", [](const SimSummary& s) { return fmt(s.sigma_v1.mean, 2); }},
      {"Type I", [](const SimSummary& s) { return fmt(s.type1.mean, 2); }},
      {"Type II", [](const SimSummary& s) { return fmt(s.type2.mean, 2); }},
      {"Boundary", [](const SimSummary& s) { return fmt(100.0 * s.boundary.mean, 0) + "%"; }},
  };
  std::ostringstream out;
  out << "| δ3 | δ2 |";
  for (const auto& col : columns) {
    for (int m : methods) out << ' ' << col.title << ' ' << label(m, example) << " |";
  }
  out << "\n|---|---|";
  for (std::size_t k = 0; k < std::size(columns) * methods.size(); ++k) out << "---|";
  out << '\n';
  for (const auto& [d3, d2] : rows) {
    out << "| " << fmt(d3, 1) << " | " << fmt(d2, 1) << " |";
    for (const auto& col : columns) {
      for (int m : methods) {
        const SimSummary* s = find(m, d3, d2);
        out << ' ' << (s && s->n_ok > 0 ? col.value(*s) : std::string("-")) << " |";
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string ComparisonReport::to_csv() const { return summaries_csv(cells); }

std::string summaries_csv(const std::vector<SimSummary>& summaries) {
  std::ostringstream out;
  out << "design,example,method,delta3,delta2,replications,failures,delta1_hat,se_delta1_hat,sigma2_u1_hat,"
         "sigma2_v1_hat,type1_error,type2_error,boundary_estimates,mean_df,mc_se_delta1_hat,mc_se_se,"
         "mc_se_sigma2_u1,mc_se_sigma2_v1,mc_se_type1,mc_se_type2,mc_se_boundary\n";
  for (const auto& s : summaries) {
    const auto& c = s.config;
    out << label(c.method, c.example) << ',' << c.example << ',' << c.method << ',' << fmt(c.delta3, 3) << ','
        << fmt(c.delta2, 3) << ',' << c.replications << ',' << s.n_failed << ',' << fmt(s.delta1.mean, 6) << ','
        << fmt(s.se.mean, 6) << ',' << fmt(s.sigma_u1.mean, 6) << ',' << fmt(s.sigma_v1.mean, 6) << ','
        << fmt(s.type1.mean, 6) << ',' << fmt(s.type2.mean, 6) << ',' << fmt(s.boundary.mean, 6) << ','
        << fmt(s.df.mean, 4) << ',' << fmt(s.delta1.mc_se, 6) << ',' << fmt(s.se.mc_se, 6) << ','
        << fmt(s.sigma_u1.mc_se, 6) << ',' << fmt(s.sigma_v1.mc_se, 6) << ',' << fmt(s.type1.mc_se, 6) << ','
        << fmt(s.type2.mc_se, 6) << ',' << fmt(s.boundary.mc_se, 6) << '\n';
  }
  return out.str();
}

}  // namespace txd
