#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>

#include "txd/anova.hpp"
#include "txd/config.hpp"
#include "txd/design.hpp"
#include "txd/error.hpp"
#include "txd/formula.hpp"
#include "txd/lattice.hpp"
#include "txd/mixed_model.hpp"
#include "txd/sim.hpp"

namespace txd::cli {

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kNumerical = 3;

class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_output(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f << text;
}

std::string default_aov_formula(Shape shape) {
  switch (shape) {
    case Shape::CompletelyRandomised: return "y~I+Error(T+I:T)";
    case Shape::RandomisedBlock: return "y~I+Error(I*T*B)";
    case Shape::Multicentre: return "y~I+Error(B+I+C+T+I:B+C:B+T:B+I:C+I:T+I:C:B+I:T:B)";
  }
  return {};
}

DesignSpec example_for(Shape shape) {
  switch (shape) {
    case Shape::CompletelyRandomised: return DesignSpec::example_a();
    case Shape::RandomisedBlock: return DesignSpec::example_b();
    case Shape::Multicentre: return DesignSpec::example_c();
  }
  return {};
}

// Data file: patient,centre,batch,therapist,intervention,y[,x2,x3], 1-based codes.
struct DataFile {
  AllocationTable table;
  std::map<std::string, Eigen::VectorXd> numeric;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

DataFile read_data(const std::string& path) {
  std::stringstream ss(read_file(path));
  std::string line;
  if (!std::getline(ss, line)) throw ConfigError("data file '" + path + "' is empty");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"patient", "centre", "batch", "therapist", "intervention"}) {
    if (!col.count(need)) throw ConfigError(std::string("data file lacks column '") + need + "'");
  }
  DataFile d;
  std::map<std::string, std::vector<double>> numeric;
  std::size_t line_no = 1;
  auto to_int = [&](const std::string& s, const char* what) {
    try {
      std::size_t used = 0;
      const long v = std::stol(s, &used);
      if (used != s.size() || v < 1) throw std::invalid_argument(what);
      return static_cast<std::int32_t>(v - 1);
    } catch (const std::exception&) {
      throw ConfigError("data line " + std::to_string(line_no) + ": bad " + what + " '" + s + "'");
    }
  };
  while (std::getline(ss, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw ConfigError("data line " + std::to_string(line_no) + ": wrong number of fields");
    Allocation a;
    a.patient = to_int(cells[col["patient"]], "patient");
    a.centre = to_int(cells[col["centre"]], "centre");
    a.batch = to_int(cells[col["batch"]], "batch");
    a.therapist = to_int(cells[col["therapist"]], "therapist");
    a.intervention = to_int(cells[col["intervention"]], "intervention");
    d.table.rows.push_back(a);
    for (std::size_t i = 0; i < header.size(); ++i) {
      const auto& name = header[i];
      if (name == "patient" || name == "centre" || name == "batch" || name == "therapist" || name == "intervention") continue;
      try {
        std::size_t used = 0;
        const double v = std::stod(cells[i], &used);
        if (used != cells[i].size()) throw std::invalid_argument("trailing");
        numeric[name].push_back(v);
      } catch (const std::exception&) {
        throw ConfigError("data line " + std::to_string(line_no) + ": bad number in column '" + name + "'");
      }
    }
  }
  if (d.table.rows.empty()) throw ConfigError("data file '" + path + "' has no rows");
  for (auto& [name, v] : numeric) d.numeric[name] = Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));

  auto max_of = [&](auto member) {
    std::int32_t m = 0;
    for (const auto& r : d.table.rows) m = std::max(m, r.*member);
    return m + 1;
  };
  DesignSpec& s = d.table.spec;
  s.nI = max_of(&Allocation::intervention);
  s.nC = max_of(&Allocation::centre);
  s.nB = max_of(&Allocation::batch);
  const int therapists = max_of(&Allocation::therapist);
  s.nT = std::max(1, therapists / s.nC);
  s.shape = s.nC > 1 ? Shape::Multicentre : s.nB > 1 ? Shape::RandomisedBlock : Shape::CompletelyRandomised;
  s.nR = std::max<int>(1, static_cast<int>(d.table.rows.size() / (static_cast<std::size_t>(s.nI) * therapists * s.nB)));
  return d;
}

MatchingInputs read_covariates(const std::string& path) {
  const auto j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("covariate file must be a JSON object");
  MatchingInputs in;
  try {
    in.x2 = j.value("x2", std::vector<double>{});
    in.m2 = j.value("m2", std::vector<double>{});
    in.x3 = j.value("x3", std::vector<std::vector<double>>{});
    in.m3 = j.value("m3", std::vector<std::vector<double>>{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("covariate file: ") + e.what());
  }
  in.use_x2 = !in.x2.empty();
  in.use_x3 = !in.x3.empty();
  if (!in.use_x2 && !in.use_x3) throw ConfigError("covariate file needs x2/m2 or x3/m3");
  return in;
}

// ---------------------------------------------------------------------------

struct RandomiseArgs {
  std::string design;
  std::optional<int> nI, nT, nB, nC, nR;
  std::uint64_t seed = 0;
  int method = 0;
  std::string covariates;
  std::string out;
};

int cmd_randomise(const RandomiseArgs& a, std::ostream& out) {
  const Shape shape = parse_shape(a.design);
  DesignSpec spec = example_for(shape);
  if (a.nI) spec.nI = *a.nI;
  if (a.nT) spec.nT = *a.nT;
  if (a.nB) spec.nB = *a.nB;
  if (a.nC) spec.nC = *a.nC;
  if (a.nR) spec.nR = *a.nR;
  spec.seed = a.seed;
  spec.validate();
  AllocationTable t;
  if (a.method == 0) {
    t = randomise(spec);
  } else {
    MatchingInputs in;
    const bool have = !a.covariates.empty();
    if (have) in = read_covariates(a.covariates);
    t = assign_by_method(spec, a.method, have ? &in : nullptr);
  }
  write_output(a.out, t.to_csv(), out);
  return kOk;
}

struct AnalyseArgs {
  std::string data;
  std::string formula;
  std::string method = "anova";
  bool negative = false;
  std::string format;
  std::string out;
};

int cmd_analyse(const AnalyseArgs& a, std::ostream& out) {
  const FormulaAst ast = parse_formula(a.formula);
  const DataFile data = read_data(a.data);
  const auto yit = data.numeric.find(ast.response);
  if (yit == data.numeric.end()) throw BindingError("data has no numeric column '" + ast.response + "'");
  const BoundModel bound = to_model(ast, data.table);
  const std::string format = !a.format.empty() ? a.format : a.method == "anova" ? "markdown" : "json";
  if (format != "json" && format != "markdown" && format != "csv") throw ConfigError("format must be json, markdown or csv");

  if (a.method == "anova") {
    const std::string fixed_key = bound.spec.fixed;
    const AnovaTable table = anova(yit->second, bound.lattice, fixed_key);
    const Decomposition dec(bound.lattice, fixed_key);
    const ComponentEstimates comp = estimate_components_anova(table, dec, a.negative);
    std::string text;
    if (format == "csv") {
      text = table.to_csv();
    } else if (format == "markdown") {
      std::ostringstream os;
      os << table.to_markdown() << "\n| Component | Estimate |\n|---|---:|\n";
      for (const auto& [key, v] : comp.sigma2) {
        os << "| " << display_key(key) << " | " << v << (comp.truncated.at(key) ? " (truncated)" : "") << " |\n";
      }
      text = os.str();
    } else {
      nlohmann::ordered_json j;
      j["formula"] = render(expand(ast));
      nlohmann::ordered_json rows = nlohmann::ordered_json::array();
      for (const auto& r : table.rows) {
        nlohmann::ordered_json row;
        row["stratum"] = r.stratum;
        row["source"] = r.source;
        row["df"] = r.df;
        row["ss"] = r.ss;
        if (!r.is_total) row["ms"] = r.ms;
        row["ems"] = r.ems.to_string();
        rows.push_back(row);
      }
      j["rows"] = rows;
      nlohmann::ordered_json tests = nlohmann::ordered_json::array();
      for (const auto& t : table.tests) {
        nlohmann::ordered_json o;
        o["effect"] = t.effect;
        o["kind"] = t.kind == TestKind::ExactF ? "exact-F" : "approximate-F";
        o["F"] = t.p_value ? nlohmann::ordered_json(t.statistic) : nlohmann::ordered_json(nullptr);
        o["df_num"] = t.df_num;
        o["df_den"] = t.p_value ? nlohmann::ordered_json(t.df_den) : nlohmann::ordered_json(nullptr);
        o["p"] = t.p_value ? nlohmann::ordered_json(*t.p_value) : nlohmann::ordered_json(nullptr);
        if (!t.note.empty()) o["note"] = t.note;
        tests.push_back(o);
      }
      j["tests"] = tests;
      nlohmann::ordered_json c;
      for (const auto& [key, v] : comp.sigma2) c[key] = v;
      j["components"] = c;
      text = j.dump(2) + "\n";
    }
    write_output(a.out, text, out);
    return kOk;
  }
  if (a.method != "reml") throw ConfigError("method must be anova or reml");
  const RemlProblem problem = make_problem(yit->second, data.table, bound.spec);
  const ModelFit fit = fit_reml(problem, bound.spec);
  std::string text;
  if (format == "json") {
    text = fit.to_json();
  } else {
    std::ostringstream os;
    os << "| Term | Estimate | SE | df | t | p |\n|---|---:|---:|---:|---:|---:|\n";
    for (std::size_t k = 0; k < fit.tests.size(); ++k) {
      const auto& t = fit.tests[k];
      os << "| δ" << k + 1 << " | " << t.estimate << " | " << t.se << " | " << t.df << " | " << t.t << " | "
         << (t.p_value ? std::to_string(*t.p_value) : std::string("-")) << " |\n";
    }
    os << "\n| Component | σ² | Boundary |\n|---|---:|---|\n";
    for (const auto& key : bound.spec.random_terms) {
      os << "| " << display_key(key) << " | " << fit.components.at(key) << " | " << (fit.boundary.at(key) ? "yes" : "no")
         << " |\n";
    }
    os << "| E | " << fit.sigma2_e << " | |\n";
    text = os.str();
  }
  write_output(a.out, text, out);
  if (!fit.converged) throw NumericalFailure("REML did not converge within " + std::to_string(fit.iterations) + " iterations");
  return kOk;
}

struct SimulateArgs {
  std::string config;
  int reps = -1;
  int jobs = 1;
  std::string out = ".";
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  if (a.jobs < 1) throw ConfigError("--jobs must be at least 1");
  auto j = read_config_file(a.config);
  if (a.reps >= 0) j["replications"] = a.reps;
  const auto cells = sim_configs_from_json(j);
  std::vector<SimSummary> summaries;
  for (const auto& c : cells) summaries.push_back(run_study(c, a.jobs));
  const ComparisonReport report = compare_methods(summaries);
  std::filesystem::create_directories(a.out);
  write_output((std::filesystem::path(a.out) / "summary.csv").string(), report.to_csv(), out);
  write_output((std::filesystem::path(a.out) / "summary.md").string(), report.to_markdown(), out);
  int failed = 0;
  for (const auto& s : summaries) failed += s.n_failed;
  out << "wrote " << summaries.size() << " cell(s) to " << a.out << (failed ? ", " + std::to_string(failed) + " failed fit(s)" : "")
      << '\n';
  return kOk;
}

struct HasseArgs {
  std::string design;
  std::string formula;
  std::string data;
  std::string out = "hasse";
};

int cmd_hasse(const HasseArgs& a, std::ostream& out) {
  FactorLattice lattice = [&] {
    if (!a.design.empty()) {
      if (!a.formula.empty() || !a.data.empty()) throw UsageError("give either --design or --formula with --data");
      const Shape shape = parse_shape(a.design);
      const AllocationTable t = systematic_design(example_for(shape));
      return to_model(parse_formula(default_aov_formula(shape)), t).lattice;
    }
    if (a.formula.empty() || a.data.empty()) throw UsageError("hasse needs --design, or --formula together with --data");
    const DataFile d = read_data(a.data);
    return to_model(parse_formula(a.formula), d.table).lattice;
  }();
  std::string prefix = a.out;
  if (prefix.size() > 4 && prefix.substr(prefix.size() - 4) == ".dot") prefix.resize(prefix.size() - 4);
  const std::string random_path = prefix + "-random.dot";
  const std::string fixed_path = prefix + "-fixed.dot";
  write_output(random_path, emit_hasse_dot(lattice, Structure::Random), out);
  write_output(fixed_path, emit_hasse_dot(lattice, Structure::Fixed), out);
  out << random_path << '\n' << fixed_path << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Therapist-by-intervention factorial designs: randomisation, analysis and simulation", "txd"};
  app.require_subcommand(1);

  RandomiseArgs ra;
  auto* rnd = app.add_subcommand("randomise", "Write a randomised allocation table as CSV");
  rnd->add_option("--design", ra.design, "Design shape: a, b or c")->required();
  rnd->add_option("--nI", ra.nI, "Interventions");
  rnd->add_option("--nT", ra.nT, "Therapists per centre");
  rnd->add_option("--nB", ra.nB, "Batches");
  rnd->add_option("--nC", ra.nC, "Centres");
  rnd->add_option("--nR", ra.nR, "Replicates per treatment and block");
  rnd->add_option("--seed", ra.seed, "Master seed");
  rnd->add_option("--method", ra.method, "0 = joint randomisation (default), 1-5 = comparison methods")
      ->check(CLI::Range(0, 5));
  rnd->add_option("--covariates", ra.covariates, "JSON with x2, m2 (and x3, m3) for methods 1-3");
  rnd->add_option("--out", ra.out, "Output CSV path (default: standard output)");

  AnalyseArgs aa;
  auto* ana = app.add_subcommand("analyse", "ANOVA or REML analysis of a data file");
  ana->add_option("--data", aa.data, "CSV: patient,centre,batch,therapist,intervention,y[,x2,x3]")->required();
  ana->add_option("--formula", aa.formula, "Model formula, e.g. y~I+Error(T+I:T)")->required();
  ana->add_option("--method", aa.method, "anova or reml")->check(CLI::IsMember({"anova", "reml"}));
  ana->add_flag("--negative-components", aa.negative, "Keep negative ANOVA variance estimates");
  ana->add_option("--format", aa.format, "json, markdown or csv")->check(CLI::IsMember({"json", "markdown", "csv"}));
  ana->add_option("--out", aa.out, "Output path (default: standard output)");

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Run a simulation study from a JSON or TOML config");
  sim->add_option("--config", sa.config, "Config file (.json or .toml)")->required();
  sim->add_option("--reps", sa.reps, "Override the number of replications");
  sim->add_option("--jobs", sa.jobs, "Worker threads");
  sim->add_option("--out", sa.out, "Output directory for summary.csv and summary.md");

  HasseArgs ha;
  auto* has = app.add_subcommand("hasse", "Write DOT Hasse diagrams of the random and fixed structures");
  has->add_option("--design", ha.design, "Design shape: a, b or c");
  has->add_option("--formula", ha.formula, "Model formula (with --data)");
  has->add_option("--data", ha.data, "CSV data file (with --formula)");
  has->add_option("--out", ha.out, "Output path prefix; writes <prefix>-random.dot and <prefix>-fixed.dot");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kOk;
    }
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  try {
    if (rnd->parsed()) return cmd_randomise(ra, out);
    if (ana->parsed()) return cmd_analyse(aa, out);
    if (sim->parsed()) {
      if (sa.reps == 0) throw ConfigError("--reps must be positive");
      return cmd_simulate(sa, out);
    }
    if (has->parsed()) return cmd_hasse(ha, out);
  } catch (const NumericalFailure& e) {
    err << "error: " << e.what() << '\n';
    return kNumerical;
  } catch (const ParseError& e) {
    err << "error: formula: " << e.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& e) {  // ConfigError, UsageError, BindingError
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const StructuralError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kNumerical;
  }
  return kUsage;
}

}  // namespace txd::cli
