#include "txd/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "txd/error.hpp"

namespace txd {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Drops a trailing comment that is not inside a string.
std::string strip_comment(std::string_view line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_str = !in_str;
    if (line[i] == '#' && !in_str) return std::string(line.substr(0, i));
  }
  return std::string(line);
}

nlohmann::json toml_value(const std::string& v, std::size_t line_no) {
  auto bad = [&] { return ConfigError("TOML line " + std::to_string(line_no) + ": cannot read value '" + v + "'"); };
  if (v.empty()) throw bad();
  if (v == "true") return true;
  if (v == "false") return false;
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') throw bad();
    return v.substr(1, v.size() - 2);
  }
  if (v.front() == '[') {
    if (v.back() != ']') throw bad();
    nlohmann::json arr = nlohmann::json::array();
    std::stringstream ss(v.substr(1, v.size() - 2));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) arr.push_back(toml_value(item, line_no));
    }
    return arr;
  }
  std::string num;
  for (char c : v) {
    if (c != '_') num += c;
  }
  try {
    return nlohmann::json::parse(num);
  } catch (const nlohmann::json::exception&) {
    throw bad();
  }
}

double as_number(const nlohmann::json& v, const char* key) {
  if (!v.is_number()) throw ConfigError(std::string("'") + key + "' must be a number");
  return v.get<double>();
}

std::vector<double> as_list(const nlohmann::json& j, const char* key, double fallback, bool& listed) {
  listed = false;
  if (!j.contains(key)) return {fallback};
  const auto& v = j.at(key);
  if (v.is_array()) {
    listed = true;
    std::vector<double> out;
    for (const auto& x : v) out.push_back(as_number(x, key));
    if (out.empty()) throw ConfigError(std::string("'") + key + "' is an empty list");
    return out;
  }
  return {as_number(v, key)};
}

}  // namespace

nlohmann::json parse_toml_subset(std::string_view text) {
  nlohmann::json root = nlohmann::json::object();
  nlohmann::json* table = &root;
  std::stringstream ss{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(ss, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError("TOML line " + std::to_string(line_no) + ": malformed table header");
      }
      const std::string name = trim(line.substr(1, line.size() - 2));
      if (root.contains(name)) throw ConfigError("TOML table '" + name + "' defined twice");
      root[name] = nlohmann::json::object();
      table = &root[name];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("TOML line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (key.size() >= 2 && key.front() == '"' && key.back() == '"') key = key.substr(1, key.size() - 2);
    if (key.empty()) throw ConfigError("TOML line " + std::to_string(line_no) + ": empty key");
    if (table->contains(key)) throw ConfigError("TOML key '" + key + "' defined twice");
    (*table)[key] = toml_value(trim(line.substr(eq + 1)), line_no);
  }
  return root;
}

nlohmann::json read_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  const bool toml = path.size() >= 5 && path.substr(path.size() - 5) == ".toml";
  if (toml) return parse_toml_subset(text);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
}

std::vector<SimConfig> sim_configs_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("simulation config must be an object");
  static const std::set<std::string> known = {"example", "method", "methods", "delta2", "delta3", "replications",
                                              "master_seed", "alpha", "channel", "truths", "max_iter", "rel_tol"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  const int example = j.contains("example") ? j.at("example").get<int>() : 1;
  SimConfig base = SimConfig::for_example(example);
  if (j.contains("replications")) {
    const auto& r = j.at("replications");
    if (!r.is_number_integer()) throw ConfigError("'replications' must be an integer");
    base.replications = r.get<int>();
  }
  if (j.contains("master_seed")) {
    const auto& s = j.at("master_seed");
    if (!s.is_number_integer() || (s.is_number_integer() && !s.is_number_unsigned() && s.get<long long>() < 0)) {
      throw ConfigError("'master_seed' must be a non-negative integer");
    }
    base.master_seed = s.get<std::uint64_t>();
  }
  if (j.contains("alpha")) base.alpha = as_number(j.at("alpha"), "alpha");
  if (j.contains("max_iter")) base.reml.max_iter = j.at("max_iter").get<int>();
  if (j.contains("rel_tol")) base.reml.rel_tol = as_number(j.at("rel_tol"), "rel_tol");
  if (j.contains("channel")) {
    const auto c = j.at("channel").get<std::string>();
    if (c == "mean_shift") base.channel = CovariateChannel::MeanShift;
    else if (c == "coefficient") base.channel = CovariateChannel::Coefficient;
    else throw ConfigError("channel must be 'mean_shift' or 'coefficient'");
  }
  if (j.contains("truths")) {
    const auto& t = j.at("truths");
    if (!t.is_object()) throw ConfigError("'truths' must be a table");
    for (const auto& [key, value] : t.items()) {
      if (!base.truths.count(key)) throw ConfigError("unknown truth '" + key + "' for example " + std::to_string(example));
      base.truths[key] = as_number(value, key.c_str());
    }
  }
  if (j.contains("method") && j.contains("methods")) throw ConfigError("give either 'method' or 'methods'");
  bool listed_m = false;
  bool listed_2 = false;
  bool listed_3 = false;
  const auto methods = as_list(j, j.contains("methods") ? "methods" : "method", base.method, listed_m);
  const auto d2s = as_list(j, "delta2", 0.0, listed_2);
  const auto d3s = as_list(j, "delta3", 0.0, listed_3);
  const bool product = listed_m || listed_3;
  std::vector<SimConfig> out;
  for (double m : methods) {
    if (m != static_cast<int>(m)) throw ConfigError("method must be an integer");
    for (double d3 : d3s) {
      for (double d2 : d2s) {
        SimConfig c = base;
        c.method = static_cast<int>(m);
        c.delta2 = d2;
        c.delta3 = d3;
        if (product && d3 != 0.0 && c.method >= 2 && c.method <= 4) continue;
        c.validate();
        out.push_back(c);
      }
    }
  }
  if (out.empty()) throw ConfigError("config produces no simulation cells");
  return out;
}

}  // namespace txd
