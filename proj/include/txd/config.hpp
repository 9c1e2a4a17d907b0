#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "txd/sim.hpp"

namespace txd {

/// Parses a flat TOML document (key = value lines, one level of [tables],
/// numbers, strings, booleans and single-line arrays) into JSON.
nlohmann::json parse_toml_subset(std::string_view text);

/// Reads a .json or .toml file; the extension decides the parser.
nlohmann::json read_config_file(const std::string& path);

/// Expands a simulation config into cells. `method`, `delta2` and `delta3`
/// may be scalars or arrays; arrays form a product from which cells that
/// break the δ3 = 0 rule for methods 2-4 are dropped. A scalar setting that
/// breaks it is an error. Unknown keys are rejected.
std::vector<SimConfig> sim_configs_from_json(const nlohmann::json& j);

}  // namespace txd
