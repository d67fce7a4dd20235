#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dacmap/runner.hpp"
#include "dacmap/simulate.hpp"

namespace dacmap {

inline constexpr int kConfigVersion = 1;

struct DataPaths {
  std::string counts;
  std::string graph;
  std::string partition;   // optional: one label per area
};

struct SimulateConfig {
  std::string generator = "smooth";   // smooth | gmrf
  int side = 16;
  int blocks_per_side = 2;
  int periods = 10;
  double expected = 10.0;
  int replicates = 10;
  VarianceShares shares;
  double total_sd = 0.3;
  GmrfTaus taus{20.0, 50.0, 50.0};
  Interaction interaction = Interaction::IV;
};

struct BenchmarkConfig {
  std::vector<int> sizes = {256, 1024};
  int periods = 10;
  int blocks_per_side = 4;
  Interaction interaction = Interaction::IV;
  int k = 0;
  double expected = 10.0;
  double budget_seconds = 1800.0;   // Global fits beyond this are DNF
  GmrfTaus taus{20.0, 50.0, 50.0};
};

struct Config {
  int version = kConfigVersion;
  DataPaths data;
  ModelSpec spec;
  std::string out;
  SimulateConfig simulate;
  BenchmarkConfig benchmark;
};

/// Strict parse: unknown keys and wrong types raise Error(Validation) naming
/// the JSON path, e.g. `$.model.interaction`.
Config parse_config(const nlohmann::json &j);
Config load_config(const std::string &path);
nlohmann::json to_json(const Config &c);

/// DACMAP_WORKERS (comma-separated host:port) replaces the worker list.
void apply_environment(Config &c);

}  // namespace dacmap
