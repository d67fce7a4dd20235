#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "dacmap/config.hpp"
#include "dacmap/merge.hpp"
#include "dacmap/metrics.hpp"
#include "dacmap/runner.hpp"
#include "dacmap/simulate.hpp"

namespace dacmap {

using LogFn = std::function<void(const std::string &)>;

struct FitOutcome {
  JobManifest manifest;
  ExecutionReport execution;
  MergedResult merged;
};

/// Partition, fit every submodel under spec.plan, merge by spec.merge and
/// compute DIC/WAIC. With `out_dir` set, writes manifest.json, submodels/,
/// merged.csv, merged.json and log.txt there and resumes from checkpoints.
FitOutcome run_fit(const AreaGraph &g, const CountData &data, const ModelSpec &spec,
                   const std::filesystem::path &out_dir = {}, LogFn log = {});

/// Copy of `g` with every area in one subdomain (the Global model).
AreaGraph single_domain(const AreaGraph &g);

struct SimulatedDataset {
  AreaGraph graph;                 // with partition and coordinates
  std::vector<std::string> times;
  Vector truth;                    // risk, time-major
  std::vector<CountData> replicates;
};

SimulatedDataset simulate_dataset(const SimulateConfig &cfg, std::uint64_t seed);
/// graph.tsv, partition.csv, truth.csv, counts_<l>.csv and meta.json.
void write_dataset(const std::filesystem::path &dir, const SimulatedDataset &d, const SimulateConfig &cfg,
                   std::uint64_t seed);

struct BenchmarkRow {
  std::string model;            // Global or Partitioned
  Interaction interaction = Interaction::IV;
  Index n = 0;
  int subdomains = 1;
  double t_run = 0.0;           // budget when DNF
  double t_merge = 0.0;
  bool dnf = false;
};

std::vector<BenchmarkRow> run_benchmark(const BenchmarkConfig &cfg, const ModelSpec &base, LogFn log = {});
/// `model,interaction,n,subdomains,t_run,t_merge,status` with status ok or DNF.
void write_benchmark_csv(std::ostream &out, const std::vector<BenchmarkRow> &rows);

}  // namespace dacmap
