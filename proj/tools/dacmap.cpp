#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dacmap/csv.hpp"
#include "dacmap/pipeline.hpp"

using namespace dacmap;
namespace fs = std::filesystem;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Validation:
    case ErrorKind::Io: return 2;
    case ErrorKind::Worker: return 3;
    case ErrorKind::Convergence:
    case ErrorKind::Budget: return 4;
  }
  return 1;
}

void log_stderr(const std::string &s) { std::cerr << s << '\n'; }

AreaGraph load_graph(const std::string &graph, const std::string &partition) {
  if (graph.empty()) fail("no adjacency file given (--graph or data.graph)");
  AreaGraph g = load_adjacency(graph);
  if (!partition.empty()) g = g.with_partition(read_partition_file(partition, g));
  return g;
}

struct FitArgs {
  std::string config, counts, graph, partition, interaction, temporal, plan, workers, merge, scheduling, out;
  int k = -1, jobs = 0, ic_samples = 0, grid_points = 0;
  std::int64_t seed = -1;
};

int cmd_fit(const FitArgs &a) {
  Config c;
  if (!a.config.empty()) c = load_config(a.config);
  if (!a.counts.empty()) c.data.counts = a.counts;
  if (!a.graph.empty()) c.data.graph = a.graph;
  if (!a.partition.empty()) c.data.partition = a.partition;
  if (!a.interaction.empty()) c.spec.prior.interaction = parse_interaction(a.interaction);
  if (!a.temporal.empty()) {
    if (a.temporal != "rw1" && a.temporal != "rw2") fail("--temporal must be rw1 or rw2");
    c.spec.prior.temporal_order = a.temporal == "rw1" ? 1 : 2;
  }
  if (a.k >= 0) c.spec.k = a.k;
  if (!a.plan.empty()) c.spec.plan = parse_plan(a.plan);
  if (a.jobs > 0) c.spec.jobs = a.jobs;
  if (!a.scheduling.empty()) {
    if (a.scheduling != "round_robin" && a.scheduling != "work_stealing")
      fail("--scheduling must be round_robin or work_stealing");
    c.spec.scheduling = a.scheduling == "round_robin" ? Scheduling::RoundRobin : Scheduling::WorkStealing;
  }
  if (!a.workers.empty()) c.spec.workers = parse_endpoints(a.workers);
  apply_environment(c);
  if (!a.merge.empty()) c.spec.merge = parse_merge(a.merge);
  if (a.seed >= 0) c.spec.seed = static_cast<std::uint64_t>(a.seed);
  if (a.ic_samples > 0) c.spec.ic_samples = a.ic_samples;
  if (a.grid_points > 0) c.spec.engine.grid_points = a.grid_points;
  if (!a.out.empty()) c.out = a.out;
  if (c.out.empty()) fail("no output directory given (--out or output.dir)");
  if (c.data.counts.empty()) fail("no count data given (--data or data.counts)");
  c.spec.validate();

  AreaGraph g = load_graph(c.data.graph, c.data.partition);
  CountData data = read_counts_file(c.data.counts);
  FitOutcome fo = run_fit(g, data, c.spec, c.out, log_stderr);
  const auto &ic = fo.merged.ic;
  std::cout << "run directory: " << c.out << '\n'
            << "submodels: " << fo.manifest.jobs.size() << ", T.run " << std::fixed << std::setprecision(2)
            << fo.merged.t_run << " s, T.merge " << fo.merged.t_merge << " s\n"
            << "mean deviance " << ic.mean_deviance << ", p_D " << ic.p_d << ", DIC " << ic.dic << ", WAIC "
            << ic.waic << '\n';
  return 0;
}

int cmd_worker(const std::string &listen, int fail_after) {
  WorkerOptions w;
  w.listen = listen;
  w.fail_after = fail_after;
  w.on_listening = [&](int port) {
    auto ep = parse_endpoint(listen);
    std::cout << "listening on " << ep.host << ':' << port << std::endl;
  };
  w.log = log_stderr;
  serve_worker(w);
  return 0;
}

struct SimArgs {
  std::string config, out, generator, interaction;
  int side = 0, blocks = 0, periods = 0, replicates = 0;
  double expected = 0.0;
  std::int64_t seed = -1;
};

int cmd_simulate(const SimArgs &a) {
  Config c;
  if (!a.config.empty()) c = load_config(a.config);
  auto &s = c.simulate;
  if (!a.generator.empty()) s.generator = a.generator;
  if (s.generator != "smooth" && s.generator != "gmrf") fail("--generator must be smooth or gmrf");
  if (!a.interaction.empty()) s.interaction = parse_interaction(a.interaction);
  if (a.side > 0) s.side = a.side;
  if (a.blocks > 0) s.blocks_per_side = a.blocks;
  if (a.periods > 0) s.periods = a.periods;
  if (a.replicates > 0) s.replicates = a.replicates;
  if (a.expected > 0) s.expected = a.expected;
  if (a.seed >= 0) c.spec.seed = static_cast<std::uint64_t>(a.seed);
  std::string out = a.out.empty() ? c.out : a.out;
  if (out.empty()) fail("no output directory given (--out)");
  SimulatedDataset d = simulate_dataset(s, c.spec.seed);
  write_dataset(out, d, s, c.spec.seed);
  std::cout << "wrote " << d.replicates.size() << " replicate(s) of " << d.graph.size() << " areas x "
            << d.times.size() << " periods to " << out << '\n';
  return 0;
}

struct EvalArgs {
  std::string truth, graph, partition, out, csv, areas_csv;
  std::vector<std::string> merged;
  std::vector<double> thresholds = kDefaultThresholds;
  bool border = false;
};

int cmd_evaluate(const EvalArgs &a) {
  AreaGraph g = load_graph(a.graph, a.partition);
  if (a.merged.empty()) fail("no merged result files given");
  // Times come from the truth file in order of appearance.
  std::vector<std::string> times;
  {
    std::ifstream in(a.truth);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + a.truth);
    auto rows = read_csv(in);
    for (std::size_t k = 1; k < rows.size(); ++k)
      if (rows[k].size() > 1 && std::find(times.begin(), times.end(), rows[k][1]) == times.end())
        times.push_back(rows[k][1]);
  }
  std::ifstream tin(a.truth);
  Vector truth = read_truth(tin, g, times);
  std::vector<ReplicateFit> fits;
  for (const auto &m : a.merged) fits.push_back(read_merged_csv_file(m, g.ids(), times));
  EvalReport r = a.border ? border_restrict(truth, fits, g, a.thresholds)
                          : evaluate(truth, fits, g.size(), {}, a.thresholds);
  nlohmann::json j = to_json(r);
  if (!a.out.empty()) {
    std::ofstream out(a.out);
    out << j.dump(1) << '\n';
  } else {
    std::cout << j.dump(1) << '\n';
  }
  if (!a.csv.empty()) {
    std::ofstream out(a.csv);
    write_report_csv(out, r);
  }
  if (!a.areas_csv.empty()) {
    std::ofstream out(a.areas_csv);
    write_area_csv(out, r, g.ids());
  }
  return 0;
}

struct BenchArgs {
  std::string config, out, interaction;
  std::vector<int> sizes;
  double budget = 0.0;
  int periods = 0, blocks = 0, k = -1, grid_points = 0;
  std::int64_t seed = -1;
};

int cmd_benchmark(const BenchArgs &a) {
  Config c;
  if (!a.config.empty()) c = load_config(a.config);
  auto &b = c.benchmark;
  if (!a.sizes.empty()) b.sizes = a.sizes;
  if (a.budget > 0) b.budget_seconds = a.budget;
  if (a.periods > 0) b.periods = a.periods;
  if (a.blocks > 0) b.blocks_per_side = a.blocks;
  if (a.k >= 0) b.k = a.k;
  if (!a.interaction.empty()) b.interaction = parse_interaction(a.interaction);
  if (a.grid_points > 0) c.spec.engine.grid_points = a.grid_points;
  if (a.seed >= 0) c.spec.seed = static_cast<std::uint64_t>(a.seed);
  auto rows = run_benchmark(b, c.spec, log_stderr);
  if (!a.out.empty()) {
    std::ofstream out(a.out);
    write_benchmark_csv(out, rows);
  }
  write_benchmark_csv(std::cout, rows);
  return 0;
}

int cmd_report(const std::string &run) {
  const fs::path dir(run);
  std::ifstream min(dir / "merged.json");
  if (!min) throw Error(ErrorKind::Io, "no merged.json in " + run);
  auto merged = nlohmann::json::parse(min);
  std::ifstream man(dir / "manifest.json");
  if (!man) throw Error(ErrorKind::Io, "no manifest.json in " + run);
  JobManifest m = manifest_from_json(nlohmann::json::parse(man));
  std::cout << "areas " << m.area_ids.size() << ", periods " << m.times.size() << ", submodels " << m.jobs.size()
            << ", merge " << merged.at("strategy").get<std::string>() << '\n';
  const auto &ic = merged.at("ic");
  std::cout << std::fixed << std::setprecision(3) << "mean deviance " << ic.at("mean_deviance").get<double>()
            << "  p_D " << ic.at("p_d").get<double>() << "  DIC " << ic.at("dic").get<double>() << "  WAIC "
            << ic.at("waic").get<double>() << '\n';
  std::cout << "T.run " << merged.at("timing").at("t_run").get<double>() << " s  T.merge "
            << merged.at("timing").at("t_merge").get<double>() << " s\n";
  std::cout << "subdomain  areas  core  seconds  log-ml     hyperparameter means\n";
  for (const auto &job : m.jobs) {
    std::ifstream rin(dir / "submodels" / ("d" + std::to_string(job.label) + ".result"));
    if (!rin) {
      std::cout << std::setw(9) << job.label << "  (missing)\n";
      continue;
    }
    SubmodelResult r = submodel_result_from_json(nlohmann::json::parse(rin));
    long core = std::count(r.core_mask.begin(), r.core_mask.end(), true);
    std::cout << std::setw(9) << r.label << std::setw(7) << r.areas.size() << std::setw(6) << core << std::setw(9)
              << std::setprecision(2) << r.seconds << std::setw(10) << r.fit.log_marginal_likelihood << "  ";
    for (const auto &h : r.fit.hypers) std::cout << h.name << '=' << std::setprecision(3) << h.mean << ' ';
    std::cout << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Scalable Bayesian spatio-temporal disease mapping"};
  app.require_subcommand(1);

  FitArgs fa;
  auto *fit = app.add_subcommand("fit", "Partition, fit submodels and merge");
  fit->add_option("--config", fa.config, "JSON configuration file");
  fit->add_option("--data", fa.counts, "Counts CSV");
  fit->add_option("--graph", fa.graph, "Adjacency (edge list, dense CSV or GeoJSON)");
  fit->add_option("--partition", fa.partition, "Partition CSV (area_id,subdomain)");
  fit->add_option("--interaction", fa.interaction, "I, II, III or IV");
  fit->add_option("--temporal", fa.temporal, "rw1 or rw2");
  fit->add_option("--k", fa.k, "Neighbourhood order");
  fit->add_option("--plan", fa.plan, "sequential, parallel or cluster");
  fit->add_option("--jobs", fa.jobs, "Threads for the parallel plan");
  fit->add_option("--scheduling", fa.scheduling, "round_robin or work_stealing");
  fit->add_option("--workers", fa.workers, "host:port,... for the cluster plan");
  fit->add_option("--merge", fa.merge, "original or mixture");
  fit->add_option("--seed", fa.seed, "Master seed");
  fit->add_option("--ic-samples", fa.ic_samples, "Samples for DIC/WAIC");
  fit->add_option("--grid-points", fa.grid_points, "Hyperparameter grid points per axis");
  fit->add_option("--out", fa.out, "Run directory");

  std::string listen = "127.0.0.1:0";
  int fail_after = -1;
  auto *worker = app.add_subcommand("worker", "Serve submodel fits over TCP");
  worker->add_option("--listen", listen, "host:port to bind (port 0 picks one)");
  worker->add_option("--fail-after", fail_after, "Exit abruptly on the job after this many (testing)");

  SimArgs sa;
  auto *sim = app.add_subcommand("simulate", "Generate synthetic datasets");
  sim->add_option("--config", sa.config, "JSON configuration file");
  sim->add_option("--out", sa.out, "Output directory");
  sim->add_option("--generator", sa.generator, "smooth or gmrf");
  sim->add_option("--interaction", sa.interaction, "Interaction type for the gmrf generator");
  sim->add_option("--side", sa.side, "Grid side");
  sim->add_option("--blocks", sa.blocks, "Partition blocks per side");
  sim->add_option("--periods", sa.periods, "Time periods");
  sim->add_option("--expected", sa.expected, "Expected cases per cell");
  sim->add_option("--replicates", sa.replicates, "Replicate count datasets");
  sim->add_option("--seed", sa.seed, "Master seed");

  EvalArgs ea;
  auto *ev = app.add_subcommand("evaluate", "Score merged fits against the true risks");
  ev->add_option("--truth", ea.truth, "Truth CSV (area_id,time,risk)")->required();
  ev->add_option("--graph", ea.graph, "Adjacency file")->required();
  ev->add_option("--partition", ea.partition, "Partition CSV (needed for --border)");
  ev->add_option("--merged", ea.merged, "merged.csv of each replicate")->required();
  ev->add_option("--thresholds", ea.thresholds, "Exceedance thresholds p0");
  ev->add_flag("--border", ea.border, "Restrict to border areas of the partition");
  ev->add_option("--out", ea.out, "Report JSON (default stdout)");
  ev->add_option("--csv", ea.csv, "Report CSV");
  ev->add_option("--areas-csv", ea.areas_csv, "Per-area MARB/MRRMSE CSV");

  BenchArgs ba;
  auto *bench = app.add_subcommand("benchmark", "Time Global and partitioned fits on growing grids");
  bench->add_option("--config", ba.config, "JSON configuration file");
  bench->add_option("--sizes", ba.sizes, "Numbers of areas (squares)");
  bench->add_option("--budget", ba.budget, "Seconds before a Global fit is marked DNF");
  bench->add_option("--periods", ba.periods, "Time periods");
  bench->add_option("--blocks", ba.blocks, "Partition blocks per side");
  bench->add_option("--k", ba.k, "Neighbourhood order of the partitioned model");
  bench->add_option("--interaction", ba.interaction, "Interaction type");
  bench->add_option("--grid-points", ba.grid_points, "Hyperparameter grid points per axis");
  bench->add_option("--seed", ba.seed, "Master seed");
  bench->add_option("--out", ba.out, "Timing CSV");

  std::string run;
  auto *rep = app.add_subcommand("report", "Summarize a run directory");
  rep->add_option("run", run, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*fit) return cmd_fit(fa);
    if (*worker) return cmd_worker(listen, fail_after);
    if (*sim) return cmd_simulate(sa);
    if (*ev) return cmd_evaluate(ea);
    if (*bench) return cmd_benchmark(ba);
    if (*rep) return cmd_report(run);
  } catch (const Error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
