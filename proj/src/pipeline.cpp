#include "dacmap/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>

#include <nlohmann/json.hpp>

#include "dacmap/csv.hpp"

namespace dacmap {

namespace {

void write_text(const std::filesystem::path &p, const std::string &s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + p.string());
  out << s;
}

}  // namespace

AreaGraph single_domain(const AreaGraph &g) {
  return g.with_partition(std::vector<int>(static_cast<std::size_t>(g.size()), 1));
}

FitOutcome run_fit(const AreaGraph &g, const CountData &data, const ModelSpec &spec,
                   const std::filesystem::path &out_dir, LogFn log) {
  spec.validate();
  std::mutex mu;
  std::ofstream log_file;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log_file.open(out_dir / "log.txt", std::ios::app);
  }
  LogFn sink = [&](const std::string &s) {
    std::lock_guard lock(mu);
    if (log_file) log_file << s << '\n' << std::flush;
    if (log) log(s);
  };

  FitOutcome out;
  const AreaGraph part = g.has_partition() ? g : single_domain(g);
  out.manifest = plan_jobs(part, data, spec);
  for (const auto &w : out.manifest.warnings) sink("warning: " + w);
  sink("planned " + std::to_string(out.manifest.jobs.size()) + " submodels, k = " + std::to_string(spec.k) +
       ", interaction " + to_string(spec.prior.interaction) + ", plan " + to_string(spec.plan));
  if (!out_dir.empty()) write_text(out_dir / "manifest.json", to_json(out.manifest).dump(1));

  ExecutionOptions eo;
  eo.plan = spec.plan;
  eo.jobs = spec.jobs;
  eo.scheduling = spec.scheduling;
  eo.workers = spec.workers;
  eo.run_dir = out_dir;
  eo.log = sink;
  out.execution = execute(out.manifest, eo);
  sink("fitting finished in " + std::to_string(out.execution.t_run) + " s (" +
       std::to_string(out.execution.retries) + " retries, " + std::to_string(out.execution.reused) + " reused)");

  const CountData aligned = data.aligned_to(part);
  out.merged = merge_results(out.execution.results, out.manifest, aligned, spec.merge, spec.mixture_points,
                             spec.ic_samples, spec.seed);
  out.merged.t_run = out.execution.t_run;
  sink("merged (" + to_string(spec.merge) + ") in " + std::to_string(out.merged.t_merge) + " s; DIC " +
       format_double(out.merged.ic.dic) + ", WAIC " + format_double(out.merged.ic.waic));
  if (!out_dir.empty()) {
    std::ofstream csv(out_dir / "merged.csv", std::ios::binary);
    write_merged_csv(csv, out.merged);
    if (!csv) throw Error(ErrorKind::Io, "cannot write merged.csv");
    write_text(out_dir / "merged.json", to_json(out.merged).dump(1));
  }
  return out;
}

SimulatedDataset simulate_dataset(const SimulateConfig &cfg, std::uint64_t seed) {
  SimulatedDataset d;
  d.graph = grid_template(cfg.side, cfg.blocks_per_side);
  d.times = default_times(cfg.periods);
  RiskSurface s = cfg.generator == "gmrf"
                      ? gmrf_surface(d.graph, cfg.periods, cfg.taus, cfg.interaction, derive_seed(seed, "truth"))
                      : smooth_surface(d.graph, cfg.periods, cfg.shares, derive_seed(seed, "truth"), cfg.total_sd);
  d.truth = s.risk();
  const Vector expected = Vector::Constant(d.truth.size(), cfg.expected);
  for (int l = 0; l < cfg.replicates; ++l)
    d.replicates.push_back(
        sample_counts(d.graph, d.times, d.truth, expected, derive_seed(seed, "replicate:" + std::to_string(l + 1))));
  return d;
}

void write_dataset(const std::filesystem::path &dir, const SimulatedDataset &d, const SimulateConfig &cfg,
                   std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "graph.tsv");
    write_edge_list(out, d.graph);
  }
  {
    std::ofstream out(dir / "partition.csv");
    write_partition(out, d.graph);
  }
  {
    std::ofstream out(dir / "truth.csv");
    write_truth(out, d.graph, d.times, d.truth);
  }
  for (std::size_t l = 0; l < d.replicates.size(); ++l) {
    std::ofstream out(dir / ("counts_" + std::to_string(l + 1) + ".csv"));
    write_counts(out, d.replicates[l]);
  }
  nlohmann::json meta = {{"generator", kGeneratorVersion},
                         {"kind", cfg.generator},
                         {"seed", seed},
                         {"side", cfg.side},
                         {"blocks_per_side", cfg.blocks_per_side},
                         {"periods", cfg.periods},
                         {"expected", cfg.expected},
                         {"replicates", cfg.replicates}};
  if (cfg.generator == "smooth")
    meta["shares"] = {cfg.shares.spatial, cfg.shares.temporal, cfg.shares.interaction},
    meta["total_sd"] = cfg.total_sd;
  else
    meta["taus"] = {cfg.taus.spatial, cfg.taus.temporal, cfg.taus.interaction},
    meta["interaction"] = to_string(cfg.interaction);
  write_text(dir / "meta.json", meta.dump(1));
}

std::vector<BenchmarkRow> run_benchmark(const BenchmarkConfig &cfg, const ModelSpec &base, LogFn log) {
  std::vector<BenchmarkRow> rows;
  auto say = [&](const std::string &s) {
    if (log) log(s);
  };
  for (int n : cfg.sizes) {
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
    AreaGraph g = grid_template(side, cfg.blocks_per_side);
    auto times = default_times(cfg.periods);
    RiskSurface s = gmrf_surface(g, cfg.periods, cfg.taus, cfg.interaction, derive_seed(base.seed, "bench:" + std::to_string(n)));
    CountData data = sample_counts(g, times, s.risk(), Vector::Constant(s.log_risk.size(), cfg.expected),
                                   derive_seed(base.seed, "bench-counts:" + std::to_string(n)));
    ModelSpec spec = base;
    spec.prior.interaction = cfg.interaction;

    // Global model under the time budget.
    {
      BenchmarkRow row{"Global", cfg.interaction, g.size(), 1};
      ModelSpec gs = spec;
      gs.k = 0;
      gs.plan = Plan::Sequential;
      JobManifest m = plan_jobs(single_domain(g), data, gs);
      m.jobs[0].engine.deadline =
          std::chrono::steady_clock::now() + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                 std::chrono::duration<double>(cfg.budget_seconds));
      auto t0 = std::chrono::steady_clock::now();
      try {
        ExecutionOptions eo;
        ExecutionReport rep = execute(m, eo);
        row.t_run = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        auto t1 = std::chrono::steady_clock::now();
        MergedResult mr = merge_results(rep.results, m, data.aligned_to(g), MergeStrategy::Original,
                                        spec.mixture_points, spec.ic_samples, spec.seed);
        row.t_merge = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
      } catch (const Error &e) {
        if (e.kind() != ErrorKind::Budget) throw;
        row.dnf = true;
        row.t_run = cfg.budget_seconds;
      }
      say("n = " + std::to_string(n) + " Global: " + (row.dnf ? "DNF" : format_double(row.t_run) + " s"));
      rows.push_back(row);
    }
    // Partitioned model.
    {
      ModelSpec ps = spec;
      ps.k = cfg.k;
      FitOutcome fo = run_fit(g, data, ps);
      BenchmarkRow row{"Partitioned", cfg.interaction, g.size(), g.num_subdomains(), fo.execution.t_run,
                       fo.merged.t_merge, false};
      say("n = " + std::to_string(n) + " Partitioned: " + format_double(row.t_run) + " s");
      rows.push_back(row);
    }
  }
  return rows;
}

void write_benchmark_csv(std::ostream &out, const std::vector<BenchmarkRow> &rows) {
  out << "model,interaction,n,subdomains,t_run,t_merge,status\n";
  for (const auto &r : rows)
    out << r.model << ',' << to_string(r.interaction) << ',' << r.n << ',' << r.subdomains << ','
        << format_double(r.t_run) << ',' << format_double(r.t_merge) << ',' << (r.dnf ? "DNF" : "ok") << '\n';
}

}  // namespace dacmap
