#include <deque>
#include <future>
#include <thread>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "dacmap/runner.hpp"
#include "dacmap/simulate.hpp"

using namespace dacmap;

namespace {

struct Problem {
  AreaGraph graph;
  CountData data;
  ModelSpec spec;
};

Problem problem(int side, int blocks, int k) {
  Problem p;
  p.graph = grid_template(side, blocks);
  const Index periods = 3;
  RiskSurface s = smooth_surface(p.graph, periods, VarianceShares{}, 5);
  p.data = sample_counts(p.graph, default_times(periods), s.risk(), Vector::Constant(p.graph.size() * periods, 10.0), 6);
  p.spec.k = k;
  p.spec.engine.grid_points = 3;
  return p;
}

std::vector<int> bfs_distance(const AreaGraph &g, const std::vector<Index> &sources) {
  std::vector<int> d(static_cast<std::size_t>(g.size()), -1);
  std::deque<Index> q;
  for (Index s : sources) {
    d[static_cast<std::size_t>(s)] = 0;
    q.push_back(s);
  }
  while (!q.empty()) {
    Index a = q.front();
    q.pop_front();
    for (Index b : g.neighbours(a))
      if (d[static_cast<std::size_t>(b)] < 0) {
        d[static_cast<std::size_t>(b)] = d[static_cast<std::size_t>(a)] + 1;
        q.push_back(b);
      }
  }
  return d;
}

void expect_same_results(const ExecutionReport &a, const ExecutionReport &b) {
  ASSERT_EQ(a.results.size(), b.results.size());
  for (std::size_t j = 0; j < a.results.size(); ++j) {
    EXPECT_EQ(a.results[j].digest, b.results[j].digest);
    EXPECT_EQ(a.results[j].fit.cpo, b.results[j].fit.cpo);
    ASSERT_EQ(a.results[j].fit.eta.size(), b.results[j].fit.eta.size());
    for (std::size_t c = 0; c < a.results[j].fit.eta.size(); ++c)
      EXPECT_EQ(a.results[j].fit.eta[c].density, b.results[j].fit.eta[c].density);
  }
}

// In-process worker serving one connection on an ephemeral port.
struct LocalWorker {
  std::thread thread;
  int port = 0;

  explicit LocalWorker(int fail_after = -1) {
    std::promise<int> ready;
    auto fut = ready.get_future();
    WorkerOptions opt;
    opt.fail_after = fail_after;
    opt.exit_on_failure = false;
    opt.max_connections = 1;
    opt.on_listening = [&ready](int p) { ready.set_value(p); };
    thread = std::thread([opt] { serve_worker(opt); });
    port = fut.get();
  }
  ~LocalWorker() {
    if (thread.joinable()) thread.join();
  }
  Endpoint endpoint() const { return {"127.0.0.1", port}; }
};

}  // namespace

TEST(Runner, KOrderJobsMatchBfs) {
  Problem p = problem(6, 2, 1);
  JobManifest m = plan_jobs(p.graph, p.data, p.spec);
  ASSERT_EQ(m.jobs.size(), 4u);
  for (const Job &job : m.jobs) {
    std::vector<Index> core;
    for (Index i = 0; i < p.graph.size(); ++i)
      if (p.graph.label(i) == job.label) core.push_back(i);
    std::vector<int> d = bfs_distance(p.graph, core);
    std::vector<Index> expected;
    for (Index i = 0; i < p.graph.size(); ++i)
      if (d[static_cast<std::size_t>(i)] >= 0 && d[static_cast<std::size_t>(i)] <= 1) expected.push_back(i);
    EXPECT_EQ(job.areas, expected) << "subdomain " << job.label;
    EXPECT_EQ(job.data.n(), static_cast<Index>(expected.size()));
    for (std::size_t a = 0; a < job.areas.size(); ++a)
      EXPECT_EQ(job.core_mask[a], p.graph.label(job.areas[a]) == job.label);
  }
}

TEST(Runner, JobSerializationRoundTrip) {
  Problem p = problem(4, 2, 1);
  JobManifest m = plan_jobs(p.graph, p.data, p.spec);
  const Job &job = m.jobs[2];
  Job back = job_from_json(nlohmann::json::parse(to_json(job).dump()));
  EXPECT_EQ(back.digest(), job.digest());
  EXPECT_EQ(back.areas, job.areas);
  EXPECT_EQ(back.core_mask, job.core_mask);
  EXPECT_EQ(back.data.observed, job.data.observed);
  EXPECT_EQ(back.graph.edges(), job.graph.edges());
  EXPECT_EQ(back.prior.interaction, job.prior.interaction);
  EXPECT_EQ(back.engine.grid_points, job.engine.grid_points);

  JobManifest mb = manifest_from_json(nlohmann::json::parse(to_json(m).dump()));
  ASSERT_EQ(mb.jobs.size(), m.jobs.size());
  for (std::size_t j = 0; j < m.jobs.size(); ++j) EXPECT_EQ(mb.jobs[j].digest(), m.jobs[j].digest());

  SubmodelResult r = run_job(job);
  SubmodelResult rb = submodel_result_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(rb.digest, job.digest());
  EXPECT_EQ(rb.fit.cpo, r.fit.cpo);
}

TEST(Runner, ParallelMatchesSequential) {
  Problem p = problem(4, 2, 1);
  JobManifest m = plan_jobs(p.graph, p.data, p.spec);
  ExecutionOptions seq;
  ExecutionReport a = execute(m, seq);
  ExecutionOptions par;
  par.plan = Plan::Parallel;
  par.jobs = 3;
  ExecutionReport b = execute(m, par);
  expect_same_results(a, b);
  par.scheduling = Scheduling::WorkStealing;
  expect_same_results(a, execute(m, par));
}

TEST(Runner, ClusterRoundRobinAndRetry) {
  Problem p = problem(4, 2, 1);
  JobManifest m = plan_jobs(p.graph, p.data, p.spec);
  ExecutionReport ref = execute(m, ExecutionOptions{});

  {
    LocalWorker w1, w2;
    ExecutionOptions opt;
    opt.plan = Plan::Cluster;
    opt.workers = {w1.endpoint(), w2.endpoint()};
    ExecutionReport r = execute(m, opt);
    expect_same_results(ref, r);
    EXPECT_EQ(r.retries, 0);
    EXPECT_EQ(r.jobs_per_worker, (std::vector<int>{2, 2}));
  }
  {
    // The second worker drops its connection on its first job.
    LocalWorker good, bad(0);
    ExecutionOptions opt;
    opt.plan = Plan::Cluster;
    opt.workers = {good.endpoint(), bad.endpoint()};
    ExecutionReport r = execute(m, opt);
    expect_same_results(ref, r);
    EXPECT_GE(r.retries, 1);
  }
}

TEST(Runner, ClusterWithoutLiveWorkersFails) {
  Problem p = problem(4, 2, 0);
  JobManifest m = plan_jobs(p.graph, p.data, p.spec);
  LocalWorker bad(0);
  ExecutionOptions opt;
  opt.plan = Plan::Cluster;
  opt.workers = {bad.endpoint()};
  try {
    execute(m, opt);
    FAIL() << "expected a worker error";
  } catch (const Error &e) {
    EXPECT_EQ(e.kind(), ErrorKind::Worker);
  }
}

TEST(Runner, EndpointParsing) {
  auto eps = parse_endpoints("127.0.0.1:5000,localhost:6001");
  ASSERT_EQ(eps.size(), 2u);
  EXPECT_EQ(eps[1].host, "localhost");
  EXPECT_EQ(eps[1].port, 6001);
  EXPECT_THROW(parse_endpoint("nohost"), Error);
  EXPECT_EQ(parse_plan("cluster"), Plan::Cluster);
  EXPECT_EQ(parse_merge("mixture"), MergeStrategy::Mixture);
}
