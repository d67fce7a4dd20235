#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dacmap/graph.hpp"
#include "dacmap/inla.hpp"
#include "dacmap/lgm.hpp"

namespace dacmap {

enum class Plan { Sequential, Parallel, Cluster };
enum class MergeStrategy { Original, Mixture };
enum class Scheduling { RoundRobin, WorkStealing };

std::string to_string(Plan p);
std::string to_string(MergeStrategy m);
Plan parse_plan(const std::string &s);
MergeStrategy parse_merge(const std::string &s);

struct Endpoint {
  std::string host;
  int port = 0;
  std::string str() const { return host + ":" + std::to_string(port); }
};

Endpoint parse_endpoint(const std::string &s);
/// Comma-separated `host:port` list.
std::vector<Endpoint> parse_endpoints(const std::string &s);

struct ModelSpec {
  PriorSpec prior;
  int k = 0;
  Plan plan = Plan::Sequential;
  int jobs = 1;
  Scheduling scheduling = Scheduling::RoundRobin;
  std::vector<Endpoint> workers;
  MergeStrategy merge = MergeStrategy::Original;
  std::uint64_t seed = 1234;
  EngineOptions engine;
  int mixture_points = 75;
  int ic_samples = 1000;

  void validate() const;
};

/// Self-contained description of one submodel fit.
struct Job {
  int index = 0;          // position in the manifest
  int label = 0;          // partition label
  int k = 0;
  std::vector<Index> areas;      // global indices, sorted
  std::vector<bool> core_mask;
  AreaGraph graph;               // subdomain adjacency with global ids
  CountData data;                // rows aligned to `graph`
  PriorSpec prior;
  EngineOptions engine;
  std::uint64_t seed = 0;

  /// FNV-1a of the serialized job; identifies results on disk.
  std::string digest() const;
};

struct JobManifest {
  std::vector<std::string> area_ids;
  std::vector<std::string> times;
  std::vector<Job> jobs;
  std::vector<std::string> warnings;
};

struct SubmodelResult {
  int index = 0;
  int label = 0;
  std::string digest;
  std::vector<Index> areas;
  std::vector<bool> core_mask;
  FitResult fit;
  double seconds = 0.0;
  std::string worker;   // "local" or endpoint
};

/// One job per partition label; data extracted over each k-order expansion.
JobManifest plan_jobs(const AreaGraph &g, const CountData &data, const ModelSpec &spec);
SubmodelResult run_job(const Job &job);

nlohmann::json to_json(const Job &job);
Job job_from_json(const nlohmann::json &j);
nlohmann::json to_json(const JobManifest &m);
JobManifest manifest_from_json(const nlohmann::json &j);
nlohmann::json to_json(const SubmodelResult &r);
SubmodelResult submodel_result_from_json(const nlohmann::json &j);

struct ExecutionOptions {
  Plan plan = Plan::Sequential;
  int jobs = 1;
  Scheduling scheduling = Scheduling::RoundRobin;
  std::vector<Endpoint> workers;
  /// When set, results are checkpointed to `run_dir/submodels` and reused on
  /// a rerun if their digest matches.
  std::filesystem::path run_dir;
  std::function<void(const std::string &)> log;
};

struct ExecutionReport {
  std::vector<SubmodelResult> results;   // manifest order
  double t_run = 0.0;                    // elapsed wall time
  int retries = 0;
  int reused = 0;
  std::vector<int> jobs_per_worker;      // dispatch count per thread/endpoint
};

/// Fits every job under the chosen plan. Worker failures are retried once on
/// another worker; otherwise throws Error(Worker) after checkpointing the
/// results obtained so far.
ExecutionReport execute(const JobManifest &manifest, const ExecutionOptions &opt);

// Worker protocol: 4-byte big-endian payload length, 1-byte kind, JSON payload.
enum class MessageKind : std::uint8_t { Hello = 1, Job = 2, Result = 3, Error = 4, Bye = 5 };

struct Message {
  MessageKind kind = MessageKind::Hello;
  std::string payload;
};

inline constexpr const char *kProtocol = "dacmap-worker/1";

void send_message(int fd, const Message &m);
/// Returns false on orderly end of stream before a header.
bool recv_message(int fd, Message &m);

struct WorkerOptions {
  std::string listen = "127.0.0.1:0";
  /// Die abruptly when asked for job number fail_after + 1 (fault injection).
  int fail_after = -1;
  bool exit_on_failure = true;   // false: close the socket and stop serving
  int max_connections = -1;      // -1: serve forever
  std::function<void(int port)> on_listening;
  std::function<void(const std::string &)> log;
};

/// Blocking accept loop; one connection, one job at a time.
void serve_worker(const WorkerOptions &opt);

}  // namespace dacmap
