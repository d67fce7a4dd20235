#include "dacmap/runner.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <cstring>
#include <deque>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace dacmap {

using nlohmann::json;

std::string to_string(Plan p) {
  switch (p) {
    case Plan::Sequential: return "sequential";
    case Plan::Parallel: return "parallel";
    case Plan::Cluster: return "cluster";
  }
  return "?";
}

std::string to_string(MergeStrategy m) { return m == MergeStrategy::Original ? "original" : "mixture"; }

Plan parse_plan(const std::string &s) {
  if (s == "sequential") return Plan::Sequential;
  if (s == "parallel") return Plan::Parallel;
  if (s == "cluster") return Plan::Cluster;
  fail("unknown plan '" + s + "' (sequential, parallel, cluster)");
}

MergeStrategy parse_merge(const std::string &s) {
  if (s == "original") return MergeStrategy::Original;
  if (s == "mixture") return MergeStrategy::Mixture;
  fail("unknown merge strategy '" + s + "' (original, mixture)");
}

Endpoint parse_endpoint(const std::string &s) {
  auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size()) fail("endpoint '" + s + "' is not host:port");
  Endpoint e;
  e.host = s.substr(0, colon);
  try {
    std::size_t used = 0;
    e.port = std::stoi(s.substr(colon + 1), &used);
    if (used != s.size() - colon - 1) throw std::invalid_argument("");
  } catch (const std::exception &) {
    fail("endpoint '" + s + "' has a bad port");
  }
  if (e.port < 0 || e.port > 65535) fail("endpoint '" + s + "' has a bad port");
  return e;
}

std::vector<Endpoint> parse_endpoints(const std::string &s) {
  std::vector<Endpoint> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_endpoint(item));
  return out;
}

void ModelSpec::validate() const {
  if (k < 0) fail("neighbourhood order k must be >= 0");
  if (prior.temporal_order != 1 && prior.temporal_order != 2) fail("temporal prior must be RW1 or RW2");
  if (jobs < 1) fail("jobs must be >= 1");
  if (plan == Plan::Cluster && workers.empty()) fail("cluster plan needs at least one worker endpoint");
  if (mixture_points < 2) fail("mixture grid needs at least two points");
  if (ic_samples < 2) fail("ic_samples must be >= 2");
  if (engine.grid_points < 1 || engine.grid_points % 2 == 0) fail("engine grid_points must be odd");
  if (engine.marginal_points < 2) fail("engine marginal_points must be >= 2");
}

// ---------------------------------------------------------------------------
// Jobs

JobManifest plan_jobs(const AreaGraph &g, const CountData &data, const ModelSpec &spec) {
  spec.validate();
  if (!g.has_partition()) fail("graph has no partition");
  const CountData aligned = data.aligned_to(g);
  JobManifest m;
  m.area_ids = g.ids();
  m.times = aligned.times;
  for (int label = 1; label <= g.num_subdomains(); ++label) {
    Subdomain sd = expand_korder(g, label, spec.k);
    if (sd.core.empty()) fail("subdomain " + std::to_string(label) + " is empty");
    Job job;
    job.index = label - 1;
    job.label = label;
    job.k = spec.k;
    job.areas = sd.areas;
    job.core_mask = sd.core_mask;
    job.graph = sd.graph;
    job.data = aligned.subset(sd.areas);
    job.prior = spec.prior;
    job.engine = spec.engine;
    job.engine.deadline = std::chrono::steady_clock::time_point::max();
    job.seed = derive_seed(spec.seed, "subdomain:" + std::to_string(label));
    if (job.data.observed.sum() == 0.0)
      m.warnings.push_back("subdomain " + std::to_string(label) + " has no observed cases");
    m.jobs.push_back(std::move(job));
  }
  return m;
}

SubmodelResult run_job(const Job &job) {
  auto t0 = std::chrono::steady_clock::now();
  SpaceTimeModel st = build_model(job.graph, job.data, job.prior);
  InlaEngine engine(st.model, job.engine);
  SubmodelResult r;
  r.index = job.index;
  r.label = job.label;
  r.digest = job.digest();
  r.areas = job.areas;
  r.core_mask = job.core_mask;
  r.fit = engine.fit();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.worker = "local";
  return r;
}

namespace {

json vec_json(const Vector &v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector json_vec(const json &j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Vector>(v.data(), static_cast<Index>(v.size()));
}

json prior_json(const PriorSpec &p) {
  return {{"temporal_order", p.temporal_order},
          {"interaction", to_string(p.interaction)},
          {"sd_prior", p.hyper.sd_prior == SdPrior::Uniform ? "uniform" : "pc"},
          {"pc_u", p.hyper.pc_u},
          {"pc_alpha", p.hyper.pc_alpha},
          {"intercept_precision", p.hyper.intercept_precision},
          {"log_tau_min", p.hyper.log_tau_min},
          {"log_tau_max", p.hyper.log_tau_max}};
}

PriorSpec prior_from_json(const json &j) {
  PriorSpec p;
  p.temporal_order = j.at("temporal_order").get<int>();
  p.interaction = parse_interaction(j.at("interaction").get<std::string>());
  p.hyper.sd_prior = j.at("sd_prior").get<std::string>() == "uniform" ? SdPrior::Uniform : SdPrior::PenalizedComplexity;
  p.hyper.pc_u = j.at("pc_u").get<double>();
  p.hyper.pc_alpha = j.at("pc_alpha").get<double>();
  p.hyper.intercept_precision = j.at("intercept_precision").get<double>();
  p.hyper.log_tau_min = j.at("log_tau_min").get<double>();
  p.hyper.log_tau_max = j.at("log_tau_max").get<double>();
  return p;
}

json engine_json(const EngineOptions &e) {
  json j = {{"jitter", e.jitter},           {"max_newton", e.max_newton},
            {"newton_tol", e.newton_tol},   {"grid_points", e.grid_points},
            {"grid_step", e.grid_step},     {"prune_drop", e.prune_drop},
            {"marginal_points", e.marginal_points}, {"gh_nodes", e.gh_nodes},
            {"bfgs_max_iter", e.bfgs_max_iter},     {"bfgs_tol", e.bfgs_tol},
            {"fd_step", e.fd_step},         {"hessian_step", e.hessian_step},
            {"max_hyper_sd", e.max_hyper_sd},       {"cpo_refit_ess", e.cpo_refit_ess}};
  if (e.fixed_theta) j["fixed_theta"] = vec_json(*e.fixed_theta);
  return j;
}

EngineOptions engine_from_json(const json &j) {
  EngineOptions e;
  e.jitter = j.at("jitter").get<double>();
  e.max_newton = j.at("max_newton").get<int>();
  e.newton_tol = j.at("newton_tol").get<double>();
  e.grid_points = j.at("grid_points").get<int>();
  e.grid_step = j.at("grid_step").get<double>();
  e.prune_drop = j.at("prune_drop").get<double>();
  e.marginal_points = j.at("marginal_points").get<int>();
  e.gh_nodes = j.at("gh_nodes").get<int>();
  e.bfgs_max_iter = j.at("bfgs_max_iter").get<int>();
  e.bfgs_tol = j.at("bfgs_tol").get<double>();
  e.fd_step = j.at("fd_step").get<double>();
  e.hessian_step = j.at("hessian_step").get<double>();
  e.max_hyper_sd = j.at("max_hyper_sd").get<double>();
  e.cpo_refit_ess = j.at("cpo_refit_ess").get<double>();
  if (j.contains("fixed_theta")) e.fixed_theta = json_vec(j.at("fixed_theta"));
  return e;
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

json to_json(const Job &job) {
  json edges = json::array();
  for (const auto &[a, b] : job.graph.edges()) edges.push_back({a, b});
  std::vector<int> zeros(job.data.structural_zero.begin(), job.data.structural_zero.end());
  return {{"index", job.index},
          {"label", job.label},
          {"k", job.k},
          {"areas", job.areas},
          {"core_mask", job.core_mask},
          {"graph", {{"ids", job.graph.ids()}, {"edges", std::move(edges)}}},
          {"data",
           {{"area_ids", job.data.area_ids},
            {"times", job.data.times},
            {"observed", vec_json(job.data.observed)},
            {"expected", vec_json(job.data.expected)},
            {"structural_zero", zeros}}},
          {"prior", prior_json(job.prior)},
          {"engine", engine_json(job.engine)},
          {"seed", job.seed}};
}

Job job_from_json(const json &j) {
  Job job;
  job.index = j.at("index").get<int>();
  job.label = j.at("label").get<int>();
  job.k = j.at("k").get<int>();
  job.areas = j.at("areas").get<std::vector<Index>>();
  job.core_mask = j.at("core_mask").get<std::vector<bool>>();
  std::vector<Edge> edges;
  for (const auto &e : j.at("graph").at("edges")) edges.emplace_back(e.at(0).get<Index>(), e.at(1).get<Index>());
  job.graph = AreaGraph(j.at("graph").at("ids").get<std::vector<std::string>>(), std::move(edges));
  const auto &d = j.at("data");
  job.data.area_ids = d.at("area_ids").get<std::vector<std::string>>();
  job.data.times = d.at("times").get<std::vector<std::string>>();
  job.data.observed = json_vec(d.at("observed"));
  job.data.expected = json_vec(d.at("expected"));
  for (int z : d.at("structural_zero").get<std::vector<int>>()) job.data.structural_zero.push_back(z != 0);
  job.prior = prior_from_json(j.at("prior"));
  job.engine = engine_from_json(j.at("engine"));
  job.seed = j.at("seed").get<std::uint64_t>();
  if (job.areas.size() != job.core_mask.size() || static_cast<Index>(job.areas.size()) != job.graph.size())
    fail("job " + std::to_string(job.index) + " has inconsistent area lists");
  return job;
}

std::string Job::digest() const { return hex64(fnv1a(to_json(*this).dump())); }

json to_json(const JobManifest &m) {
  json jobs = json::array();
  for (const auto &j : m.jobs) jobs.push_back(to_json(j));
  return {{"format", "dacmap.manifest"}, {"version", 1}, {"area_ids", m.area_ids},
          {"times", m.times},           {"warnings", m.warnings}, {"jobs", std::move(jobs)}};
}

JobManifest manifest_from_json(const json &j) {
  if (j.value("format", "") != "dacmap.manifest" || j.value("version", 0) != 1) fail("not a version-1 manifest");
  JobManifest m;
  m.area_ids = j.at("area_ids").get<std::vector<std::string>>();
  m.times = j.at("times").get<std::vector<std::string>>();
  m.warnings = j.at("warnings").get<std::vector<std::string>>();
  for (const auto &x : j.at("jobs")) m.jobs.push_back(job_from_json(x));
  return m;
}

json to_json(const SubmodelResult &r) {
  return {{"format", "dacmap.submodel"}, {"version", 1},      {"index", r.index},
          {"label", r.label},            {"digest", r.digest}, {"areas", r.areas},
          {"core_mask", r.core_mask},    {"seconds", r.seconds}, {"worker", r.worker},
          {"fit", to_json(r.fit)}};
}

SubmodelResult submodel_result_from_json(const json &j) {
  if (j.value("format", "") != "dacmap.submodel" || j.value("version", 0) != 1) fail("not a version-1 submodel result");
  SubmodelResult r;
  r.index = j.at("index").get<int>();
  r.label = j.at("label").get<int>();
  r.digest = j.at("digest").get<std::string>();
  r.areas = j.at("areas").get<std::vector<Index>>();
  r.core_mask = j.at("core_mask").get<std::vector<bool>>();
  r.seconds = j.at("seconds").get<double>();
  r.worker = j.at("worker").get<std::string>();
  r.fit = fit_result_from_json(j.at("fit"));
  return r;
}

// ---------------------------------------------------------------------------
// Framing

namespace {

bool write_all(int fd, const char *p, std::size_t n) {
  while (n > 0) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w < 0 && errno == EINTR) continue;
    if (w <= 0) return false;
    p += w;
    n -= static_cast<std::size_t>(w);
  }
  return true;
}

// 1: complete, 0: clean EOF before any byte, -1: error or truncated
int read_all(int fd, char *p, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::recv(fd, p + got, n - got, 0);
    if (r < 0 && errno == EINTR) continue;
    if (r == 0) return got == 0 ? 0 : -1;
    if (r < 0) return -1;
    got += static_cast<std::size_t>(r);
  }
  return 1;
}

constexpr std::uint32_t kMaxPayload = 1u << 30;

}  // namespace

void send_message(int fd, const Message &m) {
  if (m.payload.size() > kMaxPayload) throw Error(ErrorKind::Worker, "message too large");
  auto n = static_cast<std::uint32_t>(m.payload.size());
  char head[5] = {static_cast<char>(n >> 24), static_cast<char>(n >> 16), static_cast<char>(n >> 8),
                  static_cast<char>(n), static_cast<char>(m.kind)};
  if (!write_all(fd, head, 5) || !write_all(fd, m.payload.data(), m.payload.size()))
    throw Error(ErrorKind::Worker, "connection lost while sending");
}

bool recv_message(int fd, Message &m) {
  unsigned char head[5];
  int r = read_all(fd, reinterpret_cast<char *>(head), 5);
  if (r == 0) return false;
  if (r < 0) throw Error(ErrorKind::Worker, "connection lost while receiving");
  std::uint32_t n = (std::uint32_t{head[0]} << 24) | (std::uint32_t{head[1]} << 16) | (std::uint32_t{head[2]} << 8) |
                    std::uint32_t{head[3]};
  if (n > kMaxPayload) throw Error(ErrorKind::Worker, "oversized message");
  if (head[4] < 1 || head[4] > 5) throw Error(ErrorKind::Worker, "unknown message kind");
  m.kind = static_cast<MessageKind>(head[4]);
  m.payload.assign(n, '\0');
  if (n > 0 && read_all(fd, m.payload.data(), n) != 1) throw Error(ErrorKind::Worker, "connection lost mid-message");
  return true;
}

namespace {

int connect_to(const Endpoint &e) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo *res = nullptr;
  if (getaddrinfo(e.host.c_str(), std::to_string(e.port).c_str(), &hints, &res) != 0) return -1;
  int fd = -1;
  for (addrinfo *a = res; a; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  freeaddrinfo(res);
  if (fd >= 0) {
    int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  return fd;
}

int connect_retry(const Endpoint &e, int attempts) {
  for (int a = 0; a < attempts; ++a) {
    int fd = connect_to(e);
    if (fd >= 0) return fd;
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  return -1;
}

void write_file_atomic(const std::filesystem::path &p, const std::string &content) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + tmp.string());
    out << content;
    if (!out) throw Error(ErrorKind::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

std::filesystem::path result_path(const std::filesystem::path &dir, int label) {
  return dir / "submodels" / ("d" + std::to_string(label) + ".result");
}

std::optional<SubmodelResult> load_checkpoint(const std::filesystem::path &dir, const Job &job,
                                              const std::string &digest) {
  auto p = result_path(dir, job.label);
  if (!std::filesystem::exists(p)) return std::nullopt;
  try {
    std::ifstream in(p, std::ios::binary);
    auto r = submodel_result_from_json(json::parse(in));
    if (r.digest != digest || r.index != job.index) return std::nullopt;
    return r;
  } catch (const std::exception &) {
    return std::nullopt;  // unreadable or stale: refit
  }
}

// Shared state of one execution. All fields are guarded by `mu`.
struct RunState {
  std::mutex mu;
  std::condition_variable cv;
  const JobManifest *manifest = nullptr;
  const ExecutionOptions *opt = nullptr;
  std::vector<std::optional<SubmodelResult>> results;
  std::vector<std::string> digests;
  std::vector<int> failures;
  std::vector<std::deque<int>> queues;   // round robin
  std::deque<int> shared;                // work stealing
  std::vector<bool> alive;
  std::vector<int> dispatched;
  int remaining = 0;
  int retries = 0;
  bool aborted = false;
  ErrorKind abort_kind = ErrorKind::Worker;
  std::string abort_reason;

  void log(const std::string &s) {
    if (opt->log) opt->log(s);
  }

  void store(SubmodelResult r) {
    if (!opt->run_dir.empty()) write_file_atomic(result_path(opt->run_dir, r.label), to_json(r).dump());
    auto i = static_cast<std::size_t>(r.index);
    results[i] = std::move(r);
    --remaining;
    cv.notify_all();
  }

  void abort(ErrorKind kind, const std::string &why) {
    if (!aborted) {
      aborted = true;
      abort_kind = kind;
      abort_reason = why;
      log("abort: " + why);
    }
    cv.notify_all();
  }

  // Next job for worker w, or -1 when the run is over for it.
  int next(int w, bool stealing) {
    std::unique_lock lock(mu);
    for (;;) {
      if (aborted || remaining == 0) return -1;
      auto &q = stealing ? shared : queues[static_cast<std::size_t>(w)];
      if (!q.empty()) {
        int j = q.front();
        q.pop_front();
        ++dispatched[static_cast<std::size_t>(w)];
        return j;
      }
      cv.wait(lock);
    }
  }
};

void run_local(RunState &st, const std::vector<int> &pending) {
  const auto &opt = *st.opt;
  const int threads = opt.plan == Plan::Parallel ? std::max(1, std::min<int>(opt.jobs, static_cast<int>(pending.size()))) : 1;
  st.dispatched.assign(static_cast<std::size_t>(threads), 0);
  std::atomic<std::size_t> cursor{0};
  std::vector<std::exception_ptr> errors(pending.size());

  auto body = [&](int w) {
    auto take = [&](std::size_t &slot) {
      if (opt.scheduling == Scheduling::WorkStealing) {
        slot = cursor.fetch_add(1);
        return slot < pending.size();
      }
      return slot < pending.size();
    };
    std::size_t slot = static_cast<std::size_t>(w);
    while (take(slot)) {
      {
        std::lock_guard lock(st.mu);
        if (st.aborted) return;
        ++st.dispatched[static_cast<std::size_t>(w)];
      }
      int j = pending[slot];
      try {
        SubmodelResult r = run_job(st.manifest->jobs[static_cast<std::size_t>(j)]);
        r.digest = st.digests[static_cast<std::size_t>(j)];
        std::lock_guard lock(st.mu);
        st.log("fitted subdomain " + std::to_string(r.label) + " in " + std::to_string(r.seconds) + " s");
        st.store(std::move(r));
      } catch (...) {
        errors[slot] = std::current_exception();
        std::lock_guard lock(st.mu);
        st.aborted = true;
        return;
      }
      if (opt.scheduling == Scheduling::RoundRobin) slot += static_cast<std::size_t>(threads);
    }
  };

  if (threads == 1) {
    body(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) pool.emplace_back(body, w);
    for (auto &t : pool) t.join();
  }
  for (auto &e : errors)
    if (e) std::rethrow_exception(e);  // lowest job index first
}

void run_cluster(RunState &st, const std::vector<int> &pending) {
  const auto &opt = *st.opt;
  const int nw = static_cast<int>(opt.workers.size());
  const bool stealing = opt.scheduling == Scheduling::WorkStealing;
  st.queues.assign(static_cast<std::size_t>(nw), {});
  st.alive.assign(static_cast<std::size_t>(nw), true);
  st.dispatched.assign(static_cast<std::size_t>(nw), 0);
  for (std::size_t s = 0; s < pending.size(); ++s) {
    if (stealing) st.shared.push_back(pending[s]);
    else st.queues[s % static_cast<std::size_t>(nw)].push_back(pending[s]);
  }

  // Called with the lock held after worker w lost job j (or -1).
  auto lose_worker = [&](int w, int j) {
    st.alive[static_cast<std::size_t>(w)] = false;
    std::vector<int> orphans;
    if (j >= 0) {
      if (++st.failures[static_cast<std::size_t>(j)] > 1) {
        st.abort(ErrorKind::Worker, "subdomain " + std::to_string(st.manifest->jobs[static_cast<std::size_t>(j)].label) +
                                        " failed on two workers");
        return;
      }
      orphans.push_back(j);
      ++st.retries;
    }
    auto &q = st.queues[static_cast<std::size_t>(w)];
    orphans.insert(orphans.end(), q.begin(), q.end());
    q.clear();
    std::vector<int> live;
    for (int v = 0; v < nw; ++v)
      if (st.alive[static_cast<std::size_t>(v)]) live.push_back(v);
    if (live.empty() && (!orphans.empty() || !st.shared.empty() || st.remaining > 0)) {
      st.abort(ErrorKind::Worker, "no live workers left");
      return;
    }
    for (std::size_t s = 0; s < orphans.size(); ++s) {
      int v = live[s % live.size()];
      if (stealing) st.shared.push_front(orphans[s]);
      else st.queues[static_cast<std::size_t>(v)].push_front(orphans[s]);
      st.log("reassigned subdomain " + std::to_string(st.manifest->jobs[static_cast<std::size_t>(orphans[s])].label) +
             " to " + (stealing ? std::string("shared queue") : opt.workers[static_cast<std::size_t>(v)].str()));
    }
    st.cv.notify_all();
  };

  auto body = [&](int w) {
    const Endpoint &ep = opt.workers[static_cast<std::size_t>(w)];
    int fd = connect_retry(ep, 50);
    bool ok = fd >= 0;
    if (ok) {
      try {
        send_message(fd, {MessageKind::Hello, json{{"protocol", kProtocol}}.dump()});
        Message m;
        ok = recv_message(fd, m) && m.kind == MessageKind::Hello &&
             json::parse(m.payload).value("protocol", "") == kProtocol;
      } catch (const std::exception &) {
        ok = false;
      }
    }
    if (!ok) {
      std::lock_guard lock(st.mu);
      st.log("worker " + ep.str() + " unreachable");
      lose_worker(w, -1);
      if (fd >= 0) ::close(fd);
      return;
    }
    {
      std::lock_guard lock(st.mu);
      st.log("connected to worker " + ep.str());
    }
    for (;;) {
      int j = st.next(w, stealing);
      if (j < 0) break;
      const Job &job = st.manifest->jobs[static_cast<std::size_t>(j)];
      {
        std::lock_guard lock(st.mu);
        st.log("dispatch subdomain " + std::to_string(job.label) + " to " + ep.str());
      }
      Message reply;
      bool got = false;
      try {
        send_message(fd, {MessageKind::Job, to_json(job).dump()});
        got = recv_message(fd, reply);
      } catch (const Error &) {
        got = false;
      }
      std::lock_guard lock(st.mu);
      if (!got) {
        st.log("worker " + ep.str() + " failed during subdomain " + std::to_string(job.label));
        lose_worker(w, j);
        ::close(fd);
        return;
      }
      if (reply.kind == MessageKind::Result) {
        try {
          SubmodelResult r = submodel_result_from_json(json::parse(reply.payload));
          r.worker = ep.str();
          if (r.index != j || r.digest != st.digests[static_cast<std::size_t>(j)])
            fail("worker returned a result for a different job");
          st.log("fitted subdomain " + std::to_string(r.label) + " on " + ep.str() + " in " +
                 std::to_string(r.seconds) + " s");
          st.store(std::move(r));
        } catch (const std::exception &e) {
          st.abort(ErrorKind::Worker, std::string("bad result from ") + ep.str() + ": " + e.what());
        }
      } else if (reply.kind == MessageKind::Error) {
        auto e = json::parse(reply.payload, nullptr, false);
        int kind = e.is_object() ? e.value("kind", 1) : 1;
        std::string what = e.is_object() ? e.value("message", "") : reply.payload;
        st.abort(static_cast<ErrorKind>(std::clamp(kind, 0, 4)),
                 "subdomain " + std::to_string(job.label) + ": " + what);
      } else {
        st.abort(ErrorKind::Worker, "unexpected message from " + ep.str());
      }
    }
    try {
      send_message(fd, {MessageKind::Bye, "{}"});
    } catch (const Error &) {
    }
    ::close(fd);
  };

  std::vector<std::thread> pool;
  for (int w = 0; w < nw; ++w) pool.emplace_back(body, w);
  for (auto &t : pool) t.join();
}

}  // namespace

ExecutionReport execute(const JobManifest &manifest, const ExecutionOptions &opt) {
  auto t0 = std::chrono::steady_clock::now();
  if (opt.plan == Plan::Cluster && opt.workers.empty()) fail("cluster plan needs at least one worker endpoint");
  RunState st;
  st.manifest = &manifest;
  st.opt = &opt;
  const std::size_t nj = manifest.jobs.size();
  st.results.resize(nj);
  st.failures.assign(nj, 0);
  for (const auto &j : manifest.jobs) st.digests.push_back(j.digest());
  if (!opt.run_dir.empty()) std::filesystem::create_directories(opt.run_dir / "submodels");

  ExecutionReport report;
  std::vector<int> pending;
  for (std::size_t j = 0; j < nj; ++j) {
    if (manifest.jobs[j].index != static_cast<int>(j)) fail("manifest jobs are out of order");
    if (!opt.run_dir.empty())
      if (auto r = load_checkpoint(opt.run_dir, manifest.jobs[j], st.digests[j])) {
        st.results[j] = std::move(*r);
        ++report.reused;
        st.log("reusing checkpoint for subdomain " + std::to_string(manifest.jobs[j].label));
        continue;
      }
    pending.push_back(static_cast<int>(j));
  }
  st.remaining = static_cast<int>(pending.size());

  if (!pending.empty()) {
    if (opt.plan == Plan::Cluster) run_cluster(st, pending);
    else run_local(st, pending);
  }
  if (st.aborted || st.remaining > 0) {
    int done = static_cast<int>(nj) - st.remaining;
    std::string why = st.abort_reason.empty() ? "run did not complete" : st.abort_reason;
    throw Error(st.abort_kind, why + " (" + std::to_string(done) + " of " + std::to_string(nj) +
                                   " submodels completed" + (opt.run_dir.empty() ? "" : ", kept in " + (opt.run_dir / "submodels").string()) + ")");
  }
  for (auto &r : st.results) report.results.push_back(std::move(*r));
  report.retries = st.retries;
  report.jobs_per_worker = st.dispatched;
  report.t_run = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Worker

void serve_worker(const WorkerOptions &opt) {
  Endpoint ep = parse_endpoint(opt.listen);
  int ls = ::socket(AF_INET, SOCK_STREAM, 0);
  if (ls < 0) throw Error(ErrorKind::Io, "socket: " + std::string(std::strerror(errno)));
  int one = 1;
  setsockopt(ls, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(ep.port));
  if (inet_pton(AF_INET, ep.host == "localhost" ? "127.0.0.1" : ep.host.c_str(), &addr.sin_addr) != 1) {
    ::close(ls);
    fail("worker listen address must be an IPv4 address: " + ep.host);
  }
  if (::bind(ls, reinterpret_cast<sockaddr *>(&addr), sizeof addr) != 0 || ::listen(ls, 8) != 0) {
    std::string err = std::strerror(errno);
    ::close(ls);
    throw Error(ErrorKind::Io, "cannot listen on " + opt.listen + ": " + err);
  }
  socklen_t len = sizeof addr;
  getsockname(ls, reinterpret_cast<sockaddr *>(&addr), &len);
  const int port = ntohs(addr.sin_port);
  if (opt.on_listening) opt.on_listening(port);
  auto log = [&](const std::string &s) {
    if (opt.log) opt.log(s);
  };

  int jobs_seen = 0;
  int served = 0;
  while (opt.max_connections < 0 || served < opt.max_connections) {
    int fd = ::accept(ls, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      break;
    }
    ++served;
    try {
      Message m;
      if (!recv_message(fd, m) || m.kind != MessageKind::Hello ||
          json::parse(m.payload, nullptr, false).value("protocol", "") != kProtocol) {
        send_message(fd, {MessageKind::Error, json{{"kind", 0}, {"message", "protocol mismatch"}}.dump()});
        ::close(fd);
        continue;
      }
      send_message(fd, {MessageKind::Hello, json{{"protocol", kProtocol}, {"pid", static_cast<int>(::getpid())}}.dump()});
      while (recv_message(fd, m)) {
        if (m.kind == MessageKind::Bye) break;
        if (m.kind != MessageKind::Job) {
          send_message(fd, {MessageKind::Error, json{{"kind", 0}, {"message", "expected JOB"}}.dump()});
          continue;
        }
        if (opt.fail_after >= 0 && jobs_seen >= opt.fail_after) {
          log("injected failure");
          if (opt.exit_on_failure) std::_Exit(17);
          ::close(fd);
          ::close(ls);
          return;
        }
        ++jobs_seen;
        try {
          Job job = job_from_json(json::parse(m.payload));
          log("fitting subdomain " + std::to_string(job.label));
          SubmodelResult r = run_job(job);
          send_message(fd, {MessageKind::Result, to_json(r).dump()});
        } catch (const Error &e) {
          if (e.kind() == ErrorKind::Worker) throw;
          send_message(fd, {MessageKind::Error,
                            json{{"kind", static_cast<int>(e.kind())}, {"message", e.what()}}.dump()});
        } catch (const std::exception &e) {
          send_message(fd, {MessageKind::Error, json{{"kind", 0}, {"message", e.what()}}.dump()});
        }
      }
    } catch (const std::exception &e) {
      log(std::string("connection dropped: ") + e.what());
    }
    ::close(fd);
  }
  ::close(ls);
}

}  // namespace dacmap
