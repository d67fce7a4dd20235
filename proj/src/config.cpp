#include "dacmap/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace dacmap {

using nlohmann::json;

namespace {

// Reads one JSON object, remembering its path and rejecting unknown keys.
class Section {
 public:
  Section(const json &j, std::string path, std::set<std::string> allowed) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_ + ": expected an object");
    for (const auto &[k, v] : j_.items())
      if (!allowed.count(k)) fail(path_ + "." + k + ": unknown key");
  }

  bool has(const std::string &k) const { return j_.contains(k); }
  std::string at(const std::string &k) const { return path_ + "." + k; }
  const json &raw(const std::string &k) const { return j_.at(k); }

  template <class T>
  void read(const std::string &k, T &out) const {
    if (!has(k)) return;
    const json &v = j_.at(k);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::invalid_argument("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("");
      }
      out = v.get<T>();
    } catch (const std::exception &) {
      fail(at(k) + ": wrong type");
    }
  }

  Section sub(const std::string &k, std::set<std::string> allowed) const {
    return Section(j_.at(k), at(k), std::move(allowed));
  }

 private:
  const json &j_;
  std::string path_;
};

template <class F>
auto checked(const std::string &path, F f) {
  try {
    return f();
  } catch (const Error &e) {
    fail(path + ": " + e.what());
  }
}

void read_engine(const Section &s, EngineOptions &e) {
  s.read("jitter", e.jitter);
  s.read("max_newton", e.max_newton);
  s.read("newton_tol", e.newton_tol);
  s.read("grid_points", e.grid_points);
  s.read("grid_step", e.grid_step);
  s.read("prune_drop", e.prune_drop);
  s.read("marginal_points", e.marginal_points);
  s.read("gh_nodes", e.gh_nodes);
  s.read("bfgs_max_iter", e.bfgs_max_iter);
  s.read("bfgs_tol", e.bfgs_tol);
  s.read("fd_step", e.fd_step);
  s.read("hessian_step", e.hessian_step);
  s.read("max_hyper_sd", e.max_hyper_sd);
  s.read("cpo_refit_ess", e.cpo_refit_ess);
}

const std::set<std::string> kEngineKeys = {"jitter",   "max_newton", "newton_tol",    "grid_points",
                                           "grid_step", "prune_drop", "marginal_points", "gh_nodes",
                                           "bfgs_max_iter", "bfgs_tol", "fd_step", "hessian_step",
                                           "max_hyper_sd", "cpo_refit_ess"};

void read_taus(const Section &s, GmrfTaus &t) {
  s.read("spatial", t.spatial);
  s.read("temporal", t.temporal);
  s.read("interaction", t.interaction);
}

Interaction read_interaction(const Section &s, const std::string &k, Interaction dflt) {
  if (!s.has(k)) return dflt;
  std::string v;
  s.read(k, v);
  return checked(s.at(k), [&] { return parse_interaction(v); });
}

}  // namespace

Config parse_config(const json &j) {
  Section root(j, "$", {"version", "seed", "data", "model", "plan", "merge", "engine", "output", "simulate", "benchmark"});
  Config c;
  if (!root.has("version")) fail("$.version: required");
  root.read("version", c.version);
  if (c.version != kConfigVersion) fail("$.version: unsupported version " + std::to_string(c.version));
  root.read("seed", c.spec.seed);

  if (root.has("data")) {
    auto s = root.sub("data", {"counts", "graph", "partition"});
    s.read("counts", c.data.counts);
    s.read("graph", c.data.graph);
    s.read("partition", c.data.partition);
  }
  if (root.has("model")) {
    auto s = root.sub("model", {"temporal", "interaction", "k", "hyperprior"});
    if (s.has("temporal")) {
      std::string t;
      s.read("temporal", t);
      if (t == "rw1") c.spec.prior.temporal_order = 1;
      else if (t == "rw2") c.spec.prior.temporal_order = 2;
      else fail(s.at("temporal") + ": expected rw1 or rw2");
    }
    c.spec.prior.interaction = read_interaction(s, "interaction", c.spec.prior.interaction);
    s.read("k", c.spec.k);
    if (s.has("hyperprior")) {
      auto h = s.sub("hyperprior", {"sd_prior", "pc_u", "pc_alpha", "intercept_precision"});
      if (h.has("sd_prior")) {
        std::string p;
        h.read("sd_prior", p);
        if (p == "uniform") c.spec.prior.hyper.sd_prior = SdPrior::Uniform;
        else if (p == "pc") c.spec.prior.hyper.sd_prior = SdPrior::PenalizedComplexity;
        else fail(h.at("sd_prior") + ": expected uniform or pc");
      }
      h.read("pc_u", c.spec.prior.hyper.pc_u);
      h.read("pc_alpha", c.spec.prior.hyper.pc_alpha);
      h.read("intercept_precision", c.spec.prior.hyper.intercept_precision);
    }
  }
  if (root.has("plan")) {
    auto s = root.sub("plan", {"kind", "jobs", "scheduling", "workers"});
    if (s.has("kind")) {
      std::string p;
      s.read("kind", p);
      c.spec.plan = checked(s.at("kind"), [&] { return parse_plan(p); });
    }
    s.read("jobs", c.spec.jobs);
    if (s.has("scheduling")) {
      std::string p;
      s.read("scheduling", p);
      if (p == "round_robin") c.spec.scheduling = Scheduling::RoundRobin;
      else if (p == "work_stealing") c.spec.scheduling = Scheduling::WorkStealing;
      else fail(s.at("scheduling") + ": expected round_robin or work_stealing");
    }
    if (s.has("workers")) {
      const json &w = s.raw("workers");
      if (!w.is_array()) fail(s.at("workers") + ": expected an array");
      for (std::size_t i = 0; i < w.size(); ++i) {
        std::string path = s.at("workers") + "[" + std::to_string(i) + "]";
        if (!w[i].is_string()) fail(path + ": wrong type");
        c.spec.workers.push_back(checked(path, [&] { return parse_endpoint(w[i].get<std::string>()); }));
      }
    }
  }
  if (root.has("merge")) {
    auto s = root.sub("merge", {"strategy", "points", "ic_samples"});
    if (s.has("strategy")) {
      std::string m;
      s.read("strategy", m);
      c.spec.merge = checked(s.at("strategy"), [&] { return parse_merge(m); });
    }
    s.read("points", c.spec.mixture_points);
    s.read("ic_samples", c.spec.ic_samples);
  }
  if (root.has("engine")) read_engine(root.sub("engine", kEngineKeys), c.spec.engine);
  if (root.has("output")) root.sub("output", {"dir"}).read("dir", c.out);
  if (root.has("simulate")) {
    auto s = root.sub("simulate", {"generator", "side", "blocks_per_side", "periods", "expected", "replicates",
                                   "shares", "total_sd", "taus", "interaction"});
    s.read("generator", c.simulate.generator);
    if (c.simulate.generator != "smooth" && c.simulate.generator != "gmrf")
      fail(s.at("generator") + ": expected smooth or gmrf");
    s.read("side", c.simulate.side);
    s.read("blocks_per_side", c.simulate.blocks_per_side);
    s.read("periods", c.simulate.periods);
    s.read("expected", c.simulate.expected);
    s.read("replicates", c.simulate.replicates);
    if (s.has("shares")) {
      auto sh = s.sub("shares", {"spatial", "temporal", "interaction"});
      sh.read("spatial", c.simulate.shares.spatial);
      sh.read("temporal", c.simulate.shares.temporal);
      sh.read("interaction", c.simulate.shares.interaction);
    }
    s.read("total_sd", c.simulate.total_sd);
    if (s.has("taus")) read_taus(s.sub("taus", {"spatial", "temporal", "interaction"}), c.simulate.taus);
    c.simulate.interaction = read_interaction(s, "interaction", c.simulate.interaction);
    if (c.simulate.replicates < 1) fail(s.at("replicates") + ": must be >= 1");
    if (!(c.simulate.expected > 0)) fail(s.at("expected") + ": must be positive");
  }
  if (root.has("benchmark")) {
    auto s = root.sub("benchmark", {"sizes", "periods", "blocks_per_side", "interaction", "k", "expected",
                                    "budget_seconds", "taus"});
    s.read("sizes", c.benchmark.sizes);
    s.read("periods", c.benchmark.periods);
    s.read("blocks_per_side", c.benchmark.blocks_per_side);
    c.benchmark.interaction = read_interaction(s, "interaction", c.benchmark.interaction);
    s.read("k", c.benchmark.k);
    s.read("expected", c.benchmark.expected);
    s.read("budget_seconds", c.benchmark.budget_seconds);
    if (s.has("taus")) read_taus(s.sub("taus", {"spatial", "temporal", "interaction"}), c.benchmark.taus);
    for (int n : c.benchmark.sizes) {
      int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
      if (side * side != n) fail(s.at("sizes") + ": " + std::to_string(n) + " is not a square number");
    }
  }
  checked("$", [&] {
    ModelSpec probe = c.spec;
    if (probe.workers.empty()) probe.plan = Plan::Sequential;  // endpoints may come from the environment
    probe.validate();
    return 0;
  });
  return c;
}

Config load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open config " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) fail(path + ": not valid JSON");
  return parse_config(j);
}

json to_json(const Config &c) {
  json workers = json::array();
  for (const auto &w : c.spec.workers) workers.push_back(w.str());
  const auto &e = c.spec.engine;
  return {
      {"version", c.version},
      {"seed", c.spec.seed},
      {"data", {{"counts", c.data.counts}, {"graph", c.data.graph}, {"partition", c.data.partition}}},
      {"model",
       {{"temporal", c.spec.prior.temporal_order == 1 ? "rw1" : "rw2"},
        {"interaction", to_string(c.spec.prior.interaction)},
        {"k", c.spec.k},
        {"hyperprior",
         {{"sd_prior", c.spec.prior.hyper.sd_prior == SdPrior::Uniform ? "uniform" : "pc"},
          {"pc_u", c.spec.prior.hyper.pc_u},
          {"pc_alpha", c.spec.prior.hyper.pc_alpha},
          {"intercept_precision", c.spec.prior.hyper.intercept_precision}}}}},
      {"plan",
       {{"kind", to_string(c.spec.plan)},
        {"jobs", c.spec.jobs},
        {"scheduling", c.spec.scheduling == Scheduling::RoundRobin ? "round_robin" : "work_stealing"},
        {"workers", workers}}},
      {"merge", {{"strategy", to_string(c.spec.merge)}, {"points", c.spec.mixture_points}, {"ic_samples", c.spec.ic_samples}}},
      {"engine",
       {{"jitter", e.jitter}, {"max_newton", e.max_newton}, {"newton_tol", e.newton_tol},
        {"grid_points", e.grid_points}, {"grid_step", e.grid_step}, {"prune_drop", e.prune_drop},
        {"marginal_points", e.marginal_points}, {"gh_nodes", e.gh_nodes}, {"bfgs_max_iter", e.bfgs_max_iter},
        {"bfgs_tol", e.bfgs_tol}, {"fd_step", e.fd_step}, {"hessian_step", e.hessian_step},
        {"max_hyper_sd", e.max_hyper_sd}, {"cpo_refit_ess", e.cpo_refit_ess}}},
      {"output", {{"dir", c.out}}},
  };
}

void apply_environment(Config &c) {
  if (const char *w = std::getenv("DACMAP_WORKERS"); w && *w) c.spec.workers = parse_endpoints(w);
}

}  // namespace dacmap
