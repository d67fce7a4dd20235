// Acceptance checks 1-10. Prints one PASS/FAIL line per criterion; exits
// non-zero when any criterion fails. Arguments select a subset, e.g. `3 7`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dacmap/config.hpp"
#include "dacmap/gmrf.hpp"
#include "dacmap/inla.hpp"
#include "dacmap/lgm.hpp"
#include "dacmap/merge.hpp"
#include "dacmap/metrics.hpp"
#include "dacmap/pipeline.hpp"
#include "dacmap/runner.hpp"
#include "dacmap/simulate.hpp"
#include "oracle.hpp"
#include "process.hpp"

namespace fs = std::filesystem;
using namespace dacmap;

namespace {

// Pinned tolerances.
constexpr double kStructureTol = 1e-8;
constexpr double kEtaMeanTol = 0.02;      // absolute, log-risk scale
constexpr double kEtaSdRelTol = 0.05;
constexpr double kCpoRelTol = 0.05;
constexpr double kConsistencyTol = 0.05;  // risk scale
constexpr double kConsistencyShare = 0.95;
constexpr double kIcSigmas = 3.0;
constexpr double kFprMax = 0.02;
constexpr double kMetricTol = 1e-12;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Random graph with `components` connected pieces: spanning trees plus extra edges.
AreaGraph random_graph(int n, int components, double extra, std::mt19937_64 &rng) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("n" + std::to_string(i + 1));
  std::vector<Edge> edges;
  std::set<Edge> seen;
  auto add = [&](Index a, Index b) {
    if (a == b) return;
    Edge e{std::min(a, b), std::max(a, b)};
    if (seen.insert(e).second) edges.push_back(e);
  };
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int c = 0; c < components; ++c) {
    const int lo = n * c / components, hi = n * (c + 1) / components;
    for (int i = lo + 1; i < hi; ++i) add(i, lo + static_cast<int>(u(rng) * (i - lo)));
    for (int i = lo; i < hi; ++i)
      for (int j = i + 2; j < hi; ++j)
        if (u(rng) < extra) add(i, j);
  }
  return AreaGraph(ids, edges);
}

// ---------------------------------------------------------------------------
Outcome criterion1() {
  std::mt19937_64 rng(101);
  int checks = 0;
  std::string bad;
  // CAR structure and kernels.
  std::vector<AreaGraph> graphs;
  for (int n : {2, 3, 5, 8, 13, 20})
    for (int comps : {1, 2, 3})
      if (comps == 1 || n >= 2 * comps) graphs.push_back(random_graph(n, comps, 0.3, rng));
  graphs.push_back(grid_template(6, 2));
  for (const auto &g : graphs) {
    StructureMatrix s = spatial_structure(g);
    Matrix oracle = oracle::dense_laplacian(g);
    int comps = 0;
    g.components(&comps);
    ++checks;
    if (Matrix(s.entries) != oracle) bad += " car-entries(n=" + std::to_string(g.size()) + ")";
    if (s.rank_deficiency != comps || oracle::symmetric_rank(oracle) != g.size() - comps)
      bad += " car-kernel(n=" + std::to_string(g.size()) + ")";
    if ((oracle * s.null_basis).cwiseAbs().maxCoeff() > kStructureTol || oracle::qr_rank(s.null_basis) != comps)
      bad += " car-basis(n=" + std::to_string(g.size()) + ")";
  }
  // RW1 / RW2.
  for (int order : {1, 2})
    for (Index tt = order + 1; tt <= 25; ++tt) {
      StructureMatrix r = rw_structure(tt, order);
      Matrix oracle = oracle::dense_rw(tt, order);
      ++checks;
      if (Matrix(r.entries) != oracle) bad += " rw" + std::to_string(order) + "-entries(T=" + std::to_string(tt) + ")";
      if (r.rank_deficiency != order || oracle::symmetric_rank(oracle) != tt - order)
        bad += " rw" + std::to_string(order) + "-kernel(T=" + std::to_string(tt) + ")";
    }
  // Kronecker structures and ranks for nT <= 400.
  int kron_checks = 0;
  for (const auto &g : graphs) {
    StructureMatrix s = spatial_structure(g);
    const Matrix rs = Matrix(s.entries);
    const Index rank_s = oracle::symmetric_rank(rs);
    for (Index tt : {2, 3, 5, 10, 20}) {
      if (g.size() * tt > 400) continue;
      for (int order : {1, 2}) {
        if (tt <= order) continue;
        StructureMatrix t = rw_structure(tt, order);
        const Matrix rt = Matrix(t.entries);
        const Index rank_t = oracle::symmetric_rank(rt);
        for (Interaction type : {Interaction::II, Interaction::III, Interaction::IV}) {
          StructureMatrix d = interaction_structure(s, t, type);
          Matrix a = type == Interaction::III ? Matrix(Matrix::Identity(tt, tt)) : rt;
          Matrix b = type == Interaction::II ? Matrix(Matrix::Identity(g.size(), g.size())) : rs;
          Index ra = type == Interaction::III ? tt : rank_t;
          Index rb = type == Interaction::II ? g.size() : rank_s;
          Matrix k = oracle::kron(a, b);
          ++kron_checks;
          const std::string tag = "(" + to_string(type) + ",n=" + std::to_string(g.size()) + ",T=" + std::to_string(tt) +
                                  ",rw" + std::to_string(order) + ")";
          if (Matrix(d.entries) != k) bad += " kron-entries" + tag;
          Index rk = oracle::symmetric_rank(k);
          if (rk != ra * rb || d.rank_deficiency != g.size() * tt - rk) bad += " kron-rank" + tag;
        }
      }
    }
  }
  return {bad.empty(), std::to_string(checks) + " CAR/RW structures, " + std::to_string(kron_checks) +
                           " Kronecker structures checked" + (bad.empty() ? "" : ";" + bad)};
}

// ---------------------------------------------------------------------------
Outcome criterion2() {
  std::string bad;
  int cases = 0;
  for (Index n = 2; n <= 6; ++n)
    for (Index tt = 2; tt <= 6; ++tt)
      for (Interaction type : {Interaction::I, Interaction::II, Interaction::III, Interaction::IV}) {
        Index expect = 0;
        switch (type) {
          case Interaction::I: expect = 3; break;
          case Interaction::II: expect = n + 2; break;
          case Interaction::III: expect = tt + 2; break;
          case Interaction::IV: expect = n + tt + 1; break;
        }
        ConstraintSet cs = constraints_for(type, n, tt);
        Index all_rank = oracle::qr_rank(Matrix(cs.rows));
        Index kept_rank = oracle::qr_rank(Matrix(cs.retained()));
        ++cases;
        if (cs.retained_count() != expect || all_rank != expect || kept_rank != expect)
          bad += " " + to_string(type) + "(n=" + std::to_string(n) + ",T=" + std::to_string(tt) + "): kept " +
                 std::to_string(cs.retained_count()) + ", rank " + std::to_string(all_rank) + ", expected " +
                 std::to_string(expect);
      }
  return {bad.empty(), std::to_string(cases) + " (type, n, T) cases" + (bad.empty() ? "" : ";" + bad)};
}

// ---------------------------------------------------------------------------
Outcome criterion3() {
  std::mt19937_64 rng(303);
  const int instances = 20;
  double worst_mean = 0.0, worst_sd = 0.0, worst_cpo = 0.0;
  int cpo_count = 0, eta_fail = 0, cpo_fail = 0, eta_count = 0;
  std::string bad;
  auto note = [&](const std::string &s) {
    if (eta_fail + cpo_fail <= 6) bad += s;
  };
  const std::vector<std::pair<int, int>> shapes = {{3, 2}, {3, 3}, {4, 2}, {3, 4}, {4, 3}, {5, 2}, {4, 4}, {5, 3}};
  for (int inst = 0; inst < instances; ++inst) {
    auto [n, tt] = shapes[static_cast<std::size_t>(inst) % shapes.size()];
    const auto type = static_cast<Interaction>(1 + inst % 4);
    AreaGraph g = random_graph(n, 1, 0.4, rng);
    CountData d;
    d.area_ids = g.ids();
    d.times = default_times(tt);
    d.observed.resize(n * tt);
    d.expected.resize(n * tt);
    d.structural_zero.assign(static_cast<std::size_t>(n * tt), false);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ue(15.0, 40.0);
    Vector area(n), time(tt);
    for (auto &v : area) v = 0.3 * nd(rng);
    for (auto &v : time) v = 0.15 * nd(rng);
    for (Index t = 0; t < tt; ++t)
      for (Index i = 0; i < n; ++i) {
        const double e = ue(rng);
        std::poisson_distribution<long> pd(e * std::exp(area[i] + time[t] + 0.1 * nd(rng)));
        d.expected[t * n + i] = e;
        d.observed[t * n + i] = static_cast<double>(pd(rng));
      }
    PriorSpec ps;
    ps.interaction = type;
    SpaceTimeModel st = build_model(g, d, ps);
    EngineOptions opt;
    FitResult fr = fit(st.model, opt);

    oracle::OneBlockSampler sampler(st.model, 9000 + static_cast<std::uint64_t>(inst));
    const Matrix cov = 0.5 * fr.grid.axes * fr.grid.axes.transpose();
    oracle::McmcSummary mc = sampler.run(fr.grid.mode, cov, 5000, 150000);

    const Index nobs = st.model.num_observations();
    for (Index r = 0; r < nobs; ++r) {
      const auto &em = fr.eta[static_cast<std::size_t>(r)];
      double dm = std::abs(em.mean - mc.eta_mean[r]);
      double ds = std::abs(em.sd - mc.eta_sd[r]) / mc.eta_sd[r];
      worst_mean = std::max(worst_mean, dm);
      worst_sd = std::max(worst_sd, ds);
      ++eta_count;
      if (dm > kEtaMeanTol || ds > kEtaSdRelTol) {
        ++eta_fail;
        note(" inst" + std::to_string(inst) + "/obs" + std::to_string(r) + "(mean " + fmt(em.mean) + " vs " +
               fmt(mc.eta_mean[r]) + ", sd " + fmt(em.sd) + " vs " + fmt(mc.eta_sd[r]) + ")");
      }
    }
    // CPO against held-out refits; every other instance keeps the runtime bounded.
    if (inst % 2 == 0)
      for (Index r = 0; r < nobs; ++r) {
        double ref = oracle::loo_cpo(st.model, r, opt);
        double rel = std::abs(fr.cpo[r] - ref) / ref;
        worst_cpo = std::max(worst_cpo, rel);
        ++cpo_count;
        if (rel > kCpoRelTol) {
          ++cpo_fail;
          note(" cpo inst" + std::to_string(inst) + "/obs" + std::to_string(r) + "(" + fmt(fr.cpo[r]) + " vs " +
               fmt(ref) + ")");
        }
      }
  }
  return {bad.empty(), std::to_string(instances) + " instances; max |mean diff| " + fmt(worst_mean) +
                           ", max sd rel diff " + fmt(worst_sd) + ", max CPO rel diff " + fmt(worst_cpo) + "; " +
                           std::to_string(eta_fail) + "/" + std::to_string(eta_count) + " eta and " +
                           std::to_string(cpo_fail) + "/" + std::to_string(cpo_count) + " CPO out of tolerance" +
                           (bad.empty() ? "" : "; first:" + bad)};
}

// ---------------------------------------------------------------------------
Outcome criterion4() {
  AreaGraph g = grid_template(10, 2);
  auto times = default_times(5);
  const Index cells = g.size() * 5;
  CountData data = sample_counts(g, times, Vector::Ones(cells), Vector::Constant(cells, 50.0), 404);
  ModelSpec spec;
  spec.prior.interaction = Interaction::IV;
  FitOutcome global = run_fit(single_domain(g), data, spec);
  spec.k = 1;
  std::string detail;
  bool pass = true;
  for (MergeStrategy ms : {MergeStrategy::Original, MergeStrategy::Mixture}) {
    spec.merge = ms;
    FitOutcome part = run_fit(g, data, spec);
    Index ok = 0;
    double worst = 0.0;
    for (Index c = 0; c < cells; ++c) {
      double diff = std::abs(part.merged.risk[static_cast<std::size_t>(c)].q50 - global.merged.risk[static_cast<std::size_t>(c)].q50);
      worst = std::max(worst, diff);
      ok += diff <= kConsistencyTol;
    }
    double share = static_cast<double>(ok) / static_cast<double>(cells);
    pass = pass && share >= kConsistencyShare;
    detail += (detail.empty() ? "" : "; ") + to_string(ms) + ": " + fmt(100.0 * share, 5) + "% of cells within " +
              fmt(kConsistencyTol) + " (max diff " + fmt(worst) + ")";
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// Desk-scale simulation study shared by criteria 5 and 6.
struct ClassRow {
  std::string model;
  Interaction type;
  EvalReport eval;
  double t_run = 0.0;
  double t_merge = 0.0;
  bool partitioned = false;
};

struct DeskStudy {
  bool done = false;
  std::vector<ClassRow> rows;
  double seconds = 0.0;
};

ReplicateFit to_fit(const MergedResult &m) {
  const Index cells = static_cast<Index>(m.risk.size());
  ReplicateFit f;
  f.median.resize(cells);
  f.q025.resize(cells);
  f.q975.resize(cells);
  for (Index c = 0; c < cells; ++c) {
    const auto &r = m.risk[static_cast<std::size_t>(c)];
    f.median[c] = r.q50;
    f.q025[c] = r.q025;
    f.q975[c] = r.q975;
  }
  f.prob_gt1 = m.prob_gt1;
  f.prob_lt1 = m.prob_lt1;
  return f;
}

DeskStudy &desk_study() {
  static DeskStudy study;
  if (study.done) return study;
  const auto t0 = std::chrono::steady_clock::now();
  SimulateConfig sc;  // 16x16 grid, T = 10, D = 4, L = 10, smooth surface
  const std::uint64_t seed = 2024;
  SimulatedDataset ds = simulate_dataset(sc, seed);
  const AreaGraph &g = ds.graph;

  struct Acc {
    std::vector<ReplicateFit> fits;
    double t_run = 0.0, t_merge = 0.0;
  };
  std::map<std::pair<std::string, int>, Acc> acc;
  std::vector<std::string> order;
  auto record = [&](const std::string &model, Interaction type, const MergedResult &m, double t_run) {
    auto &a = acc[{model, static_cast<int>(type)}];
    if (a.fits.empty() && type == Interaction::I) order.push_back(model);
    a.fits.push_back(to_fit(m));
    a.t_run += t_run;
    a.t_merge += m.t_merge;
  };

  for (std::size_t l = 0; l < ds.replicates.size(); ++l) {
    const CountData data = ds.replicates[l].aligned_to(g);
    for (Interaction type : {Interaction::I, Interaction::II, Interaction::III, Interaction::IV}) {
      ModelSpec spec;
      spec.seed = derive_seed(seed, "replicate:" + std::to_string(l + 1));
      spec.prior.interaction = type;
      spec.engine.grid_points = 3;
      for (int k : {-1, 0, 1, 2}) {
        ModelSpec s = spec;
        s.k = std::max(k, 0);
        const AreaGraph part = k < 0 ? single_domain(g) : g;
        JobManifest man = plan_jobs(part, data, s);
        ExecutionReport rep = execute(man, ExecutionOptions{});
        if (k < 0) {
          record("Global", type, merge_results(rep.results, man, data, MergeStrategy::Original, s.mixture_points,
                                               s.ic_samples, s.seed),
                 rep.t_run);
        } else if (k == 0) {
          record("Disjoint", type, merge_results(rep.results, man, data, MergeStrategy::Original, s.mixture_points,
                                                 s.ic_samples, s.seed),
                 rep.t_run);
        } else {
          const std::string name = k == 1 ? "1st order" : "2nd order";
          for (MergeStrategy ms : {MergeStrategy::Mixture, MergeStrategy::Original})
            record(name + " " + to_string(ms), type,
                   merge_results(rep.results, man, data, ms, s.mixture_points, s.ic_samples, s.seed), rep.t_run);
        }
      }
    }
    std::cerr << "  desk study: replicate " << (l + 1) << "/" << ds.replicates.size() << " done after "
              << fmt(seconds_since(t0), 5) << " s\n";
  }

  std::ofstream csv("desk_study.csv");
  csv << "model,interaction,marb,mrrmse,is,tpr_0.8,fpr_0.8,t_run,t_merge\n";
  for (const auto &model : order)
    for (Interaction type : {Interaction::I, Interaction::II, Interaction::III, Interaction::IV}) {
      auto &a = acc[{model, static_cast<int>(type)}];
      ClassRow row{model, type, evaluate(ds.truth, a.fits, g.size()), a.t_run / a.fits.size(),
                   a.t_merge / a.fits.size(), model != "Global"};
      const auto &r8 = row.eval.rates[0];
      csv << model << ',' << to_string(type) << ',' << row.eval.accuracy.marb_mean << ','
          << row.eval.accuracy.mrrmse_mean << ',' << row.eval.interval_score << ',' << r8.tpr << ',' << r8.fpr << ','
          << row.t_run << ',' << row.t_merge << '\n';
      std::cerr << "  " << std::left << std::setw(20) << model << std::setw(5) << to_string(type) << " MARB "
                << fmt(row.eval.accuracy.marb_mean) << "  MRRMSE " << fmt(row.eval.accuracy.mrrmse_mean) << "  IS "
                << fmt(row.eval.interval_score) << "  TPR " << fmt(r8.tpr) << "  FPR " << fmt(r8.fpr) << "  T.run "
                << fmt(row.t_run) << "  T.merge " << fmt(row.t_merge) << '\n';
      study.rows.push_back(std::move(row));
    }
  study.seconds = seconds_since(t0);
  study.done = true;
  return study;
}

Outcome criterion5() {
  DeskStudy &s = desk_study();
  std::string bad;
  // (a) Type IV best within each class.
  std::map<std::string, std::vector<const ClassRow *>> classes;
  for (const auto &r : s.rows) classes[r.model].push_back(&r);
  for (const auto &[model, rows] : classes) {
    const ClassRow *iv = nullptr;
    for (auto *r : rows)
      if (r->type == Interaction::IV) iv = r;
    for (auto *r : rows) {
      if (r == iv) continue;
      if (!(iv->eval.accuracy.marb_mean < r->eval.accuracy.marb_mean)) bad += " (a) MARB " + model + " IV vs " + to_string(r->type);
      if (!(iv->eval.accuracy.mrrmse_mean < r->eval.accuracy.mrrmse_mean))
        bad += " (a) MRRMSE " + model + " IV vs " + to_string(r->type);
    }
  }
  // (b) partitioned IS <= Global Type I IS.
  double global_i = 0.0;
  for (const auto &r : s.rows)
    if (r.model == "Global" && r.type == Interaction::I) global_i = r.eval.interval_score;
  double worst_part = 0.0;
  for (const auto &r : s.rows)
    if (r.partitioned) {
      worst_part = std::max(worst_part, r.eval.interval_score);
      if (!(r.eval.interval_score <= global_i)) bad += " (b) IS " + r.model + " " + to_string(r.type);
    }
  // (c) original T.merge < mixture T.merge, per order and type.
  for (const std::string order : {"1st order", "2nd order"})
    for (Interaction type : {Interaction::I, Interaction::II, Interaction::III, Interaction::IV}) {
      double mix = 0.0, orig = 0.0;
      for (const auto &r : s.rows) {
        if (r.type != type) continue;
        if (r.model == order + " mixture") mix = r.t_merge;
        if (r.model == order + " original") orig = r.t_merge;
      }
      if (!(orig < mix)) bad += " (c) T.merge " + order + " " + to_string(type);
    }
  const bool runtime_ok = s.seconds < 3600.0;
  if (!runtime_ok) bad += " runtime " + fmt(s.seconds, 5) + " s";
  return {bad.empty(), std::to_string(classes.size()) + " model classes x 4 interactions; Global Type I IS " +
                           fmt(global_i) + ", worst partitioned IS " + fmt(worst_part) + "; study took " +
                           fmt(s.seconds, 5) + " s" + (bad.empty() ? "" : ";" + bad)};
}

Outcome criterion6() {
  DeskStudy &s = desk_study();
  double global_tpr = 0.0;
  for (const auto &r : s.rows)
    if (r.model == "Global" && r.type == Interaction::I) global_tpr = r.eval.rates[0].tpr;
  std::string bad;
  double min_tpr = 1.0, max_fpr = 0.0;
  for (const auto &r : s.rows) {
    if (!r.partitioned || r.type != Interaction::IV) continue;
    const auto &c = r.eval.rates[0];
    min_tpr = std::min(min_tpr, c.tpr);
    max_fpr = std::max(max_fpr, c.fpr);
    if (!(c.tpr >= global_tpr)) bad += " TPR " + r.model;
    if (!(c.fpr <= kFprMax)) bad += " FPR " + r.model;
  }
  return {bad.empty(), "p0 = 0.8: Global Type I TPR " + fmt(global_tpr) + "; partitioned Type IV min TPR " +
                           fmt(min_tpr) + ", max FPR " + fmt(max_fpr) + (bad.empty() ? "" : ";" + bad)};
}

// ---------------------------------------------------------------------------
Outcome criterion7() {
  // 20-unit model: 5 x 2 rook grid, T = 2.
  std::vector<std::string> ids;
  std::vector<Edge> edges;
  for (int i = 0; i < 10; ++i) ids.push_back("u" + std::to_string(i + 1));
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 5; ++c) {
      int v = r * 5 + c;
      if (c + 1 < 5) edges.emplace_back(v, v + 1);
      if (r + 1 < 2) edges.emplace_back(v, v + 5);
    }
  AreaGraph g(ids, edges);
  auto times = default_times(2);
  std::mt19937_64 rng(707);
  std::normal_distribution<double> nd;
  Vector risk(20);
  for (auto &v : risk) v = std::exp(0.3 * nd(rng));
  CountData data = sample_counts(g, times, risk, Vector::Constant(20, 20.0), 708);
  PriorSpec ps;
  ps.interaction = Interaction::IV;
  SpaceTimeModel st = build_model(g, data, ps);
  FitResult fr = fit(st.model);

  const std::uint64_t seed = derive_seed(1234, "information-criteria");
  InformationCriteria ref = approximate_ic(fr.eta, data, 1000000, derive_seed(seed, "reference"));
  InformationCriteria run = approximate_ic(fr.eta, data, 1000, seed);
  const int reps = 50;
  double sd_dic = 0.0, sd_waic = 0.0, m_dic = 0.0, m_waic = 0.0;
  std::vector<double> dics, waics;
  for (int k = 0; k < reps; ++k) {
    InformationCriteria ic = approximate_ic(fr.eta, data, 1000, derive_seed(seed, static_cast<std::uint64_t>(k + 1)));
    dics.push_back(ic.dic);
    waics.push_back(ic.waic);
    m_dic += ic.dic / reps;
    m_waic += ic.waic / reps;
  }
  for (int k = 0; k < reps; ++k) {
    sd_dic += (dics[static_cast<std::size_t>(k)] - m_dic) * (dics[static_cast<std::size_t>(k)] - m_dic) / (reps - 1);
    sd_waic += (waics[static_cast<std::size_t>(k)] - m_waic) * (waics[static_cast<std::size_t>(k)] - m_waic) / (reps - 1);
  }
  sd_dic = std::sqrt(sd_dic);
  sd_waic = std::sqrt(sd_waic);
  const bool dic_ok = std::abs(run.dic - ref.dic) <= kIcSigmas * sd_dic;
  const bool waic_ok = std::abs(run.waic - ref.waic) <= kIcSigmas * sd_waic;

  // Point-mass marginals.
  std::vector<LatentMarginal> point(20);
  for (Index c = 0; c < 20; ++c) {
    auto &m = point[static_cast<std::size_t>(c)];
    const double v = std::log((data.observed[c] + 0.5) / data.expected[c]);
    m.x = Vector::Constant(2, v);
    m.density = Vector::Ones(2);
    m.mean = m.q025 = m.q50 = m.q975 = v;
    m.sd = 0.0;
  }
  InformationCriteria deg = approximate_ic(point, data, 1000, seed);
  const bool deg_ok = deg.p_d == 0.0 && deg.p_waic == 0.0;
  return {dic_ok && waic_ok && deg_ok,
          "DIC " + fmt(run.dic, 7) + " vs reference " + fmt(ref.dic, 7) + " (MC sd " + fmt(sd_dic) + ", replicate mean " + fmt(m_dic, 7) + "), WAIC " +
              fmt(run.waic, 7) + " vs " + fmt(ref.waic, 7) + " (MC sd " + fmt(sd_waic) + ", replicate mean " + fmt(m_waic, 7) + "); point-mass p_D " +
              fmt(deg.p_d) + ", p_WAIC " + fmt(deg.p_waic)};
}

// ---------------------------------------------------------------------------
Outcome criterion8() {
  BenchmarkConfig cfg;
  cfg.sizes = {256, 1024};
  cfg.periods = 10;
  cfg.blocks_per_side = 4;
  cfg.interaction = Interaction::IV;
  cfg.k = 1;
  cfg.budget_seconds = 900.0;
  ModelSpec base;
  base.seed = 808;
  base.engine.grid_points = 3;
  auto rows = run_benchmark(cfg, base, [](const std::string &s) { std::cerr << "  benchmark: " << s << '\n'; });
  {
    std::ofstream out("benchmark.csv");
    write_benchmark_csv(out, rows);
  }
  std::map<std::pair<std::string, Index>, const BenchmarkRow *> by;
  for (const auto &r : rows) by[{r.model, r.n}] = &r;
  const double g256 = by[{"Global", 256}]->t_run, p256 = by[{"Partitioned", 256}]->t_run;
  const double g1024 = by[{"Global", 1024}]->t_run, p1024 = by[{"Partitioned", 1024}]->t_run;
  const double ratio256 = g256 / p256, ratio1024 = g1024 / p1024;
  const bool dnf256 = by[{"Global", 256}]->dnf, dnf1024 = by[{"Global", 1024}]->dnf;
  // A DNF Global time is a lower bound, so the ratio comparison stays valid
  // when only the larger size runs out of budget.
  const bool pass = !dnf256 && g1024 / g256 > p1024 / p256 && ratio1024 > ratio256 && p256 < g256;
  return {pass, "Global " + fmt(g256) + " s -> " + fmt(g1024) + (dnf1024 ? " s (DNF, budget)" : " s") +
                    ", partitioned " + fmt(p256) + " s -> " + fmt(p1024) + " s; ratio " + fmt(ratio256) + " at n=256, " +
                    fmt(ratio1024) + (dnf1024 ? "+" : "") + " at n=1024"};
}

// ---------------------------------------------------------------------------
std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome criterion9() {
  const std::string cli = DACMAP_CLI;
  const fs::path dir = fs::temp_directory_path() / ("dacmap_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto cleanup = [&] { fs::remove_all(dir); };
  std::string out;
  if (testing::run_quiet({cli, "simulate", "--side", "8", "--blocks", "2", "--periods", "4", "--replicates", "1",
                          "--seed", "9", "--out", (dir / "data").string()}) != 0)
    return {false, "simulate failed"};
  {
    nlohmann::json cfg = {{"version", 1},
                          {"seed", 99},
                          {"data",
                           {{"counts", (dir / "data" / "counts_1.csv").string()},
                            {"graph", (dir / "data" / "graph.tsv").string()},
                            {"partition", (dir / "data" / "partition.csv").string()}}},
                          {"model", {{"interaction", "IV"}, {"k", 1}}},
                          {"merge", {{"strategy", "mixture"}}},
                          {"engine", {{"grid_points", 3}}}};
    std::ofstream(dir / "config.json") << cfg.dump(1);
  }
  const std::string config = (dir / "config.json").string();
  auto fit = [&](const std::string &name, std::vector<std::string> extra) {
    std::vector<std::string> argv = {cli, "fit", "--config", config, "--out", (dir / name).string()};
    argv.insert(argv.end(), extra.begin(), extra.end());
    return testing::run_quiet(argv);
  };
  std::string bad;
  if (fit("seq", {"--plan", "sequential"}) != 0) bad += " sequential run failed;";
  if (fit("par", {"--plan", "parallel", "--jobs", "4"}) != 0) bad += " parallel run failed;";
  {
    testing::Child w1({cli, "worker", "--listen", "127.0.0.1:0"});
    testing::Child w2({cli, "worker", "--listen", "127.0.0.1:0"});
    std::string e1 = testing::start_worker(w1), e2 = testing::start_worker(w2);
    if (e1.empty() || e2.empty() || fit("cluster", {"--plan", "cluster", "--workers", e1 + "," + e2}) != 0)
      bad += " cluster run failed;";
  }
  int retries = -1;
  int dead_status = -1;
  {
    // The first worker dies abruptly when handed its second job.
    testing::Child w1({cli, "worker", "--listen", "127.0.0.1:0", "--fail-after", "1"});
    testing::Child w2({cli, "worker", "--listen", "127.0.0.1:0"});
    std::string e1 = testing::start_worker(w1), e2 = testing::start_worker(w2);
    if (e1.empty() || e2.empty() || fit("killed", {"--plan", "cluster", "--workers", e1 + "," + e2}) != 0)
      bad += " run with a killed worker failed;";
    dead_status = w1.wait();
    std::string log = slurp(dir / "killed" / "log.txt");
    auto pos = log.find(" retries");
    if (pos != std::string::npos) {
      auto open = log.rfind('(', pos);
      retries = std::stoi(log.substr(open + 1, pos - open - 1));
    }
  }
  const std::string seq = slurp(dir / "seq" / "merged.csv");
  const bool par_same = !seq.empty() && seq == slurp(dir / "par" / "merged.csv");
  const bool clu_same = !seq.empty() && seq == slurp(dir / "cluster" / "merged.csv");
  const bool kill_same = !seq.empty() && seq == slurp(dir / "killed" / "merged.csv");
  if (!par_same) bad += " parallel merged.csv differs;";
  if (!clu_same) bad += " cluster merged.csv differs;";
  if (!kill_same) bad += " merged.csv after the retry differs;";
  if (retries != 1) bad += " expected one retry, saw " + std::to_string(retries) + ";";
  cleanup();
  return {bad.empty(), "merged.csv (" + std::to_string(seq.size()) + " bytes) identical across sequential, parallel (4), "
                       "2-worker cluster and killed-worker runs: " +
                           std::string(par_same && clu_same && kill_same ? "yes" : "no") + "; retries " +
                           std::to_string(retries) + ", killed worker exit status " + std::to_string(dead_status) +
                           (bad.empty() ? "" : ";" + bad)};
}

// ---------------------------------------------------------------------------
Outcome criterion10() {
  std::string bad;
  auto close = [&](double got, double want, const std::string &what) {
    if (!(std::abs(got - want) <= kMetricTol)) bad += " " + what + "=" + fmt(got, 17);
  };
  close(interval_score(1.0, 0.8, 1.1), 0.3, "IS(1.0)");
  close(interval_score(1.2, 0.8, 1.1), 4.3, "IS(1.2)");
  close(interval_score(0.7, 0.8, 1.1), 4.3, "IS(0.7)");

  // Two areas, two periods, time-major cells.
  const Vector truth = (Vector(4) << 1.0, 2.0, 0.5, 4.0).finished();
  auto m0 = marb_mrrmse(truth, {truth, truth}, 2);
  close(m0.marb_mean, 0.0, "MARB(exact)");
  close(m0.mrrmse_mean, 0.0, "MRRMSE(exact)");
  auto m1 = marb_mrrmse(truth, {Vector(1.1 * truth)}, 2);
  close(m1.marb_mean, 0.1, "MARB(+10%)");
  close(m1.mrrmse_mean, 0.1, "MRRMSE(+10%)");
  auto m2 = marb_mrrmse(truth, {Vector(1.1 * truth), Vector(0.9 * truth)}, 2);
  close(m2.marb_mean, 0.0, "MARB(+-10%)");
  close(m2.mrrmse_mean, 0.1, "MRRMSE(+-10%)");

  // Hand-enumerated table: high, high, low, low, exactly one, low.
  const Vector t = (Vector(6) << 1.5, 1.2, 0.8, 0.7, 1.0, 0.9).finished();
  const Vector gt = (Vector(6) << 0.95, 0.10, 0.85, 0.05, 0.90, 0.10).finished();
  const Vector lt = (Vector(6) << 0.05, 0.90, 0.15, 0.95, 0.10, 0.90).finished();
  struct Want {
    double p0, tpr, tnr, fpr, fnr;
  };
  for (const Want &w : {Want{0.8, 1.0 / 2, 2.0 / 3, 1.0 / 3, 1.0 / 2}, Want{0.9, 1.0 / 2, 1.0 / 3, 0.0, 0.0},
                        Want{0.95, 0.0, 0.0, 0.0, 0.0}}) {
    auto c = classification_rates(t, gt, lt, w.p0);
    const std::string p = "@" + fmt(w.p0);
    if (c.tpr != w.tpr) bad += " TPR" + p;
    if (c.tnr != w.tnr) bad += " TNR" + p;
    if (c.fpr != w.fpr) bad += " FPR" + p;
    if (c.fnr != w.fnr) bad += " FNR" + p;
    if (c.high != 2 || c.low != 3 || c.excluded != 1) bad += " counts" + p;
  }
  return {bad.empty(), "IS spot values, MARB/MRRMSE cases and a 6-unit classification table at 3 thresholds" +
                           (bad.empty() ? std::string() : ";" + bad)};
}

}  // namespace

int main(int argc, char **argv) {
  const std::vector<std::pair<int, std::function<Outcome()>>> all = {
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
      {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10}};
  std::set<int> want;
  for (int i = 1; i < argc; ++i) want.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto &[id, run] : all) {
    if (!want.empty() && !want.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " [" << fmt(seconds_since(t0), 4)
              << " s] " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
