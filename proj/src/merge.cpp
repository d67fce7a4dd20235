#include "dacmap/merge.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <random>

#include <nlohmann/json.hpp>

#include "dacmap/csv.hpp"
#include "dacmap/stats.hpp"

namespace dacmap {

namespace {

double trapezoid(const Vector &x, const Vector &f) {
  double s = 0.0;
  for (Index i = 1; i < x.size(); ++i) s += 0.5 * (f[i] + f[i - 1]) * (x[i] - x[i - 1]);
  return s;
}

bool degenerate(const LatentMarginal &m) { return m.sd == 0.0 || m.x[0] == m.x[m.x.size() - 1]; }

// Fritsch-Carlson monotone cubic interpolant of (x, y); zero outside [x0, xn].
class Pchip {
 public:
  Pchip(const Vector &x, const Vector &y) : x_(x), y_(y), d_(x.size()) {
    const Index n = x.size();
    Vector h(n - 1), delta(n - 1);
    for (Index i = 0; i + 1 < n; ++i) {
      h[i] = x[i + 1] - x[i];
      delta[i] = (y[i + 1] - y[i]) / h[i];
    }
    if (n == 2) {
      d_.setConstant(delta[0]);
      return;
    }
    for (Index i = 1; i + 1 < n; ++i) {
      if (delta[i - 1] * delta[i] <= 0) {
        d_[i] = 0.0;
      } else {
        double w1 = 2 * h[i] + h[i - 1], w2 = h[i] + 2 * h[i - 1];
        d_[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
      }
    }
    d_[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d_[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
  }

  double operator()(double v) const {
    const Index n = x_.size();
    if (v < x_[0] || v > x_[n - 1]) return 0.0;
    Index i = std::upper_bound(x_.data(), x_.data() + n, v) - x_.data() - 1;
    i = std::clamp<Index>(i, 0, n - 2);
    double h = x_[i + 1] - x_[i];
    double t = (v - x_[i]) / h;
    double t2 = t * t, t3 = t2 * t;
    return (2 * t3 - 3 * t2 + 1) * y_[i] + (t3 - 2 * t2 + t) * h * d_[i] + (-2 * t3 + 3 * t2) * y_[i + 1] +
           (t3 - t2) * h * d_[i + 1];
  }

 private:
  static double end_slope(double h0, double h1, double d0, double d1) {
    double d = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if (d * d0 <= 0) return 0.0;
    if (d0 * d1 <= 0 && std::abs(d) > std::abs(3 * d0)) return 3 * d0;
    return d;
  }
  Vector x_, y_, d_;
};

struct Placement {
  std::size_t result;
  Index local;
};

void check_results(const std::vector<SubmodelResult> &results, const JobManifest &manifest) {
  const Index periods = static_cast<Index>(manifest.times.size());
  for (const auto &r : results) {
    const Index nd = static_cast<Index>(r.areas.size());
    if (static_cast<Index>(r.fit.eta.size()) != nd * periods || r.fit.cpo.size() != nd * periods)
      fail("submodel " + std::to_string(r.label) + " has the wrong number of cells");
    for (Index a : r.areas)
      if (a < 0 || a >= static_cast<Index>(manifest.area_ids.size()))
        fail("submodel " + std::to_string(r.label) + " refers to an unknown area");
  }
}

std::vector<Placement> owners(const std::vector<SubmodelResult> &results, const JobManifest &manifest) {
  const std::size_t n = manifest.area_ids.size();
  std::vector<Placement> own(n, {results.size(), -1});
  for (std::size_t r = 0; r < results.size(); ++r)
    for (std::size_t j = 0; j < results[r].areas.size(); ++j) {
      if (!results[r].core_mask[j]) continue;
      auto i = static_cast<std::size_t>(results[r].areas[j]);
      if (own[i].local >= 0) fail("area '" + manifest.area_ids[i] + "' is core in two submodels");
      own[i] = {r, static_cast<Index>(j)};
    }
  for (std::size_t i = 0; i < n; ++i)
    if (own[i].local < 0) fail("area '" + manifest.area_ids[i] + "' is core in no submodel");
  return own;
}

}  // namespace

std::vector<LatentMarginal> merge_original(const std::vector<SubmodelResult> &results, const JobManifest &manifest) {
  check_results(results, manifest);
  const auto own = owners(results, manifest);
  const Index n = static_cast<Index>(manifest.area_ids.size());
  const Index periods = static_cast<Index>(manifest.times.size());
  std::vector<LatentMarginal> out(static_cast<std::size_t>(n * periods));
  for (Index t = 0; t < periods; ++t)
    for (Index i = 0; i < n; ++i) {
      const auto &p = own[static_cast<std::size_t>(i)];
      const auto &r = results[p.result];
      Index nd = static_cast<Index>(r.areas.size());
      out[static_cast<std::size_t>(t * n + i)] = r.fit.eta[static_cast<std::size_t>(t * nd + p.local)];
    }
  return out;
}

Vector cpo_weights(const Vector &cpo, bool *flagged) {
  Vector w = cpo.cwiseMax(0.0);
  double s = w.sum();
  bool flag = !(s > 0) || !std::isfinite(s);
  if (flag) w.setConstant(1.0 / static_cast<double>(cpo.size()));
  else w /= s;
  if (flagged) *flagged = flag;
  return w;
}

LatentMarginal mix_marginals(const std::vector<const LatentMarginal *> &parts, const Vector &weights, int points) {
  if (parts.empty() || static_cast<Index>(parts.size()) != weights.size()) fail("mixture needs one weight per part");
  if (points < 2) fail("mixture grid needs at least two points");
  Vector w = weights / weights.sum();
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto *p : parts) {
    Vector cum = p->cumulative();
    lo = std::min(lo, p->quantile(0.001 * cum[cum.size() - 1], cum));
    hi = std::max(hi, p->quantile(0.999 * cum[cum.size() - 1], cum));
  }
  if (!(hi > lo)) {
    for (const auto *p : parts) {
      lo = std::min(lo, p->x[0]);
      hi = std::max(hi, p->x[p->x.size() - 1]);
    }
    if (!(hi > lo)) {
      double c = lo;
      lo = c - 1e-9 * (1 + std::abs(c));
      hi = c + 1e-9 * (1 + std::abs(c));
    }
  }
  Vector x(points), f = Vector::Zero(points);
  for (int k = 0; k < points; ++k) x[k] = lo + (hi - lo) * k / (points - 1);
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const auto *p = parts[j];
    if (degenerate(*p)) {
      // Point mass: spread over the nearest grid cell.
      Index k = std::clamp<Index>(static_cast<Index>(std::lround((p->x[0] - lo) / (hi - lo) * (points - 1))), 0, points - 1);
      f[k] += w[static_cast<Index>(j)] * (points - 1) / (hi - lo) * ((k == 0 || k == points - 1) ? 2.0 : 1.0);
      continue;
    }
    Pchip interp(p->x, p->density);
    for (int k = 0; k < points; ++k) f[k] += w[static_cast<Index>(j)] * std::max(interp(x[k]), 0.0);
  }
  return LatentMarginal::from_grid(std::move(x), std::move(f));
}

std::vector<LatentMarginal> merge_mixture(const std::vector<SubmodelResult> &results, const JobManifest &manifest,
                                          int points, std::vector<bool> *flagged, std::vector<int> *multiplicity) {
  check_results(results, manifest);
  owners(results, manifest);
  const Index n = static_cast<Index>(manifest.area_ids.size());
  const Index periods = static_cast<Index>(manifest.times.size());
  std::vector<std::vector<Placement>> members(static_cast<std::size_t>(n));
  for (std::size_t r = 0; r < results.size(); ++r)
    for (std::size_t j = 0; j < results[r].areas.size(); ++j)
      members[static_cast<std::size_t>(results[r].areas[j])].push_back({r, static_cast<Index>(j)});

  std::vector<LatentMarginal> out(static_cast<std::size_t>(n * periods));
  if (flagged) flagged->assign(out.size(), false);
  if (multiplicity) multiplicity->assign(out.size(), 0);
  for (Index t = 0; t < periods; ++t)
    for (Index i = 0; i < n; ++i) {
      const auto &mem = members[static_cast<std::size_t>(i)];
      const std::size_t cell = static_cast<std::size_t>(t * n + i);
      if (multiplicity) (*multiplicity)[cell] = static_cast<int>(mem.size());
      auto local_cell = [&](const Placement &p) {
        return static_cast<std::size_t>(t * static_cast<Index>(results[p.result].areas.size()) + p.local);
      };
      if (mem.size() == 1) {
        out[cell] = results[mem[0].result].fit.eta[local_cell(mem[0])];
        continue;
      }
      std::vector<const LatentMarginal *> parts;
      Vector cpo(static_cast<Index>(mem.size()));
      for (std::size_t j = 0; j < mem.size(); ++j) {
        const auto &r = results[mem[j].result];
        parts.push_back(&r.fit.eta[local_cell(mem[j])]);
        cpo[static_cast<Index>(j)] = r.fit.cpo[static_cast<Index>(local_cell(mem[j]))];
      }
      bool flag = false;
      Vector w = cpo_weights(cpo, &flag);
      if (flagged) (*flagged)[cell] = flag;
      out[cell] = mix_marginals(parts, w, points);
    }
  return out;
}

LatentMarginal risk_scale(const LatentMarginal &m) {
  LatentMarginal r;
  r.x = m.x.array().exp();
  r.q025 = std::exp(m.q025);
  r.q50 = std::exp(m.q50);
  r.q975 = std::exp(m.q975);
  if (degenerate(m)) {
    r.density = m.density;
    r.mean = std::exp(m.x[0]);
    r.sd = 0.0;
    return r;
  }
  r.density = m.density.array() / r.x.array();
  Vector ex = r.x.cwiseProduct(m.density);
  double mass = trapezoid(m.x, m.density);
  r.mean = trapezoid(m.x, ex) / mass;
  Vector c = (r.x.array() - r.mean).square().matrix().cwiseProduct(m.density);
  r.sd = std::sqrt(std::max(trapezoid(m.x, c) / mass, 0.0));
  return r;
}

std::pair<double, double> exceedance(const LatentMarginal &m, double threshold) {
  if (!(threshold > 0)) fail("exceedance threshold must be positive");
  const double cut = std::log(threshold);
  if (degenerate(m)) return {m.x[0] > cut ? 1.0 : 0.0, m.x[0] < cut ? 1.0 : 0.0};
  const double total = m.cumulative()[m.x.size() - 1];
  double below = std::clamp(m.cdf(cut) / total, 0.0, 1.0);
  return {1.0 - below, below};
}

void exceedance(MergedResult &m, double threshold) {
  const Index cells = static_cast<Index>(m.log_risk.size());
  m.prob_gt1.resize(cells);
  m.prob_lt1.resize(cells);
  for (Index c = 0; c < cells; ++c) {
    auto [gt, lt] = exceedance(m.log_risk[static_cast<std::size_t>(c)], threshold);
    m.prob_gt1[c] = gt;
    m.prob_lt1[c] = lt;
  }
}

InformationCriteria approximate_ic(const std::vector<LatentMarginal> &log_risk, const CountData &data, int samples,
                                   std::uint64_t seed) {
  if (samples < 2) fail("need at least two samples");
  const Index n = data.n();
  const Index cells = n * data.periods();
  if (static_cast<Index>(log_risk.size()) != cells) fail("one marginal per cell is required");
  InformationCriteria ic;
  ic.samples = samples;
  double dbar = 0.0, dmean = 0.0, lppd = 0.0, pw = 0.0;
  std::vector<double> lp(static_cast<std::size_t>(samples)), mu(static_cast<std::size_t>(samples));
  for (Index t = 0; t < data.periods(); ++t)
    for (Index i = 0; i < n; ++i) {
      const Index c = t * n + i;
      if (data.structural_zero[static_cast<std::size_t>(c)]) continue;
      const auto &m = log_risk[static_cast<std::size_t>(c)];
      const double o = data.observed[c], e = data.expected[c];
      const double lg = std::lgamma(o + 1.0);
      auto logp = [&](double mean) { return mean > 0 ? o * std::log(mean) - mean - lg : (o == 0 ? 0.0 : -INFINITY); };
      if (degenerate(m)) {
        std::fill(mu.begin(), mu.end(), e * std::exp(m.x[0]));
      } else {
        std::mt19937_64 rng(derive_seed(seed, data.area_ids[static_cast<std::size_t>(i)] + "\t" +
                                                  data.times[static_cast<std::size_t>(t)]));
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const Vector cum = m.cumulative();
        const double total = cum[cum.size() - 1];
        for (auto &v : mu) v = e * std::exp(m.quantile(unif(rng) * total, cum));
      }
      for (int s = 0; s < samples; ++s) lp[static_cast<std::size_t>(s)] = logp(mu[static_cast<std::size_t>(s)]);
      // Means shifted by the first draw, so identical draws give exact means.
      double lp_shift = 0.0, mu_shift = 0.0;
      for (int s = 0; s < samples; ++s) {
        lp_shift += lp[static_cast<std::size_t>(s)] - lp[0];
        mu_shift += mu[static_cast<std::size_t>(s)] - mu[0];
      }
      const double lp_mean = lp[0] + lp_shift / samples;
      const double mu_mean = mu[0] + mu_shift / samples;
      dbar += -2.0 * lp_mean;
      dmean += -2.0 * logp(mu_mean);
      Vector lpv = Eigen::Map<const Vector>(lp.data(), samples);
      lppd += log_sum_exp(lpv) - std::log(static_cast<double>(samples));
      pw += (lpv.array() - lp_mean).square().sum() / (samples - 1);
    }
  ic.mean_deviance = dbar;
  ic.deviance_of_mean = dmean;
  ic.p_d = dbar - dmean;
  ic.dic = dbar + ic.p_d;
  ic.p_waic = pw;
  ic.waic = -2.0 * lppd + 2.0 * pw;
  return ic;
}

MergedResult merge_results(const std::vector<SubmodelResult> &results, const JobManifest &manifest,
                           const CountData &data, MergeStrategy strategy, int points, int samples,
                           std::uint64_t seed) {
  auto t0 = std::chrono::steady_clock::now();
  if (data.area_ids != manifest.area_ids || data.times != manifest.times)
    fail("count data are not aligned with the manifest");
  MergedResult m;
  m.area_ids = manifest.area_ids;
  m.times = manifest.times;
  m.strategy = strategy;
  if (strategy == MergeStrategy::Original) {
    m.log_risk = merge_original(results, manifest);
    m.weights_flagged.assign(m.log_risk.size(), false);
    m.multiplicity.assign(m.log_risk.size(), 0);
    for (const auto &r : results)
      for (std::size_t t = 0; t < manifest.times.size(); ++t)
        for (Index a : r.areas) ++m.multiplicity[t * manifest.area_ids.size() + static_cast<std::size_t>(a)];
  } else {
    m.log_risk = merge_mixture(results, manifest, points, &m.weights_flagged, &m.multiplicity);
  }
  m.risk.reserve(m.log_risk.size());
  for (const auto &lm : m.log_risk) m.risk.push_back(risk_scale(lm));
  exceedance(m);
  m.ic = approximate_ic(m.log_risk, data, samples, derive_seed(seed, "information-criteria"));
  m.t_merge = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

void write_merged_csv(std::ostream &out, const MergedResult &m) {
  out << "area_id,time,median,mean,sd,q025,q975,prob_gt1,prob_lt1\n";
  const Index n = m.n();
  for (Index t = 0; t < m.periods(); ++t)
    for (Index i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(t * n + i);
      const auto &r = m.risk[c];
      out << m.area_ids[static_cast<std::size_t>(i)] << ',' << m.times[static_cast<std::size_t>(t)] << ','
          << format_double(r.q50) << ',' << format_double(r.mean) << ',' << format_double(r.sd) << ','
          << format_double(r.q025) << ',' << format_double(r.q975) << ','
          << format_double(m.prob_gt1[static_cast<Index>(c)]) << ',' << format_double(m.prob_lt1[static_cast<Index>(c)])
          << '\n';
    }
}

nlohmann::json to_json(const InformationCriteria &ic) {
  return {{"mean_deviance", ic.mean_deviance}, {"deviance_of_mean", ic.deviance_of_mean},
          {"p_d", ic.p_d},                     {"dic", ic.dic},
          {"waic", ic.waic},                   {"p_waic", ic.p_waic},
          {"samples", ic.samples}};
}

nlohmann::json to_json(const MergedResult &m) {
  std::map<int, int> mult;
  for (int k : m.multiplicity) ++mult[k];
  nlohmann::json mj = nlohmann::json::object();
  for (auto [k, c] : mult) mj[std::to_string(k)] = c;
  int flagged = static_cast<int>(std::count(m.weights_flagged.begin(), m.weights_flagged.end(), true));
  return {{"format", "dacmap.merged"},
          {"version", 1},
          {"strategy", to_string(m.strategy)},
          {"areas", m.n()},
          {"periods", m.periods()},
          {"ic", to_json(m.ic)},
          {"timing", {{"t_run", m.t_run}, {"t_merge", m.t_merge}}},
          {"multiplicity", mj},
          {"flagged_weight_cells", flagged}};
}

}  // namespace dacmap
