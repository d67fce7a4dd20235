#include "dacmap/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "dacmap/csv.hpp"

namespace dacmap {

namespace {

std::vector<Index> all_or(const std::vector<Index> &areas, Index n) {
  if (!areas.empty()) return areas;
  std::vector<Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Index{0});
  return all;
}

std::vector<Index> cells_of(const std::vector<Index> &areas, Index n, Index periods) {
  std::vector<Index> cells;
  for (Index t = 0; t < periods; ++t)
    for (Index i : areas) cells.push_back(t * n + i);
  return cells;
}

}  // namespace

AccuracyMetrics marb_mrrmse(const Vector &truth, const std::vector<Vector> &estimates, Index n,
                            const std::vector<Index> &areas) {
  if (estimates.empty()) fail("need at least one replicate");
  if (n <= 0 || truth.size() % n != 0) fail("truth does not cover a full area-by-time grid");
  const Index periods = truth.size() / n;
  for (const auto &e : estimates)
    if (e.size() != truth.size()) fail("estimate and truth sizes differ");
  const auto sel = all_or(areas, n);
  const double L = static_cast<double>(estimates.size());
  AccuracyMetrics m;
  m.marb = Vector::Zero(static_cast<Index>(sel.size()));
  m.mrrmse = Vector::Zero(static_cast<Index>(sel.size()));
  for (std::size_t a = 0; a < sel.size(); ++a) {
    const Index i = sel[a];
    if (i < 0 || i >= n) fail("area index out of range");
    double marb = 0.0, rr = 0.0;
    for (Index t = 0; t < periods; ++t) {
      const double r = truth[t * n + i];
      if (!(r > 0)) fail("true risk must be positive");
      double sum = 0.0, sq = 0.0;
      for (const auto &e : estimates) {
        double rel = (e[t * n + i] - r) / r;
        sum += rel;
        sq += rel * rel;
      }
      marb += std::abs(sum) / L;
      rr += std::sqrt(sq / L);
    }
    m.marb[static_cast<Index>(a)] = marb / static_cast<double>(periods);
    m.mrrmse[static_cast<Index>(a)] = rr / static_cast<double>(periods);
  }
  m.marb_mean = m.marb.mean();
  m.mrrmse_mean = m.mrrmse.mean();
  return m;
}

double interval_score(double r, double lower, double upper, double alpha) {
  if (lower > upper) fail("interval lower bound exceeds upper bound");
  if (!(alpha > 0 && alpha < 1)) fail("alpha must lie in (0, 1)");
  double s = upper - lower;
  if (r < lower) s += 2.0 / alpha * (lower - r);
  if (r > upper) s += 2.0 / alpha * (r - upper);
  return s;
}

ClassificationRates classification_rates(const Vector &truth, const Vector &prob_gt1, const Vector &prob_lt1,
                                         double p0, const std::vector<Index> &cells) {
  if (!(p0 > 0 && p0 < 1)) fail("p0 must lie in (0, 1)");
  if (prob_gt1.size() != truth.size() || prob_lt1.size() != truth.size()) fail("probability and truth sizes differ");
  ClassificationRates c;
  c.p0 = p0;
  Index tp = 0, tn = 0, fp = 0, fn = 0;
  auto visit = [&](Index k) {
    const double r = truth[k];
    const bool call_high = prob_gt1[k] > p0;
    const bool call_low = prob_lt1[k] > p0;
    if (r > 1.0) {
      ++c.high;
      tp += call_high;
      fn += call_low;
    } else if (r < 1.0) {
      ++c.low;
      tn += call_low;
      fp += call_high;
    } else {
      ++c.excluded;
    }
  };
  if (cells.empty())
    for (Index k = 0; k < truth.size(); ++k) visit(k);
  else
    for (Index k : cells) visit(k);
  auto ratio = [](Index a, Index b) { return b > 0 ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  c.tpr = ratio(tp, c.high);
  c.fnr = ratio(fn, c.high);
  c.tnr = ratio(tn, c.low);
  c.fpr = ratio(fp, c.low);
  return c;
}

ReplicateFit read_merged_csv(std::istream &in, const std::vector<std::string> &area_ids,
                             const std::vector<std::string> &times) {
  auto rows = read_csv(in);
  const std::vector<std::string> header = {"area_id", "time", "median", "mean", "sd",
                                           "q025",    "q975", "prob_gt1", "prob_lt1"};
  if (rows.empty() || rows[0] != header) fail("merged file header must be " + std::string("area_id,time,median,mean,sd,q025,q975,prob_gt1,prob_lt1"));
  std::unordered_map<std::string, Index> apos, tpos;
  for (std::size_t i = 0; i < area_ids.size(); ++i) apos.emplace(area_ids[i], static_cast<Index>(i));
  for (std::size_t t = 0; t < times.size(); ++t) tpos.emplace(times[t], static_cast<Index>(t));
  const Index n = static_cast<Index>(area_ids.size());
  const Index cells = n * static_cast<Index>(times.size());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  ReplicateFit f{Vector::Constant(cells, nan), Vector::Constant(cells, nan), Vector::Constant(cells, nan),
                 Vector::Constant(cells, nan), Vector::Constant(cells, nan)};
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto &row = rows[k];
    if (row.size() != header.size()) fail("merged row " + std::to_string(k + 1) + " has wrong field count");
    auto a = apos.find(row[0]);
    auto t = tpos.find(row[1]);
    if (a == apos.end() || t == tpos.end()) fail("merged row " + std::to_string(k + 1) + " names an unknown area or time");
    const Index c = t->second * n + a->second;
    f.median[c] = parse_double(row[2], "median");
    f.q025[c] = parse_double(row[5], "q025");
    f.q975[c] = parse_double(row[6], "q975");
    f.prob_gt1[c] = parse_double(row[7], "prob_gt1");
    f.prob_lt1[c] = parse_double(row[8], "prob_lt1");
  }
  if (f.median.hasNaN()) fail("merged file does not cover every cell");
  return f;
}

ReplicateFit read_merged_csv_file(const std::string &path, const std::vector<std::string> &area_ids,
                                  const std::vector<std::string> &times) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  return read_merged_csv(in, area_ids, times);
}

EvalReport evaluate(const Vector &truth, const std::vector<ReplicateFit> &fits, Index n,
                    const std::vector<Index> &areas, const std::vector<double> &thresholds) {
  if (fits.empty()) fail("need at least one replicate");
  EvalReport r;
  r.n = n;
  r.periods = truth.size() / n;
  r.replicates = static_cast<Index>(fits.size());
  r.areas = all_or(areas, n);
  std::vector<Vector> medians;
  for (const auto &f : fits) medians.push_back(f.median);
  r.accuracy = marb_mrrmse(truth, medians, n, r.areas);
  const auto cells = cells_of(r.areas, n, r.periods);
  double is = 0.0;
  for (const auto &f : fits)
    for (Index c : cells) is += interval_score(truth[c], f.q025[c], f.q975[c]);
  r.interval_score = is / static_cast<double>(cells.size() * fits.size());
  for (double p0 : thresholds) {
    ClassificationRates avg;
    avg.p0 = p0;
    for (const auto &f : fits) {
      auto c = classification_rates(truth, f.prob_gt1, f.prob_lt1, p0, cells);
      avg.tpr += c.tpr;
      avg.tnr += c.tnr;
      avg.fpr += c.fpr;
      avg.fnr += c.fnr;
      avg.high = c.high;
      avg.low = c.low;
      avg.excluded = c.excluded;
    }
    const double L = static_cast<double>(fits.size());
    avg.tpr /= L;
    avg.tnr /= L;
    avg.fpr /= L;
    avg.fnr /= L;
    r.rates.push_back(avg);
  }
  return r;
}

EvalReport border_restrict(const Vector &truth, const std::vector<ReplicateFit> &fits, const AreaGraph &g,
                           const std::vector<double> &thresholds) {
  auto border = border_units(g);
  if (border.empty()) fail("the partition has no border areas");
  EvalReport r = evaluate(truth, fits, g.size(), border, thresholds);
  r.border_only = true;
  return r;
}

nlohmann::json to_json(const EvalReport &r) {
  nlohmann::json rates = nlohmann::json::array();
  for (const auto &c : r.rates)
    rates.push_back({{"p0", c.p0}, {"tpr", c.tpr}, {"tnr", c.tnr}, {"fpr", c.fpr}, {"fnr", c.fnr},
                     {"truly_high", c.high}, {"truly_low", c.low}, {"truth_equal_one", c.excluded}});
  return {{"format", "dacmap.evaluation"},
          {"version", 1},
          {"areas", r.n},
          {"periods", r.periods},
          {"replicates", r.replicates},
          {"border_only", r.border_only},
          {"evaluated_areas", r.areas.size()},
          {"marb", r.accuracy.marb_mean},
          {"mrrmse", r.accuracy.mrrmse_mean},
          {"interval_score", r.interval_score},
          {"classification", rates},
          {"conventions",
           {{"fpr_denominator", "all truly low units, abstentions included"},
            {"fnr_denominator", "all truly high units, abstentions included"},
            {"truth_equal_one", "excluded from every denominator"},
            {"interval", "95% equal-tailed credible interval"}}}};
}

void write_report_csv(std::ostream &out, const EvalReport &r) {
  out << "metric,value\n";
  out << "marb," << format_double(r.accuracy.marb_mean) << '\n';
  out << "mrrmse," << format_double(r.accuracy.mrrmse_mean) << '\n';
  out << "interval_score," << format_double(r.interval_score) << '\n';
  for (const auto &c : r.rates) {
    std::string p = format_double(c.p0);
    out << "tpr_" << p << ',' << format_double(c.tpr) << '\n';
    out << "tnr_" << p << ',' << format_double(c.tnr) << '\n';
    out << "fpr_" << p << ',' << format_double(c.fpr) << '\n';
    out << "fnr_" << p << ',' << format_double(c.fnr) << '\n';
  }
}

void write_area_csv(std::ostream &out, const EvalReport &r, const std::vector<std::string> &area_ids) {
  out << "area_id,marb,mrrmse\n";
  for (std::size_t a = 0; a < r.areas.size(); ++a)
    out << area_ids[static_cast<std::size_t>(r.areas[a])] << ',' << format_double(r.accuracy.marb[static_cast<Index>(a)])
        << ',' << format_double(r.accuracy.mrrmse[static_cast<Index>(a)]) << '\n';
}

}  // namespace dacmap
