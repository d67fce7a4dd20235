#include "dacmap/lgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <unordered_map>

#include "dacmap/csv.hpp"

namespace dacmap {

CountData CountData::subset(const std::vector<Index> &areas) const {
  CountData out;
  out.times = times;
  const Index m = static_cast<Index>(areas.size());
  const Index tt = periods();
  out.observed.resize(m * tt);
  out.expected.resize(m * tt);
  out.structural_zero.resize(static_cast<std::size_t>(m * tt));
  for (Index j = 0; j < m; ++j) out.area_ids.push_back(area_ids[static_cast<std::size_t>(areas[static_cast<std::size_t>(j)])]);
  for (Index t = 0; t < tt; ++t)
    for (Index j = 0; j < m; ++j) {
      Index src = cell(areas[static_cast<std::size_t>(j)], t);
      out.observed[t * m + j] = observed[src];
      out.expected[t * m + j] = expected[src];
      out.structural_zero[static_cast<std::size_t>(t * m + j)] = structural_zero[static_cast<std::size_t>(src)];
    }
  return out;
}

CountData CountData::aligned_to(const AreaGraph &g) const {
  std::unordered_map<std::string, Index> pos;
  for (Index i = 0; i < n(); ++i) pos.emplace(area_ids[static_cast<std::size_t>(i)], i);
  if (static_cast<Index>(pos.size()) != g.size()) fail("count data has " + std::to_string(pos.size()) + " areas, graph has " + std::to_string(g.size()));
  std::vector<Index> order;
  for (Index i = 0; i < g.size(); ++i) {
    auto it = pos.find(g.id(i));
    if (it == pos.end()) fail("area '" + g.id(i) + "' missing from count data");
    order.push_back(it->second);
  }
  return subset(order);
}

Vector expected_cases(const StrataTable &table) {
  const Index cells = table.population.rows();
  const Index strata = table.population.cols();
  if (table.observed.rows() != cells || table.observed.cols() != strata) fail("strata tables differ in shape");
  Vector e = Vector::Zero(cells);
  for (Index j = 0; j < strata; ++j) {
    double nj = table.population.col(j).sum();
    double oj = table.observed.col(j).sum();
    if (nj <= 0.0) {
      if (oj != 0.0) fail("stratum " + std::to_string(j) + " has cases but no population");
      continue;
    }
    e += table.population.col(j) * (oj / nj);
  }
  return e;
}

namespace {

bool all_integers(const std::vector<std::string> &labels) {
  for (const auto &s : labels) {
    if (s.empty()) return false;
    std::size_t k = (s[0] == '-') ? 1 : 0;
    if (k == s.size()) return false;
    for (; k < s.size(); ++k)
      if (!std::isdigit(static_cast<unsigned char>(s[k]))) return false;
  }
  return true;
}

std::string strip(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  return s.substr(b);
}

}  // namespace

CountData read_counts(std::istream &in) {
  auto rows = read_csv(in);
  if (rows.empty()) fail("empty count file");
  std::vector<std::string> header;
  for (auto &h : rows[0]) header.push_back(strip(h));
  const bool direct = header == std::vector<std::string>{"area_id", "time", "observed", "expected"};
  const bool strata = header == std::vector<std::string>{"area_id", "time", "observed", "population", "stratum"};
  if (!direct && !strata) fail("count header must be area_id,time,observed,expected or area_id,time,observed,population,stratum");

  std::vector<std::string> areas, times;
  std::unordered_map<std::string, Index> area_pos, time_pos;
  auto intern = [](auto &list, auto &pos, const std::string &key) {
    auto [it, inserted] = pos.emplace(key, static_cast<Index>(list.size()));
    if (inserted) list.push_back(key);
    return it->second;
  };
  struct Row {
    Index area, time;
    double observed, value;
    std::string stratum;
  };
  std::vector<Row> parsed;
  std::vector<std::string> strata_names;
  std::unordered_map<std::string, Index> strata_pos;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto &row = rows[r];
    if (row.size() != header.size()) fail("count row " + std::to_string(r + 1) + " has wrong field count");
    Row p;
    p.area = intern(areas, area_pos, strip(row[0]));
    p.time = intern(times, time_pos, strip(row[1]));
    p.observed = parse_double(strip(row[2]), "observed");
    if (p.observed < 0 || std::floor(p.observed) != p.observed) fail("observed counts must be non-negative integers (row " + std::to_string(r + 1) + ")");
    p.value = parse_double(strip(row[3]), direct ? "expected" : "population");
    if (p.value < 0) fail("negative expected/population on row " + std::to_string(r + 1));
    if (strata) {
      p.stratum = strip(row[4]);
      intern(strata_names, strata_pos, p.stratum);
    }
    parsed.push_back(std::move(p));
  }
  // Time order: numeric when all labels are integers, else first appearance.
  std::vector<Index> time_rank(times.size());
  {
    std::vector<Index> order(times.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<Index>(k);
    if (all_integers(times)) {
      std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return std::stoll(times[static_cast<std::size_t>(a)]) < std::stoll(times[static_cast<std::size_t>(b)]);
      });
    }
    std::vector<std::string> sorted;
    for (std::size_t k = 0; k < order.size(); ++k) {
      time_rank[static_cast<std::size_t>(order[k])] = static_cast<Index>(k);
      sorted.push_back(times[static_cast<std::size_t>(order[k])]);
    }
    times = std::move(sorted);
  }
  CountData d;
  d.area_ids = areas;
  d.times = times;
  const Index n = d.n(), tt = d.periods();
  d.observed = Vector::Zero(n * tt);
  d.expected = Vector::Zero(n * tt);
  d.structural_zero.assign(static_cast<std::size_t>(n * tt), false);
  if (direct) {
    std::vector<bool> seen(static_cast<std::size_t>(n * tt), false);
    for (const auto &p : parsed) {
      Index c = time_rank[static_cast<std::size_t>(p.time)] * n + p.area;
      if (seen[static_cast<std::size_t>(c)]) fail("duplicate cell for area '" + areas[static_cast<std::size_t>(p.area)] + "'");
      seen[static_cast<std::size_t>(c)] = true;
      d.observed[c] = p.observed;
      d.expected[c] = p.value;
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) fail("count grid is incomplete");
  } else {
    const Index js = static_cast<Index>(strata_names.size());
    StrataTable table{Matrix::Zero(n * tt, js), Matrix::Zero(n * tt, js)};
    std::vector<bool> seen(static_cast<std::size_t>(n * tt * js), false);
    for (const auto &p : parsed) {
      Index c = time_rank[static_cast<std::size_t>(p.time)] * n + p.area;
      Index j = strata_pos.at(p.stratum);
      if (seen[static_cast<std::size_t>(c * js + j)]) fail("duplicate stratum row");
      seen[static_cast<std::size_t>(c * js + j)] = true;
      table.population(c, j) = p.value;
      table.observed(c, j) = p.observed;
    }
    for (Index c = 0; c < n * tt; ++c) {
      bool any = false;
      for (Index j = 0; j < js; ++j) any = any || seen[static_cast<std::size_t>(c * js + j)];
      if (!any) fail("count grid is incomplete");
    }
    d.observed = table.observed.rowwise().sum();
    d.expected = expected_cases(table);
  }
  for (Index c = 0; c < n * tt; ++c) {
    if (d.expected[c] <= 0.0) {
      d.expected[c] = kZeroExpected;
      d.observed[c] = 0.0;
      d.structural_zero[static_cast<std::size_t>(c)] = true;
    }
  }
  return d;
}

CountData read_counts_file(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path + "'");
  return read_counts(in);
}

void write_counts(std::ostream &out, const CountData &data) {
  out << "area_id,time,observed,expected\n";
  for (Index t = 0; t < data.periods(); ++t)
    for (Index i = 0; i < data.n(); ++i) {
      Index c = data.cell(i, t);
      double e = data.structural_zero[static_cast<std::size_t>(c)] ? 0.0 : data.expected[c];
      out << data.area_ids[static_cast<std::size_t>(i)] << ',' << data.times[static_cast<std::size_t>(t)] << ','
          << format_double(data.observed[c]) << ',' << format_double(e) << '\n';
    }
}

Vector to_internal(const Hyper &h) {
  Vector th(4);
  th << std::log(h.tau_spatial), std::log(h.lambda) - std::log1p(-h.lambda), std::log(h.tau_temporal),
      std::log(h.tau_interaction);
  return th;
}

Hyper to_natural(const Vector &theta) {
  Hyper h;
  h.tau_spatial = std::exp(theta[0]);
  h.lambda = 1.0 / (1.0 + std::exp(-theta[1]));
  h.tau_temporal = std::exp(theta[2]);
  h.tau_interaction = std::exp(theta[3]);
  return h;
}

namespace {

SparseMatrix embed(const SparseMatrix &block, Index row0, Index col0, Index dim, bool symmetric_pair) {
  std::vector<Triplet> t;
  for (Index c = 0; c < block.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(block, c); it; ++it) {
      t.emplace_back(static_cast<int>(row0 + it.row()), static_cast<int>(col0 + it.col()), it.value());
      if (symmetric_pair) t.emplace_back(static_cast<int>(col0 + it.col()), static_cast<int>(row0 + it.row()), it.value());
    }
  SparseMatrix m(dim, dim);
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

SparseMatrix eye(Index n) {
  SparseMatrix m(n, n);
  m.setIdentity();
  return m;
}

double log_sd_prior(double log_tau, const HyperPriorSpec &hp) {
  if (hp.sd_prior == SdPrior::Uniform) return -0.5 * log_tau;
  const double rate = -std::log(hp.pc_alpha) / hp.pc_u;
  return std::log(rate / 2.0) - 0.5 * log_tau - rate * std::exp(-0.5 * log_tau);
}

}  // namespace

SpaceTimeModel build_model(const AreaGraph &g, const CountData &data, const PriorSpec &spec) {
  const Index n = g.size();
  const Index tt = data.periods();
  if (data.n() != n) fail("count data has " + std::to_string(data.n()) + " areas, graph has " + std::to_string(n));
  for (Index i = 0; i < n; ++i)
    if (data.area_ids[static_cast<std::size_t>(i)] != g.id(i)) fail("count data area order does not match graph");
  if (spec.temporal_order != 1 && spec.temporal_order != 2) fail("temporal prior must be RW1 or RW2");

  SpaceTimeModel st;
  st.n = n;
  st.periods = tt;
  st.interaction = spec.interaction;
  st.spatial = scale_structure(spatial_structure(g));
  st.temporal = scale_structure(rw_structure(tt, spec.temporal_order));
  StructureMatrix rs = st.spatial.base;
  rs.entries = st.spatial.scaled;
  StructureMatrix rt = st.temporal.base;
  rt.entries = st.temporal.scaled;
  st.interaction_structure = interaction_structure(rs, rt, spec.interaction);

  LatentModel &m = st.model;
  const Index o_alpha = 0, o_xi = 1, o_u = 1 + n, o_gamma = 1 + 2 * n, o_delta = 1 + 2 * n + tt;
  m.dim = o_delta + n * tt;
  m.blocks = {{"alpha", o_alpha, 1}, {"xi", o_xi, n}, {"u", o_u, n}, {"gamma", o_gamma, tt}, {"delta", o_delta, n * tt}};

  // Linear predictor eta_it = alpha + xi_i + gamma_t + delta_it.
  const Index nobs = n * tt;
  std::vector<Triplet> pt;
  pt.reserve(static_cast<std::size_t>(4 * nobs));
  for (Index t = 0; t < tt; ++t)
    for (Index i = 0; i < n; ++i) {
      int r = static_cast<int>(t * n + i);
      pt.emplace_back(r, static_cast<int>(o_alpha), 1.0);
      pt.emplace_back(r, static_cast<int>(o_xi + i), 1.0);
      pt.emplace_back(r, static_cast<int>(o_gamma + t), 1.0);
      pt.emplace_back(r, static_cast<int>(o_delta + t * n + i), 1.0);
    }
  m.predictor.resize(nobs, m.dim);
  m.predictor.setFromTriplets(pt.begin(), pt.end());
  m.offset = data.expected.array().log();
  m.observed = data.observed;
  m.active.resize(static_cast<std::size_t>(nobs));
  for (Index r = 0; r < nobs; ++r) {
    bool zero = data.structural_zero[static_cast<std::size_t>(r)];
    m.active[static_cast<std::size_t>(r)] = !zero;
    if (zero) ++st.structural_zeros;
  }

  // Prior precision terms; theta = (log tau_xi, logit lambda, log tau_gamma, log tau_delta).
  auto lambda_of = [](const Vector &th) { return 1.0 / (1.0 + std::exp(-th[1])); };
  const double prec_alpha = spec.hyper.intercept_precision;
  SparseMatrix alpha_term(m.dim, m.dim);
  alpha_term.insert(o_alpha, o_alpha) = 1.0;
  m.terms.push_back({alpha_term, [prec_alpha](const Vector &) { return prec_alpha; }});
  m.terms.push_back({embed(eye(n), o_xi, o_xi, m.dim, false), [lambda_of](const Vector &th) {
                       return std::exp(th[0]) / (1.0 - lambda_of(th));
                     }});
  m.terms.push_back({embed(eye(n), o_xi, o_u, m.dim, true), [lambda_of](const Vector &th) {
                       double lam = lambda_of(th);
                       return -std::sqrt(lam * std::exp(th[0])) / (1.0 - lam);
                     }});
  m.terms.push_back({embed(eye(n), o_u, o_u, m.dim, false), [lambda_of](const Vector &th) {
                       double lam = lambda_of(th);
                       return lam / (1.0 - lam);
                     }});
  m.terms.push_back({embed(st.spatial.scaled, o_u, o_u, m.dim, false), [](const Vector &) { return 1.0; }});
  m.terms.push_back({embed(st.temporal.scaled, o_gamma, o_gamma, m.dim, false),
                     [](const Vector &th) { return std::exp(th[2]); }});
  m.terms.push_back({embed(st.interaction_structure.entries, o_delta, o_delta, m.dim, false),
                     [](const Vector &th) { return std::exp(th[3]); }});

  m.jitter_mask = Vector::Zero(m.dim);
  m.jitter_mask.segment(o_u, n).setOnes();
  m.jitter_mask.segment(o_gamma, tt).setOnes();
  if (spec.interaction != Interaction::I) m.jitter_mask.segment(o_delta, n * tt).setOnes();

  // Constraints: structured spatial kernel on u, temporal kernel on gamma,
  // interaction rows on delta.
  std::vector<Triplet> ct;
  int row = 0;
  const Matrix &ns = st.spatial.base.null_basis;
  for (Index c = 0; c < ns.cols(); ++c, ++row)
    for (Index i = 0; i < n; ++i)
      if (ns(i, c) != 0.0) ct.emplace_back(row, static_cast<int>(o_u + i), ns(i, c));
  const Matrix &nt = st.temporal.base.null_basis;
  for (Index c = 0; c < nt.cols(); ++c, ++row)
    for (Index t = 0; t < tt; ++t) ct.emplace_back(row, static_cast<int>(o_gamma + t), nt(t, c));
  SparseMatrix delta_rows = interaction_constraints(st.spatial.base, st.temporal.base, spec.interaction).retained();
  for (Index c = 0; c < delta_rows.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(delta_rows, c); it; ++it)
      ct.emplace_back(static_cast<int>(row + it.row()), static_cast<int>(o_delta + it.col()), it.value());
  row += static_cast<int>(delta_rows.rows());
  m.constraints.resize(row, m.dim);
  m.constraints.setFromTriplets(ct.begin(), ct.end());

  // Each block contributes (dim - constraints)/2 * log(scale).
  const double rank_gamma = static_cast<double>(tt - nt.cols());
  const double rank_delta = static_cast<double>(n * tt - delta_rows.rows());
  m.prior_log_scale = [n, rank_gamma, rank_delta, lambda_of](const Vector &th) {
    return 0.5 * (static_cast<double>(n) * (th[0] - std::log1p(-lambda_of(th))) + rank_gamma * th[2] +
                  rank_delta * th[3]);
  };

  const auto &hp = spec.hyper;
  m.hypers = {{"log_tau_spatial", 1.0, hp.log_tau_min, hp.log_tau_max},
              {"logit_lambda", 0.0, -10.0, 10.0},
              {"log_tau_temporal", 3.0, hp.log_tau_min, hp.log_tau_max},
              {"log_tau_interaction", 3.0, hp.log_tau_min, hp.log_tau_max}};
  m.log_hyperprior = [hp](const Vector &th) {
    double lam_logit = th[1];
    // log(lambda (1 - lambda)) for a uniform prior on lambda.
    double log_jac = -std::log1p(std::exp(-lam_logit)) - std::log1p(std::exp(lam_logit));
    return log_sd_prior(th[0], hp) + log_jac + log_sd_prior(th[2], hp) + log_sd_prior(th[3], hp);
  };
  return st;
}

SparseMatrix joint_precision(const SpaceTimeModel &m, const Vector &theta) {
  if (theta.size() != static_cast<Index>(m.model.hypers.size())) fail("wrong number of hyperparameters");
  for (Index k = 0; k < theta.size(); ++k) {
    const auto &h = m.model.hypers[static_cast<std::size_t>(k)];
    bool lambda_axis = k == 1;
    if (std::isnan(theta[k]) || (!lambda_axis && (theta[k] < h.lower || theta[k] > h.upper)) ||
        (lambda_axis && theta[k] == std::numeric_limits<double>::infinity()))
      fail("hyperparameter " + h.name + " outside admissible region");
  }
  SparseMatrix q(m.model.dim, m.model.dim);
  for (const auto &term : m.model.terms) q += term.coefficient(theta) * term.matrix;
  return q;
}

SparseMatrix joint_precision(const SpaceTimeModel &m, const Hyper &h) {
  if (!(h.tau_spatial > 0) || !(h.tau_temporal > 0) || !(h.tau_interaction > 0)) fail("precisions must be positive");
  if (!(h.lambda >= 0.0 && h.lambda < 1.0)) fail("lambda must lie in [0, 1)");
  return joint_precision(m, to_internal(h));
}

}  // namespace dacmap
