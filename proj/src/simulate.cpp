#include "dacmap/simulate.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <unordered_map>

#include <Eigen/Eigenvalues>

#include "dacmap/csv.hpp"

namespace dacmap {

AreaGraph grid_template(int side, int blocks_per_side) {
  if (side < 1) fail("grid side must be positive");
  if (blocks_per_side < 1 || side % blocks_per_side != 0)
    fail("grid side " + std::to_string(side) + " is not divisible by " + std::to_string(blocks_per_side));
  const int n = side * side;
  const int width = static_cast<int>(std::to_string(n).size());
  std::vector<std::string> ids;
  std::vector<Edge> edges;
  std::vector<Point2> coords;
  std::vector<int> labels;
  const int block = side / blocks_per_side;
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      std::string id = std::to_string(r * side + c + 1);
      ids.push_back("a" + std::string(static_cast<std::size_t>(width) - id.size(), '0') + id);
      coords.push_back({c + 0.5, r + 0.5});
      labels.push_back((r / block) * blocks_per_side + c / block + 1);
      int i = r * side + c;
      if (c + 1 < side) edges.emplace_back(i, i + 1);
      if (r + 1 < side) edges.emplace_back(i, i + side);
    }
  return AreaGraph(std::move(ids), std::move(edges)).with_coordinates(std::move(coords)).with_partition(std::move(labels));
}

std::vector<std::string> default_times(Index periods) {
  std::vector<std::string> t;
  for (Index s = 1; s <= periods; ++s) t.push_back(std::to_string(s));
  return t;
}

namespace {

double variance(const Vector &v) {
  if (v.size() == 0) return 0.0;
  return (v.array() - v.mean()).square().mean();
}

}  // namespace

RiskSurface smooth_surface(const AreaGraph &g, Index periods, const VarianceShares &shares, std::uint64_t seed,
                           double total_sd) {
  if (!g.has_coordinates()) fail("smooth surface needs area coordinates");
  if (periods < 1) fail("need at least one period");
  if (shares.spatial < 0 || shares.temporal < 0 || shares.interaction < 0 ||
      std::abs(shares.spatial + shares.temporal + shares.interaction - 1.0) > 1e-9)
    fail("variance shares must be non-negative and sum to one");
  const Index n = g.size();
  const auto &pts = g.coordinates();
  double x0 = pts[0].x, x1 = pts[0].x, y0 = pts[0].y, y1 = pts[0].y;
  for (const auto &p : pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  auto ux = [&](Index i) { return x1 > x0 ? (pts[static_cast<std::size_t>(i)].x - x0) / (x1 - x0) : 0.0; };
  auto uy = [&](Index i) { return y1 > y0 ? (pts[static_cast<std::size_t>(i)].y - y0) / (y1 - y0) : 0.0; };
  auto ut = [&](Index t) { return periods > 1 ? static_cast<double>(t) / static_cast<double>(periods - 1) : 0.0; };
  const double pi = std::numbers::pi;

  std::mt19937_64 rng(derive_seed(seed, "smooth_surface"));
  std::normal_distribution<double> z;

  Vector s = Vector::Zero(n);
  for (int a = 0; a <= 3; ++a)
    for (int b = 0; b <= 3; ++b) {
      if (a == 0 && b == 0) continue;
      double c = z(rng) / (a + b);
      for (Index i = 0; i < n; ++i) s[i] += c * std::cos(pi * a * ux(i)) * std::cos(pi * b * uy(i));
    }
  Vector m = Vector::Zero(periods);
  for (int c = 1; c <= 3; ++c) {
    double coef = z(rng) / c;
    for (Index t = 0; t < periods; ++t) m[t] += coef * std::cos(pi * c * ut(t));
  }
  Matrix w = Matrix::Zero(n, periods);
  for (int a = 0; a <= 2; ++a)
    for (int b = 0; b <= 2; ++b)
      for (int c = 1; c <= 2; ++c) {
        if (a == 0 && b == 0) continue;
        double coef = z(rng) / (a + b + c);
        for (Index t = 0; t < periods; ++t)
          for (Index i = 0; i < n; ++i)
            w(i, t) += coef * std::cos(pi * a * ux(i)) * std::cos(pi * b * uy(i)) * std::cos(pi * c * ut(t));
      }
  // Centre so the three components are orthogonal over the full grid.
  s.array() -= s.mean();
  m.array() -= m.mean();
  Vector row_mean = w.rowwise().mean();
  Vector col_mean = w.colwise().mean().transpose();
  double grand = w.mean();
  for (Index t = 0; t < periods; ++t)
    for (Index i = 0; i < n; ++i) w(i, t) += grand - row_mean[i] - col_mean[t];

  const double total = total_sd * total_sd;
  auto rescale = [&](auto &v, double var, double share, const char *what) {
    if (share == 0.0) {
      v.setZero();
      return;
    }
    if (!(var > 0)) fail(std::string("no ") + what + " variation available for a positive share");
    v *= std::sqrt(share * total / var);
  };
  rescale(s, variance(s), shares.spatial, "spatial");
  rescale(m, variance(m), shares.temporal, "temporal");
  Vector wv = Eigen::Map<Vector>(w.data(), w.size());
  rescale(w, variance(wv), shares.interaction, "space-time");

  RiskSurface out;
  out.n = n;
  out.periods = periods;
  out.log_risk.resize(n * periods);
  for (Index t = 0; t < periods; ++t)
    for (Index i = 0; i < n; ++i) out.log_risk[t * n + i] = s[i] + m[t] + w(i, t);
  return out;
}

namespace {

struct Spectrum {
  Matrix vectors;
  Vector scale;  // 1/sqrt(eigenvalue), zero on the kernel
};

Spectrum spectrum(const SparseMatrix &r) {
  Eigen::SelfAdjointEigenSolver<Matrix> es{Matrix(r)};
  Spectrum sp;
  sp.vectors = es.eigenvectors();
  const double tol = 1e-9 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  sp.scale = es.eigenvalues().unaryExpr([tol](double l) { return l > tol ? 1.0 / std::sqrt(l) : 0.0; });
  return sp;
}

}  // namespace

RiskSurface gmrf_surface(const AreaGraph &g, Index periods, const GmrfTaus &taus, Interaction type,
                         std::uint64_t seed) {
  if (!(taus.spatial > 0 && taus.temporal > 0 && taus.interaction > 0)) fail("precisions must be positive");
  const Index n = g.size();
  const Spectrum sp = spectrum(scale_structure(spatial_structure(g)).scaled);
  const Spectrum tm = spectrum(scale_structure(rw_structure(periods, 1)).scaled);
  std::mt19937_64 rng(derive_seed(seed, "gmrf_surface"));
  std::normal_distribution<double> z;
  auto normals = [&](Index r, Index c) {
    Matrix m(r, c);
    for (Index j = 0; j < c; ++j)
      for (Index i = 0; i < r; ++i) m(i, j) = z(rng);
    return m;
  };

  Vector xi = sp.vectors * (sp.scale.cwiseProduct(normals(n, 1).col(0)) / std::sqrt(taus.spatial));
  Vector gamma = tm.vectors * (tm.scale.cwiseProduct(normals(periods, 1).col(0)) / std::sqrt(taus.temporal));
  Matrix zd = normals(n, periods) / std::sqrt(taus.interaction);
  Matrix delta;
  switch (type) {
    case Interaction::I:
      delta = zd.array() - zd.mean();  // iid conditioned on the grand sum
      break;
    case Interaction::II:
      delta = zd * tm.scale.asDiagonal() * tm.vectors.transpose();
      break;
    case Interaction::III:
      delta = sp.vectors * sp.scale.asDiagonal() * zd;
      break;
    case Interaction::IV:
      delta = sp.vectors * (sp.scale * tm.scale.transpose()).cwiseProduct(zd) * tm.vectors.transpose();
      break;
  }
  RiskSurface out;
  out.n = n;
  out.periods = periods;
  out.log_risk.resize(n * periods);
  for (Index t = 0; t < periods; ++t)
    for (Index i = 0; i < n; ++i) out.log_risk[t * n + i] = xi[i] + gamma[t] + delta(i, t);
  return out;
}

CountData sample_counts(const AreaGraph &g, const std::vector<std::string> &times, const Vector &risk,
                        const Vector &expected, std::uint64_t seed) {
  const Index n = g.size();
  const Index cells = n * static_cast<Index>(times.size());
  if (risk.size() != cells || expected.size() != cells) fail("risk and expected must cover every cell");
  CountData d;
  d.area_ids = g.ids();
  d.times = times;
  d.expected = expected;
  d.observed.resize(cells);
  d.structural_zero.assign(static_cast<std::size_t>(cells), false);
  std::mt19937_64 rng(derive_seed(seed, "sample_counts"));
  for (Index c = 0; c < cells; ++c) {
    if (!(expected[c] > 0) || !(risk[c] >= 0)) fail("expected counts must be positive and risks non-negative");
    double mu = expected[c] * risk[c];
    if (mu < 1e-300) {
      d.observed[c] = 0.0;
      continue;
    }
    std::poisson_distribution<long long> pois(mu);
    d.observed[c] = static_cast<double>(pois(rng));
  }
  return d;
}

void write_truth(std::ostream &out, const AreaGraph &g, const std::vector<std::string> &times, const Vector &risk) {
  out << "area_id,time,risk\n";
  const Index n = g.size();
  for (std::size_t t = 0; t < times.size(); ++t)
    for (Index i = 0; i < n; ++i)
      out << g.id(i) << ',' << times[t] << ',' << format_double(risk[static_cast<Index>(t) * n + i]) << '\n';
}

Vector read_truth(std::istream &in, const AreaGraph &g, const std::vector<std::string> &times) {
  auto rows = read_csv(in);
  if (rows.empty() || rows[0].size() != 3 || rows[0][0] != "area_id") fail("truth header must be area_id,time,risk");
  std::unordered_map<std::string, Index> tpos;
  for (std::size_t t = 0; t < times.size(); ++t) tpos.emplace(times[t], static_cast<Index>(t));
  const Index n = g.size();
  Vector r = Vector::Constant(n * static_cast<Index>(times.size()), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto &row = rows[k];
    if (row.size() != 3) fail("truth row " + std::to_string(k + 1) + " has wrong field count");
    auto i = g.index_of(row[0]);
    auto t = tpos.find(row[1]);
    if (!i || t == tpos.end()) fail("truth row " + std::to_string(k + 1) + " names an unknown area or time");
    r[t->second * n + *i] = parse_double(row[2], "risk");
  }
  if (r.hasNaN()) fail("truth file does not cover every cell");
  return r;
}

}  // namespace dacmap
