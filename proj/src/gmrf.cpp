#include "dacmap/gmrf.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <Eigen/LU>
#include <Eigen/QR>

#include "dacmap/csv.hpp"
#include "dacmap/sparse.hpp"

namespace dacmap {

std::string to_string(Interaction type) {
  switch (type) {
    case Interaction::I: return "I";
    case Interaction::II: return "II";
    case Interaction::III: return "III";
    case Interaction::IV: return "IV";
  }
  return "?";
}

Interaction parse_interaction(const std::string &text) {
  if (text == "I" || text == "1") return Interaction::I;
  if (text == "II" || text == "2") return Interaction::II;
  if (text == "III" || text == "3") return Interaction::III;
  if (text == "IV" || text == "4") return Interaction::IV;
  fail("unsupported interaction type '" + text + "'");
}

Index ConstraintSet::retained_count() const {
  return std::count(independent.begin(), independent.end(), true);
}

SparseMatrix ConstraintSet::retained() const {
  std::vector<Index> keep;
  for (std::size_t r = 0; r < independent.size(); ++r)
    if (independent[r]) keep.push_back(static_cast<Index>(r));
  SparseMatrix rm = rows;  // row-wise selection via triplets
  std::vector<Index> new_row(independent.size(), -1);
  for (std::size_t k = 0; k < keep.size(); ++k) new_row[static_cast<std::size_t>(keep[k])] = static_cast<Index>(k);
  std::vector<Triplet> t;
  for (Index c = 0; c < rm.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(rm, c); it; ++it)
      if (new_row[static_cast<std::size_t>(it.row())] >= 0)
        t.emplace_back(static_cast<int>(new_row[static_cast<std::size_t>(it.row())]), static_cast<int>(it.col()), it.value());
  SparseMatrix out(static_cast<Index>(keep.size()), rows.cols());
  out.setFromTriplets(t.begin(), t.end());
  return out;
}

StructureMatrix spatial_structure(const AreaGraph &g) {
  if (g.size() == 0) fail("spatial structure of an empty graph");
  const Index n = g.size();
  std::vector<Triplet> t;
  for (Index i = 0; i < n; ++i) t.emplace_back(static_cast<int>(i), static_cast<int>(i), static_cast<double>(g.degree(i)));
  for (auto [a, b] : g.edges()) {
    t.emplace_back(static_cast<int>(a), static_cast<int>(b), -1.0);
    t.emplace_back(static_cast<int>(b), static_cast<int>(a), -1.0);
  }
  StructureMatrix r;
  r.dim = n;
  r.entries.resize(n, n);
  r.entries.setFromTriplets(t.begin(), t.end());
  int count = 0;
  auto comp = g.components(&count);
  r.rank_deficiency = count;
  r.null_basis = Matrix::Zero(n, count);
  for (Index i = 0; i < n; ++i) r.null_basis(i, comp[static_cast<std::size_t>(i)]) = 1.0;
  return r;
}

StructureMatrix rw_structure(Index periods, int order) {
  if (order != 1 && order != 2) fail("random walk order must be 1 or 2");
  if (periods < order + 1) fail("too few periods for RW" + std::to_string(order));
  const Index rows = periods - order;
  std::vector<Triplet> dt;
  for (Index k = 0; k < rows; ++k) {
    if (order == 1) {
      dt.emplace_back(static_cast<int>(k), static_cast<int>(k), -1.0);
      dt.emplace_back(static_cast<int>(k), static_cast<int>(k + 1), 1.0);
    } else {
      dt.emplace_back(static_cast<int>(k), static_cast<int>(k), 1.0);
      dt.emplace_back(static_cast<int>(k), static_cast<int>(k + 1), -2.0);
      dt.emplace_back(static_cast<int>(k), static_cast<int>(k + 2), 1.0);
    }
  }
  SparseMatrix d(rows, periods);
  d.setFromTriplets(dt.begin(), dt.end());
  StructureMatrix r;
  r.dim = periods;
  r.entries = SparseMatrix(d.transpose() * d);
  r.entries.prune(0.0);
  r.rank_deficiency = order;
  r.null_basis = Matrix::Ones(periods, order);
  if (order == 2) {
    for (Index t = 0; t < periods; ++t) r.null_basis(t, 1) = static_cast<double>(t + 1);
  }
  return r;
}

namespace {

SparseMatrix kron(const SparseMatrix &a, const SparseMatrix &b) {
  std::vector<Triplet> t;
  t.reserve(static_cast<std::size_t>(a.nonZeros() * b.nonZeros()));
  for (Index ca = 0; ca < a.outerSize(); ++ca)
    for (SparseMatrix::InnerIterator ia(a, ca); ia; ++ia)
      for (Index cb = 0; cb < b.outerSize(); ++cb)
        for (SparseMatrix::InnerIterator ib(b, cb); ib; ++ib)
          t.emplace_back(static_cast<int>(ia.row() * b.rows() + ib.row()),
                         static_cast<int>(ia.col() * b.cols() + ib.col()), ia.value() * ib.value());
  SparseMatrix out(a.rows() * b.rows(), a.cols() * b.cols());
  out.setFromTriplets(t.begin(), t.end());
  return out;
}

SparseMatrix identity(Index n) {
  SparseMatrix m(n, n);
  m.setIdentity();
  return m;
}

// Time points whose per-time interaction rows are dropped for Type IV: the
// last k_gamma periods (rows of the temporal kernel there are nonsingular).
std::vector<Index> dropped_periods(const StructureMatrix &temporal) {
  const Index k = temporal.rank_deficiency;
  std::vector<Index> out;
  for (Index t = temporal.dim - k; t < temporal.dim; ++t) out.push_back(t);
  if (k > 0) {
    Matrix sub(k, k);
    for (Index r = 0; r < k; ++r) sub.row(r) = temporal.null_basis.row(out[static_cast<std::size_t>(r)]);
    Eigen::FullPivLU<Matrix> lu(sub);
    if (lu.rank() < k) fail("temporal kernel is singular on the final periods");
  }
  return out;
}

}  // namespace

StructureMatrix interaction_structure(const StructureMatrix &spatial, const StructureMatrix &temporal,
                                      Interaction type) {
  const Index n = spatial.dim;
  const Index tt = temporal.dim;
  StructureMatrix r;
  r.dim = n * tt;
  const Index ks = spatial.rank_deficiency;
  const Index kt = temporal.rank_deficiency;
  switch (type) {
    case Interaction::I:
      r.entries = identity(r.dim);
      r.rank_deficiency = 0;
      r.null_basis = Matrix::Zero(r.dim, 0);
      break;
    case Interaction::II:
      r.entries = kron(temporal.entries, identity(n));
      r.rank_deficiency = n * kt;
      break;
    case Interaction::III:
      r.entries = kron(identity(tt), spatial.entries);
      r.rank_deficiency = tt * ks;
      break;
    case Interaction::IV:
      r.entries = kron(temporal.entries, spatial.entries);
      r.rank_deficiency = r.dim - (tt - kt) * (n - ks);
      break;
  }
  if (type == Interaction::I) return r;
  // Kernel columns mirror interaction_constraints row by row.
  auto rows = interaction_constraints(spatial, temporal, type);
  SparseMatrix kept = rows.retained();
  r.null_basis = Matrix(kept.transpose());
  if (r.null_basis.cols() != r.rank_deficiency) fail("internal: interaction kernel size mismatch");
  return r;
}

ConstraintSet interaction_constraints(const StructureMatrix &spatial, const StructureMatrix &temporal,
                                      Interaction type) {
  const Index n = spatial.dim;
  const Index tt = temporal.dim;
  const Index ks = spatial.null_basis.cols();
  const Index kt = temporal.null_basis.cols();
  std::vector<Triplet> t;
  std::vector<bool> indep;
  int row = 0;
  auto per_area = [&] {
    for (Index c = 0; c < kt; ++c)
      for (Index i = 0; i < n; ++i, ++row) {
        for (Index s = 0; s < tt; ++s) {
          double v = temporal.null_basis(s, c);
          if (v != 0.0) t.emplace_back(row, static_cast<int>(s * n + i), v);
        }
        indep.push_back(true);
      }
  };
  auto per_time = [&](const std::vector<Index> &drop) {
    for (Index s = 0; s < tt; ++s) {
      bool dropped = std::find(drop.begin(), drop.end(), s) != drop.end();
      for (Index j = 0; j < ks; ++j, ++row) {
        for (Index i = 0; i < n; ++i) {
          double v = spatial.null_basis(i, j);
          if (v != 0.0) t.emplace_back(row, static_cast<int>(s * n + i), v);
        }
        indep.push_back(!dropped);
      }
    }
  };
  switch (type) {
    case Interaction::I:
      for (Index k = 0; k < n * tt; ++k) t.emplace_back(0, static_cast<int>(k), 1.0);
      indep.push_back(true);
      row = 1;
      break;
    case Interaction::II:
      per_area();
      break;
    case Interaction::III:
      per_time({});
      break;
    case Interaction::IV:
      per_area();
      per_time(dropped_periods(temporal));
      break;
  }
  ConstraintSet cs;
  cs.rows.resize(row, n * tt);
  cs.rows.setFromTriplets(t.begin(), t.end());
  cs.independent = std::move(indep);
  return cs;
}

ConstraintSet constraints_for(Interaction type, Index n, Index periods) {
  if (n < 2 || periods < 2) fail("constraints need n, T >= 2");
  StructureMatrix spatial;
  spatial.dim = n;
  spatial.rank_deficiency = 1;
  spatial.null_basis = Matrix::Ones(n, 1);
  StructureMatrix temporal;
  temporal.dim = periods;
  temporal.rank_deficiency = 1;
  temporal.null_basis = Matrix::Ones(periods, 1);
  auto delta = interaction_constraints(spatial, temporal, type);

  const Index offset = n + periods;
  std::vector<Triplet> t;
  for (Index i = 0; i < n; ++i) t.emplace_back(0, static_cast<int>(i), 1.0);
  for (Index s = 0; s < periods; ++s) t.emplace_back(1, static_cast<int>(n + s), 1.0);
  for (Index c = 0; c < delta.rows.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(delta.rows, c); it; ++it)
      t.emplace_back(static_cast<int>(it.row() + 2), static_cast<int>(offset + it.col()), it.value());
  ConstraintSet cs;
  cs.rows.resize(delta.rows.rows() + 2, offset + n * periods);
  cs.rows.setFromTriplets(t.begin(), t.end());
  cs.independent = {true, true};
  cs.independent.insert(cs.independent.end(), delta.independent.begin(), delta.independent.end());
  return cs;
}

std::vector<int> matrix_components(const SparseMatrix &m, int *count) {
  const Index n = m.rows();
  std::vector<std::vector<Index>> adj(static_cast<std::size_t>(n));
  for (Index c = 0; c < m.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(m, c); it; ++it)
      if (it.row() != it.col() && it.value() != 0.0) adj[static_cast<std::size_t>(it.row())].push_back(it.col());
  std::vector<int> comp(static_cast<std::size_t>(n), -1);
  int k = 0;
  std::vector<Index> stack;
  for (Index s = 0; s < n; ++s) {
    if (comp[static_cast<std::size_t>(s)] >= 0) continue;
    comp[static_cast<std::size_t>(s)] = k;
    stack.push_back(s);
    while (!stack.empty()) {
      Index v = stack.back();
      stack.pop_back();
      for (Index w : adj[static_cast<std::size_t>(v)])
        if (comp[static_cast<std::size_t>(w)] < 0) {
          comp[static_cast<std::size_t>(w)] = k;
          stack.push_back(w);
        }
    }
    ++k;
  }
  if (count) *count = k;
  return comp;
}

namespace {

// Diagonal of the constrained generalized inverse (Moore-Penrose inverse) of
// one connected block. A g-inverse comes from grounding k nodes on which the
// kernel is nonsingular; projecting it onto the range gives R^+ exactly.
Vector pseudo_inverse_diagonal(const SparseMatrix &block, const Matrix &kernel_span) {
  const Index m = block.rows();
  Matrix basis(m, 0);
  if (kernel_span.cols() > 0 && kernel_span.norm() > 0.0) {
    Eigen::ColPivHouseholderQR<Matrix> qr(kernel_span);
    qr.setThreshold(1e-10);
    const Index k = qr.rank();
    basis = Matrix(qr.householderQ()).leftCols(k);
  }
  const Index k = basis.cols();
  std::vector<bool> grounded(static_cast<std::size_t>(m), false);
  if (k > 0) {
    Eigen::ColPivHouseholderQR<Matrix> piv(basis.transpose());
    for (Index r = 0; r < k; ++r) grounded[static_cast<std::size_t>(piv.colsPermutation().indices()[r])] = true;
  }
  std::vector<Index> keep;
  std::vector<Index> pos(static_cast<std::size_t>(m), -1);
  for (Index i = 0; i < m; ++i)
    if (!grounded[static_cast<std::size_t>(i)]) {
      pos[static_cast<std::size_t>(i)] = static_cast<Index>(keep.size());
      keep.push_back(i);
    }
  const Index r = static_cast<Index>(keep.size());
  std::vector<Triplet> t;
  for (Index c = 0; c < block.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(block, c); it; ++it) {
      Index pr = pos[static_cast<std::size_t>(it.row())], pc = pos[static_cast<std::size_t>(it.col())];
      if (pr >= 0 && pc >= 0) t.emplace_back(static_cast<int>(pr), static_cast<int>(pc), it.value());
    }
  SparseMatrix a(r, r);
  a.setFromTriplets(t.begin(), t.end());
  SparseCholesky chol;
  if (!chol.factorize(a)) fail("structure block is not positive definite after grounding its kernel");
  Vector g_diag = Vector::Zero(m);
  Vector sel = chol.selected_inverse().diagonal();
  for (Index j = 0; j < r; ++j) g_diag[keep[static_cast<std::size_t>(j)]] = sel[j];
  if (k == 0) return g_diag;

  Matrix nk(r, k);
  for (Index j = 0; j < r; ++j) nk.row(j) = basis.row(keep[static_cast<std::size_t>(j)]);
  Matrix y = chol.solve(nk);
  Matrix gn = Matrix::Zero(m, k);
  for (Index j = 0; j < r; ++j) gn.row(keep[static_cast<std::size_t>(j)]) = y.row(j);
  Matrix ngn = nk.transpose() * y;
  Vector d(m);
  for (Index i = 0; i < m; ++i) {
    auto ni = basis.row(i);
    d[i] = g_diag[i] - 2.0 * ni.dot(gn.row(i)) + ni * ngn * ni.transpose();
  }
  return d;
}

}  // namespace

ScaledStructure scale_structure(const StructureMatrix &r) {
  ScaledStructure out;
  out.base = r;
  int count = 0;
  auto comp = matrix_components(r.entries, &count);
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(count));
  for (Index i = 0; i < r.dim; ++i) members[static_cast<std::size_t>(comp[static_cast<std::size_t>(i)])].push_back(i);
  std::vector<double> node_factor(static_cast<std::size_t>(r.dim), 1.0);
  double log_sum = 0.0;
  Index scaled_nodes = 0;
  for (const auto &nodes : members) {
    const Index m = static_cast<Index>(nodes.size());
    std::vector<Index> pos(static_cast<std::size_t>(r.dim), -1);
    for (Index j = 0; j < m; ++j) pos[static_cast<std::size_t>(nodes[static_cast<std::size_t>(j)])] = j;
    std::vector<Triplet> t;
    for (Index j = 0; j < m; ++j) {
      Index c = nodes[static_cast<std::size_t>(j)];
      for (SparseMatrix::InnerIterator it(r.entries, c); it; ++it)
        t.emplace_back(static_cast<int>(pos[static_cast<std::size_t>(it.row())]), static_cast<int>(j), it.value());
    }
    SparseMatrix block(m, m);
    block.setFromTriplets(t.begin(), t.end());
    if (m == 1 && block.coeff(0, 0) == 0.0) {
      // Isolated node: no structured variance to scale.
      out.component_factors.push_back(1.0);
      continue;
    }
    Matrix span(m, r.null_basis.cols());
    for (Index j = 0; j < m; ++j) span.row(j) = r.null_basis.row(nodes[static_cast<std::size_t>(j)]);
    Vector d = pseudo_inverse_diagonal(block, span);
    double mean_log = d.array().log().mean();
    double factor = std::exp(mean_log);
    out.component_factors.push_back(factor);
    for (Index node : nodes) node_factor[static_cast<std::size_t>(node)] = factor;
    log_sum += mean_log * static_cast<double>(m);
    scaled_nodes += m;
  }
  out.scale_factor = scaled_nodes > 0 ? std::exp(log_sum / static_cast<double>(scaled_nodes)) : 1.0;
  out.scaled = r.entries;
  for (Index c = 0; c < out.scaled.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(out.scaled, c); it; ++it)
      it.valueRef() *= node_factor[static_cast<std::size_t>(it.row())];
  return out;
}

void write_matrix_market(std::ostream &out, const SparseMatrix &m) {
  out << "%%MatrixMarket matrix coordinate real symmetric\n";
  Index nnz = 0;
  for (Index c = 0; c < m.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(m, c); it; ++it)
      if (it.row() >= it.col()) ++nnz;
  out << m.rows() << ' ' << m.cols() << ' ' << nnz << '\n';
  for (Index c = 0; c < m.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(m, c); it; ++it)
      if (it.row() >= it.col()) out << it.row() + 1 << ' ' << it.col() + 1 << ' ' << format_double(it.value()) << '\n';
}

}  // namespace dacmap
