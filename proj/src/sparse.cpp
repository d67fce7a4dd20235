#include "dacmap/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dacmap {

std::ptrdiff_t SelectedInverse::find(Index row, Index col) const {
  if (row < col) std::swap(row, col);
  auto begin = row_idx_.begin() + col_ptr_[static_cast<std::size_t>(col)];
  auto end = row_idx_.begin() + col_ptr_[static_cast<std::size_t>(col) + 1];
  auto it = std::lower_bound(begin, end, static_cast<int>(row));
  if (it == end || *it != row) return -1;
  return it - row_idx_.begin();
}

bool SelectedInverse::contains(Index i, Index j) const {
  return find(perm_[static_cast<std::size_t>(i)], perm_[static_cast<std::size_t>(j)]) >= 0;
}

double SelectedInverse::operator()(Index i, Index j) const {
  auto pos = find(perm_[static_cast<std::size_t>(i)], perm_[static_cast<std::size_t>(j)]);
  if (pos < 0) throw Error(ErrorKind::Validation, "selected inverse queried outside factor pattern");
  return values_[static_cast<std::size_t>(pos)];
}

Vector SelectedInverse::diagonal() const {
  Vector d(size());
  for (Index i = 0; i < size(); ++i) {
    int p = perm_[static_cast<std::size_t>(i)];
    d[i] = values_[static_cast<std::size_t>(col_ptr_[static_cast<std::size_t>(p)])];
  }
  return d;
}

void SparseCholesky::analyze(const SparseMatrix &pattern) {
  llt_.analyzePattern(pattern);
  analyzed_ = true;
}

bool SparseCholesky::factorize(const SparseMatrix &q) {
  if (!analyzed_) analyze(q);
  llt_.factorize(q);
  return llt_.info() == Eigen::Success;
}

Vector SparseCholesky::solve(const Vector &b) const { return llt_.solve(b); }

Matrix SparseCholesky::solve(const Matrix &b) const { return llt_.solve(b); }

double SparseCholesky::log_determinant() const {
  const auto &l = llt_.matrixL().nestedExpression();
  double s = 0.0;
  for (Index j = 0; j < l.outerSize(); ++j) {
    s += std::log(l.valuePtr()[l.outerIndexPtr()[j]]);
  }
  return 2.0 * s;
}

SparseMatrix SparseCholesky::forward(const SparseMatrix &b) const {
  const Index n = b.rows();
  const auto &p = llt_.permutationP().indices();
  Vector work = Vector::Zero(n);
  std::vector<Triplet> t;
  for (Index c = 0; c < b.cols(); ++c) {
    for (SparseMatrix::InnerIterator it(b, c); it; ++it) work[p[it.row()]] = it.value();
    llt_.matrixL().solveInPlace(work);
    for (Index i = 0; i < n; ++i)
      if (work[i] != 0.0) {
        t.emplace_back(static_cast<int>(i), static_cast<int>(c), work[i]);
        work[i] = 0.0;
      }
  }
  SparseMatrix y(n, b.cols());
  y.setFromTriplets(t.begin(), t.end());
  return y;
}

Vector SparseCholesky::backward(const Vector &y) const {
  Vector z = llt_.matrixU().solve(y);
  return llt_.permutationPinv() * z;
}

Matrix SparseCholesky::backward(const Matrix &y) const {
  Matrix z = llt_.matrixU().solve(y);
  return llt_.permutationPinv() * z;
}

Index SparseCholesky::factor_nonzeros() const {
  return llt_.matrixL().nestedExpression().nonZeros();
}

SelectedInverse SparseCholesky::selected_inverse() const {
  const auto &l = llt_.matrixL().nestedExpression();
  const Index n = l.cols();
  SelectedInverse s;
  s.col_ptr_.assign(l.outerIndexPtr(), l.outerIndexPtr() + n + 1);
  s.row_idx_.assign(l.innerIndexPtr(), l.innerIndexPtr() + l.nonZeros());
  s.values_.assign(static_cast<std::size_t>(l.nonZeros()), 0.0);
  const double *lx = l.valuePtr();
  s.perm_.resize(static_cast<std::size_t>(n));
  const auto &p = llt_.permutationP().indices();
  for (Index i = 0; i < n; ++i) s.perm_[static_cast<std::size_t>(i)] = p[i];

  // Columns from last to first. For rows r_a >= r_b of column j's structure,
  // Sigma(r_a, r_b) sits in column r_b, whose sorted row list contains every
  // r_a (closure of the factor pattern), so one merge pass per r_b suffices.
  std::vector<double> tmp;
  for (Index j = n - 1; j >= 0; --j) {
    const int begin = s.col_ptr_[static_cast<std::size_t>(j)];
    const int end = s.col_ptr_[static_cast<std::size_t>(j) + 1];
    const double ljj = lx[begin];
    const int m = end - begin - 1;
    const int *rows = s.row_idx_.data() + begin + 1;
    const double *lcol = lx + begin + 1;
    tmp.assign(static_cast<std::size_t>(m), 0.0);
    for (int b = 0; b < m; ++b) {
      const int k = rows[b];
      int p = s.col_ptr_[static_cast<std::size_t>(k)];
      const int pend = s.col_ptr_[static_cast<std::size_t>(k) + 1];
      for (int a = b; a < m; ++a) {
        while (p < pend && s.row_idx_[static_cast<std::size_t>(p)] < rows[a]) ++p;
        const double v = s.values_[static_cast<std::size_t>(p)];
        if (a == b) {
          tmp[static_cast<std::size_t>(b)] += lcol[b] * v;
        } else {
          tmp[static_cast<std::size_t>(a)] += lcol[b] * v;
          tmp[static_cast<std::size_t>(b)] += lcol[a] * v;
        }
      }
    }
    double diag = 1.0 / (ljj * ljj);
    for (int a = 0; a < m; ++a) {
      const double v = -tmp[static_cast<std::size_t>(a)] / ljj;
      s.values_[static_cast<std::size_t>(begin + 1 + a)] = v;
      diag -= lcol[a] * v / ljj;
    }
    s.values_[static_cast<std::size_t>(begin)] = diag;
  }
  return s;
}

}  // namespace dacmap
