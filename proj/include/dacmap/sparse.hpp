#pragma once

#include <vector>

#include <Eigen/SparseCholesky>

#include "dacmap/core.hpp"

namespace dacmap {

/// Entries of Q^{-1} on the sparsity pattern of the Cholesky factor of Q
/// (Takahashi recursion). Indices are in the caller's original ordering.
class SelectedInverse {
 public:
  SelectedInverse() = default;

  Index size() const { return static_cast<Index>(perm_.size()); }
  /// Q^{-1}(i, j); (i, j) must lie in the factor pattern.
  double operator()(Index i, Index j) const;
  bool contains(Index i, Index j) const;
  Vector diagonal() const;

 private:
  friend class SparseCholesky;
  std::ptrdiff_t find(Index row, Index col) const;  // permuted coordinates

  std::vector<int> perm_;             // original -> permuted
  std::vector<int> col_ptr_;
  std::vector<int> row_idx_;
  std::vector<double> values_;
};

/// Sparse LL^T with a fill-reducing ordering; the symbolic analysis is reused
/// across numeric factorizations of matrices sharing one pattern.
class SparseCholesky {
 public:
  void analyze(const SparseMatrix &pattern);
  bool analyzed() const { return analyzed_; }
  /// Returns false if the matrix is not numerically positive definite.
  bool factorize(const SparseMatrix &q);
  Vector solve(const Vector &b) const;
  Matrix solve(const Matrix &b) const;
  double log_determinant() const;
  SelectedInverse selected_inverse() const;
  /// L^{-1} P b for sparse b; the forward substitution touches only the
  /// elimination-tree reach of each column.
  SparseMatrix forward(const SparseMatrix &b) const;
  /// P^T L^{-T} y, the second half of a solve.
  Vector backward(const Vector &y) const;
  Matrix backward(const Matrix &y) const;
  /// Non-zeros of the factor (diagnostics and memory estimates).
  Index factor_nonzeros() const;

 private:
  Eigen::SimplicialLLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>> llt_;
  bool analyzed_ = false;
};

}  // namespace dacmap
