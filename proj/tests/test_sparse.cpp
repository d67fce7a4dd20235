#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "dacmap/gmrf.hpp"
#include "dacmap/simulate.hpp"
#include "dacmap/sparse.hpp"

using namespace dacmap;

namespace {

// Laplacian of a 5x5 grid plus a random positive diagonal.
SparseMatrix test_matrix(std::uint64_t seed) {
  SparseMatrix q = spatial_structure(grid_template(5, 1)).entries;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (Index i = 0; i < q.rows(); ++i) q.coeffRef(i, i) += u(rng);
  q.makeCompressed();
  return q;
}

}  // namespace

TEST(Sparse, SolveAndLogDeterminant) {
  SparseMatrix q = test_matrix(3);
  SparseCholesky chol;
  chol.analyze(q);
  ASSERT_TRUE(chol.factorize(q));
  Matrix dense(q);
  Eigen::LLT<Matrix> ref(dense);
  Vector b = Vector::LinSpaced(q.rows(), -1.0, 2.0);
  EXPECT_LT((chol.solve(b) - ref.solve(b)).norm(), 1e-10);
  double logdet = 2.0 * Matrix(ref.matrixL()).diagonal().array().log().sum();
  EXPECT_NEAR(chol.log_determinant(), logdet, 1e-10);
}

TEST(Sparse, SelectedInverseMatchesDense) {
  SparseMatrix q = test_matrix(11);
  SparseCholesky chol;
  chol.analyze(q);
  ASSERT_TRUE(chol.factorize(q));
  Matrix inv = Matrix(q).inverse();
  SelectedInverse s = chol.selected_inverse();
  EXPECT_LT((s.diagonal() - inv.diagonal()).cwiseAbs().maxCoeff(), 1e-10);
  // Every non-zero of Q lies in the factor pattern.
  for (Index c = 0; c < q.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(q, c); it; ++it) {
      ASSERT_TRUE(s.contains(it.row(), it.col()));
      EXPECT_NEAR(s(it.row(), it.col()), inv(it.row(), it.col()), 1e-10);
    }
}

TEST(Sparse, ReusesSymbolicAnalysis) {
  SparseMatrix a = test_matrix(1), b = test_matrix(2);
  SparseCholesky chol;
  chol.analyze(a);
  ASSERT_TRUE(chol.factorize(a));
  ASSERT_TRUE(chol.factorize(b));
  Eigen::LLT<Matrix> ref{Matrix(b)};
  Vector rhs = Vector::Ones(b.rows());
  EXPECT_LT((chol.solve(rhs) - ref.solve(rhs)).norm(), 1e-10);
}

TEST(Sparse, RejectsIndefinite) {
  SparseMatrix q = spatial_structure(grid_template(3, 1)).entries;
  q.coeffRef(0, 0) -= 3.0;
  SparseCholesky chol;
  chol.analyze(q);
  EXPECT_FALSE(chol.factorize(q));
}

TEST(Sparse, ForwardBackwardComposeToSolve) {
  SparseMatrix q = test_matrix(5);
  SparseCholesky chol;
  chol.analyze(q);
  ASSERT_TRUE(chol.factorize(q));
  SparseMatrix e(q.rows(), 2);
  e.insert(4, 0) = 1.0;
  e.insert(17, 1) = -2.0;
  Matrix y = Matrix(chol.forward(e));
  Matrix x = chol.backward(y);
  EXPECT_LT((x - chol.solve(Matrix(e))).norm(), 1e-10);
  // |L^-1 P e|^2 = e' Q^-1 e.
  Matrix inv = Matrix(q).inverse();
  EXPECT_NEAR(y.col(0).squaredNorm(), inv(4, 4), 1e-10);
}
