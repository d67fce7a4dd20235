#include <cmath>
#include <sstream>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "dacmap/gmrf.hpp"
#include "dacmap/simulate.hpp"
#include "oracle.hpp"

using namespace dacmap;

namespace {

AreaGraph path(int n) {
  std::vector<std::string> ids;
  std::vector<Edge> edges;
  for (int i = 0; i < n; ++i) ids.push_back("p" + std::to_string(i));
  for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
  return AreaGraph(ids, edges);
}

double max_abs_diff(const SparseMatrix &a, const Matrix &b) { return (Matrix(a) - b).cwiseAbs().maxCoeff(); }

// Null space of a symmetric matrix by SVD.
Matrix null_space(const Matrix &m) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullV);
  const Index rank = oracle::symmetric_rank(m);
  return svd.matrixV().rightCols(m.cols() - rank);
}

// Residual of projecting `v` onto the column space of `basis`.
double outside_span(const Matrix &basis, const Vector &v) {
  Vector coef = basis.colPivHouseholderQr().solve(v);
  return (basis * coef - v).norm();
}

}  // namespace

TEST(Gmrf, PathLaplacian) {
  StructureMatrix r = spatial_structure(path(3));
  Matrix expected(3, 3);
  expected << 1, -1, 0, -1, 2, -1, 0, -1, 1;
  EXPECT_LT(max_abs_diff(r.entries, expected), 1e-15);
  EXPECT_EQ(r.rank_deficiency, 1);
}

TEST(Gmrf, DisconnectedDyads) {
  AreaGraph g({"a", "b", "c", "d"}, {{0, 1}, {2, 3}});
  StructureMatrix r = spatial_structure(g);
  EXPECT_EQ(r.rank_deficiency, 2);
  EXPECT_EQ(r.null_basis.cols(), 2);
  EXPECT_LT((Matrix(r.entries) * r.null_basis).norm(), 1e-12);
}

TEST(Gmrf, GridRankAndKernel) {
  AreaGraph g = grid_template(4, 1);
  StructureMatrix r = spatial_structure(g);
  Matrix dense = oracle::dense_laplacian(g);
  EXPECT_LT(max_abs_diff(r.entries, dense), 1e-15);
  EXPECT_EQ(oracle::symmetric_rank(dense), 15);
  Matrix kernel = null_space(dense);
  ASSERT_EQ(kernel.cols(), 1);
  EXPECT_LT(outside_span(kernel, Vector::Ones(16)), 1e-10);
}

TEST(Gmrf, RandomWalkEntries) {
  Matrix rw1(3, 3);
  rw1 << 1, -1, 0, -1, 2, -1, 0, -1, 1;
  EXPECT_LT(max_abs_diff(rw_structure(3, 1).entries, rw1), 1e-15);

  Matrix rw2(4, 4);
  rw2 << 1, -2, 1, 0, -2, 5, -4, 1, 1, -4, 5, -2, 0, 1, -2, 1;
  EXPECT_LT(max_abs_diff(rw_structure(4, 2).entries, rw2), 1e-15);
}

TEST(Gmrf, RandomWalkKernels) {
  for (Index t = 3; t <= 9; ++t) {
    StructureMatrix r1 = rw_structure(t, 1);
    Matrix k1 = null_space(oracle::dense_rw(t, 1));
    ASSERT_EQ(k1.cols(), 1);
    EXPECT_EQ(r1.rank_deficiency, 1);
    EXPECT_LT(outside_span(k1, Vector::Ones(t)), 1e-10);

    StructureMatrix r2 = rw_structure(t, 2);
    Matrix k2 = null_space(oracle::dense_rw(t, 2));
    ASSERT_EQ(k2.cols(), 2);
    EXPECT_EQ(r2.rank_deficiency, 2);
    EXPECT_LT(outside_span(k2, Vector::Ones(t)), 1e-10);
    EXPECT_LT(outside_span(k2, Vector::LinSpaced(t, 1, static_cast<double>(t))), 1e-10);
    // The reported basis spans the same space.
    EXPECT_LT((Matrix(r2.entries) * r2.null_basis).norm(), 1e-10);
  }
}

TEST(Gmrf, InteractionTypes) {
  StructureMatrix s3 = spatial_structure(path(3));
  StructureMatrix t2 = rw_structure(2, 1);
  StructureMatrix one = interaction_structure(s3, t2, Interaction::I);
  EXPECT_LT(max_abs_diff(one.entries, Matrix::Identity(6, 6)), 1e-15);
  EXPECT_EQ(one.rank_deficiency, 0);

  AreaGraph g10 = grid_template(5, 1).induced(std::vector<Index>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  StructureMatrix iv = interaction_structure(spatial_structure(g10), rw_structure(5, 1), Interaction::IV);
  EXPECT_EQ(iv.rank_deficiency, 14);
  EXPECT_EQ(oracle::symmetric_rank(Matrix(iv.entries)), 36);

  StructureMatrix t3 = rw_structure(3, 1);
  StructureMatrix ii = interaction_structure(s3, t3, Interaction::II);
  Matrix expected = oracle::kron(oracle::dense_rw(3, 1), Matrix::Identity(3, 3));
  EXPECT_LT(max_abs_diff(ii.entries, expected), 1e-15);
  StructureMatrix iii = interaction_structure(s3, t3, Interaction::III);
  EXPECT_LT(max_abs_diff(iii.entries, oracle::kron(Matrix::Identity(3, 3), oracle::dense_laplacian(path(3)))), 1e-15);
}

TEST(Gmrf, ScaleFactorMatchesPseudoInverse) {
  StructureMatrix r = spatial_structure(path(3));
  ScaledStructure s = scale_structure(r);
  Matrix pinv = Matrix(r.entries).completeOrthogonalDecomposition().pseudoInverse();
  double geo = std::exp(pinv.diagonal().array().log().mean());
  EXPECT_NEAR(s.scale_factor, geo, 1e-10);
  EXPECT_LT(max_abs_diff(s.scaled, geo * Matrix(r.entries)), 1e-12);

  // Scaling a scaled matrix changes nothing.
  StructureMatrix again = r;
  again.entries = s.scaled;
  EXPECT_NEAR(scale_structure(again).scale_factor, 1.0, 1e-6);

  StructureMatrix id;
  id.dim = 4;
  id.entries = SparseMatrix(Matrix::Identity(4, 4).sparseView());
  id.null_basis = Matrix(4, 0);
  EXPECT_NEAR(scale_structure(id).scale_factor, 1.0, 1e-12);
}

TEST(Gmrf, ScalingIsPerComponent) {
  AreaGraph g({"a", "b", "c", "d", "e"}, {{0, 1}, {1, 2}, {3, 4}});
  ScaledStructure s = scale_structure(spatial_structure(g));
  ASSERT_EQ(s.component_factors.size(), 2u);
  Matrix pinv = Matrix(spatial_structure(path(2)).entries).completeOrthogonalDecomposition().pseudoInverse();
  EXPECT_NEAR(s.component_factors[1], std::exp(pinv.diagonal().array().log().mean()), 1e-10);
}

TEST(Gmrf, ConstraintCounts) {
  EXPECT_EQ(constraints_for(Interaction::I, 4, 3).retained_count(), 3);  // includes the grand sum over delta
  EXPECT_EQ(constraints_for(Interaction::II, 4, 3).retained_count(), 4 + 2);
  EXPECT_EQ(constraints_for(Interaction::III, 4, 3).retained_count(), 3 + 2);
  EXPECT_EQ(constraints_for(Interaction::IV, 4, 3).retained_count(), 4 + 3 + 1);

  ConstraintSet iv = interaction_constraints(spatial_structure(path(3)), rw_structure(3, 1), Interaction::IV);
  EXPECT_EQ(iv.rows.rows(), 6);
  EXPECT_EQ(oracle::qr_rank(Matrix(iv.rows)), 5);
  EXPECT_EQ(iv.retained_count(), 5);
}

TEST(Gmrf, TypeTwoRowsSumOverTime) {
  ConstraintSet c = interaction_constraints(spatial_structure(path(2)), rw_structure(4, 1), Interaction::II);
  Matrix rows = Matrix(c.retained());
  ASSERT_EQ(rows.rows(), 2);
  for (Index r = 0; r < 2; ++r) {
    // Indicator of area i over every t (delta index t * n + i), up to scale.
    Vector v = rows.row(r).transpose();
    Index area = -1;
    for (Index k = 0; k < v.size(); ++k)
      if (std::abs(v[k]) > 1e-12) {
        if (area < 0) area = k % 2;
        EXPECT_EQ(k % 2, area);
        EXPECT_NEAR(v[k], v[area], 1e-12);
      }
    EXPECT_NEAR((v.array() != 0.0).count(), 4, 0);
  }
}

TEST(Gmrf, MatrixMarket) {
  std::ostringstream out;
  write_matrix_market(out, rw_structure(3, 1).entries);
  EXPECT_EQ(out.str().rfind("%%MatrixMarket", 0), 0u);
}

TEST(Gmrf, RetainedRowsMatchKernelDimension) {
  for (int n = 2; n <= 6; ++n)
    for (Index t = 2; t <= 6; ++t) {
      StructureMatrix s = spatial_structure(path(n)), tm = rw_structure(t, 1);
      for (Interaction type : {Interaction::II, Interaction::III, Interaction::IV}) {
        StructureMatrix r = interaction_structure(s, tm, type);
        ConstraintSet c = interaction_constraints(s, tm, type);
        Index kernel = r.dim - oracle::symmetric_rank(Matrix(r.entries));
        EXPECT_EQ(c.retained_count(), kernel) << n << "x" << t << " type " << to_string(type);
        EXPECT_EQ(oracle::qr_rank(Matrix(c.retained())), c.retained_count());
      }
      EXPECT_EQ(constraints_for(Interaction::IV, n, t).retained_count(), n + t + 1);
    }
}
