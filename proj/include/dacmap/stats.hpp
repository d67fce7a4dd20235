#pragma once

#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "dacmap/core.hpp"

namespace dacmap {

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double poisson_logpmf(double o, double mu) {
  if (mu <= 0.0) return o == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
  return o * std::log(mu) - mu - std::lgamma(o + 1.0);
}

/// Gauss-Hermite rule for the weight exp(-x^2) (Golub-Welsch).
struct GaussHermite {
  Vector nodes;
  Vector weights;
};

inline GaussHermite gauss_hermite(int n) {
  if (n < 1) fail("Gauss-Hermite needs at least one node");
  Matrix j = Matrix::Zero(n, n);
  for (int i = 1; i < n; ++i) j(i, i - 1) = j(i - 1, i) = std::sqrt(i / 2.0);
  Eigen::SelfAdjointEigenSolver<Matrix> es(j);
  GaussHermite gh;
  gh.nodes = es.eigenvalues();
  gh.weights = std::sqrt(std::numbers::pi) * es.eigenvectors().row(0).transpose().array().square();
  return gh;
}

/// E f(Z) for Z ~ N(mean, sd^2) with a Gauss-Hermite rule.
template <class F>
double normal_expectation(const GaussHermite &gh, double mean, double sd, F &&f) {
  double s = 0.0;
  for (Index k = 0; k < gh.nodes.size(); ++k)
    s += gh.weights[k] * f(mean + std::numbers::sqrt2 * sd * gh.nodes[k]);
  return s / std::sqrt(std::numbers::pi);
}

inline double log_sum_exp(const Vector &v) {
  double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace dacmap
