#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <nlohmann/json_fwd.hpp>

#include "dacmap/latent_model.hpp"
#include "dacmap/sparse.hpp"

namespace dacmap {

struct EngineOptions {
  double jitter = 1e-7;        // relative diagonal jitter on intrinsic blocks
  int max_newton = 50;
  double newton_tol = 1e-6;    // projected gradient, sup norm
  int grid_points = 5;         // per hyperparameter axis (odd)
  double grid_step = 1.0;      // in standardized units
  double prune_drop = 6.0;     // nats below the mode
  int marginal_points = 75;
  int gh_nodes = 21;
  // Units whose relative importance ESS falls below this are recomputed with
  // exact held-out approximations at each grid point; 0 disables.
  double cpo_refit_ess = 0.5;
  int bfgs_max_iter = 100;
  double bfgs_tol = 1e-3;
  double fd_step = 1e-2;
  double hessian_step = 5e-2;
  double max_hyper_sd = 3.0;   // cap on the standardized axis length
  std::optional<Vector> fixed_theta;  // skip exploration
  std::chrono::steady_clock::time_point deadline = std::chrono::steady_clock::time_point::max();
};

/// Gaussian approximation of p(x | y, theta) at its constrained mode.
struct GaussianApprox {
  Vector theta;
  Vector mode;          // x*
  Vector eta;           // predictor * x* (log-risk, no offset)
  Vector curvature;     // c_r: minus second derivative of the log-likelihood
  double log_likelihood = 0.0;  // Laplace estimate of log p(y | theta)
  double log_posterior = 0.0;   // plus log p(theta)
  int iterations = 0;
  double gradient_norm = 0.0;
  bool converged = false;
};

struct HyperGrid {
  std::vector<Vector> points;   // internal scale
  Vector log_posterior;
  Vector weights;               // sum to one
  Index mode_index = 0;
  Vector mode;
  Matrix axes;                  // theta = mode + axes * z
  double log_cell_volume = 0.0;
  int evaluations = 0;
  int optimizer_iterations = 0;
};

struct LatentMarginal {
  Vector x;
  Vector density;
  double mean = 0.0;
  double sd = 0.0;
  double q025 = 0.0;
  double q50 = 0.0;
  double q975 = 0.0;

  /// Density as a Gaussian mixture summarized on `points` equally spaced
  /// abscissae over mean +/- 5 sd.
  static LatentMarginal from_mixture(const Vector &weights, const Vector &means,
                                     const Vector &sds, int points);
  /// Density given on a grid; summaries by trapezoid integration.
  static LatentMarginal from_grid(Vector x, Vector density);
  double cdf(double v) const;        // piecewise-linear density
  double quantile(double p) const;
  /// Same, reusing cumulative() for repeated draws.
  double quantile(double p, const Vector &cum) const;
  Vector cumulative() const;         // mass up to each grid point
  double value(double v) const;      // interpolated density
};

struct HyperSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double q025 = 0.0;
  double q50 = 0.0;
  double q975 = 0.0;
};

struct FitResult {
  std::vector<LatentMarginal> eta;   // per observation, log-risk scale
  Vector cpo;
  std::vector<bool> cpo_flagged;     // overflow or no likelihood
  Vector fitted;                     // posterior mean of the risk
  Vector deviance;                   // posterior mean of -2 log p(O | eta), per unit
  std::vector<HyperSummary> hypers;
  double alpha_mean = 0.0;           // intercept, when the model has one
  double alpha_sd = 0.0;
  double log_marginal_likelihood = 0.0;
  HyperGrid grid;
  int newton_iterations = 0;
  double seconds = 0.0;
};

/// Inference for one model. Keeps the symbolic factorizations and a warm
/// start; not safe for concurrent use.
class InlaEngine {
 public:
  explicit InlaEngine(const LatentModel &model, EngineOptions options = {});

  GaussianApprox gaussian_approx(const Vector &theta);
  HyperGrid explore_hyper();
  /// Per-observation marginals; also fills CPO, fitted values and deviance.
  FitResult summarize(const HyperGrid &grid);
  FitResult fit();

  const LatentModel &model() const { return model_; }
  int total_newton_iterations() const { return newton_total_; }

 private:
  struct PointDetail {
    GaussianApprox ga;
    Vector eta_var;
    double alpha_var = 0.0;
  };
  SparseMatrix prior_precision(const Vector &theta) const;
  double log_lik(const Vector &eta_full) const;
  Vector log_lik_gradient(const Vector &eta_full) const;
  Vector log_lik_curvature(const Vector &eta_full) const;
  double projected_norm(const Vector &g) const;
  double eta_variance(Index r) const;  // after the last approximation
  void refit_cpo(const HyperGrid &grid, const std::vector<Index> &units, FitResult &res);
  PointDetail detail(const Vector &theta);
  double eval_log_posterior(const Vector &theta);
  bool in_bounds(const Vector &theta) const;
  void check_deadline() const;

  const LatentModel &model_;
  EngineOptions opt_;
  Index k_ = 0;
  SparseMatrix pattern_zero_prior_;
  SparseMatrix pattern_zero_post_;
  SparseMatrix jitter_diag_mask_;
  SparseMatrix constraints_t_;
  Eigen::LLT<Matrix> cct_;
  SparseCholesky prior_chol_;
  SparseCholesky post_chol_;
  Vector warm_;
  int newton_total_ = 0;
  double prior_normalizer(const Vector &theta, const SparseMatrix &q);
  // Constraint state of the last posterior factorization: Y = L^-1 P C',
  // M = C Q*^-1 C' = Y'Y.
  SparseMatrix last_y_;
  Eigen::LLT<Matrix> last_m_;
  bool calibrated_ = false;
  double prior_const_ = 0.0;
  std::vector<PointDetail> cache_;  // aligned with the last explored grid
};

GaussianApprox gaussian_approx(const LatentModel &m, const Vector &theta, const EngineOptions &opt = {});
HyperGrid explore_hyper(const LatentModel &m, const EngineOptions &opt = {});
std::vector<LatentMarginal> latent_marginals(const LatentModel &m, const HyperGrid &grid,
                                             const EngineOptions &opt = {});
Vector compute_cpo(const LatentModel &m, const HyperGrid &grid, const EngineOptions &opt = {});
double log_marginal_likelihood(const HyperGrid &grid);
FitResult fit(const LatentModel &m, const EngineOptions &opt = {});

nlohmann::json to_json(const LatentMarginal &m);
LatentMarginal marginal_from_json(const nlohmann::json &j);
nlohmann::json to_json(const FitResult &r);
FitResult fit_result_from_json(const nlohmann::json &j);

}  // namespace dacmap
