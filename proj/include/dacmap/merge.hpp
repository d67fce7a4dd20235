#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dacmap/inla.hpp"
#include "dacmap/lgm.hpp"
#include "dacmap/runner.hpp"

namespace dacmap {

struct InformationCriteria {
  double mean_deviance = 0.0;      // D-bar
  double deviance_of_mean = 0.0;   // D(theta-bar)
  double p_d = 0.0;
  double dic = 0.0;
  double waic = 0.0;
  double p_waic = 0.0;             // summed variance term
  int samples = 0;
};

/// Per-cell merged posterior. Cells are time-major (t * n + i) over the full map.
struct MergedResult {
  std::vector<std::string> area_ids;
  std::vector<std::string> times;
  MergeStrategy strategy = MergeStrategy::Original;
  std::vector<LatentMarginal> log_risk;
  std::vector<LatentMarginal> risk;     // change of variables from log_risk
  Vector prob_gt1;
  Vector prob_lt1;
  std::vector<int> multiplicity;        // submodels that estimated the cell
  std::vector<bool> weights_flagged;    // all CPOs were zero
  InformationCriteria ic;
  double t_run = 0.0;
  double t_merge = 0.0;

  Index n() const { return static_cast<Index>(area_ids.size()); }
  Index periods() const { return static_cast<Index>(times.size()); }
};

/// Log-risk marginal of each cell taken from the subdomain that owns it as core.
std::vector<LatentMarginal> merge_original(const std::vector<SubmodelResult> &results, const JobManifest &manifest);

/// CPO-weighted mixture of every submodel estimate of each cell. `flagged`
/// (optional) receives cells whose CPOs were all zero and got equal weights.
std::vector<LatentMarginal> merge_mixture(const std::vector<SubmodelResult> &results, const JobManifest &manifest,
                                          int points = 75, std::vector<bool> *flagged = nullptr,
                                          std::vector<int> *multiplicity = nullptr);

/// Mixture of densities given on their own grids, evaluated on a common grid
/// spanning [min 0.001-quantile, max 0.999-quantile] by monotone cubic
/// interpolation. Weights are normalized here.
LatentMarginal mix_marginals(const std::vector<const LatentMarginal *> &parts, const Vector &weights, int points);

/// Normalized CPO weights; equal weights when all are zero (`flagged` set).
Vector cpo_weights(const Vector &cpo, bool *flagged = nullptr);

/// Density of exp(X) for a log-scale marginal; moments by integration on the
/// log grid, quantiles mapped exactly.
LatentMarginal risk_scale(const LatentMarginal &log_marginal);

/// P(r > threshold), P(r < threshold) for a log-risk marginal.
std::pair<double, double> exceedance(const LatentMarginal &log_marginal, double threshold = 1.0);
void exceedance(MergedResult &m, double threshold = 1.0);

/// Monte Carlo DIC/WAIC from independent per-cell draws of the risk marginals.
/// Each cell is seeded from its (area, time) label, so results do not depend
/// on cell order. Cells with a structural zero are skipped.
InformationCriteria approximate_ic(const std::vector<LatentMarginal> &log_risk, const CountData &data, int samples,
                                   std::uint64_t seed);

/// Merge by `strategy`, then exceedance and information criteria.
MergedResult merge_results(const std::vector<SubmodelResult> &results, const JobManifest &manifest,
                           const CountData &data, MergeStrategy strategy, int points, int samples,
                           std::uint64_t seed);

/// `area_id,time,median,mean,sd,q025,q975,prob_gt1,prob_lt1` on the risk scale.
void write_merged_csv(std::ostream &out, const MergedResult &m);
nlohmann::json to_json(const MergedResult &m);
nlohmann::json to_json(const InformationCriteria &ic);

}  // namespace dacmap
