#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dacmap/core.hpp"
#include "dacmap/graph.hpp"

namespace dacmap {

/// Per-area relative error measures over L replicates. Cells are time-major.
struct AccuracyMetrics {
  Vector marb;      // one per area in the evaluated set
  Vector mrrmse;
  double marb_mean = 0.0;
  double mrrmse_mean = 0.0;
};

/// `estimates[l]` holds posterior medians for replicate l. `areas` restricts
/// the evaluation (empty: every area).
AccuracyMetrics marb_mrrmse(const Vector &truth, const std::vector<Vector> &estimates, Index n,
                            const std::vector<Index> &areas = {});

double interval_score(double r, double lower, double upper, double alpha = 0.05);

struct ClassificationRates {
  double p0 = 0.0;
  double tpr = 0.0;
  double tnr = 0.0;
  double fpr = 0.0;   // truly low called high, over all truly low
  double fnr = 0.0;   // truly high called low, over all truly high
  Index high = 0;     // truly high units
  Index low = 0;      // truly low units
  Index excluded = 0; // truth exactly 1
};

/// High call iff prob_gt1 > p0, low call iff prob_lt1 > p0.
ClassificationRates classification_rates(const Vector &truth, const Vector &prob_gt1, const Vector &prob_lt1,
                                         double p0, const std::vector<Index> &cells = {});

/// Merged summaries of one replicate fit.
struct ReplicateFit {
  Vector median;
  Vector q025;
  Vector q975;
  Vector prob_gt1;
  Vector prob_lt1;
};

/// Reads `area_id,time,median,...` ordered to match `area_ids` and `times`.
ReplicateFit read_merged_csv(std::istream &in, const std::vector<std::string> &area_ids,
                             const std::vector<std::string> &times);
ReplicateFit read_merged_csv_file(const std::string &path, const std::vector<std::string> &area_ids,
                                  const std::vector<std::string> &times);

struct EvalReport {
  Index n = 0;
  Index periods = 0;
  Index replicates = 0;
  bool border_only = false;
  std::vector<Index> areas;          // evaluated areas
  AccuracyMetrics accuracy;
  double interval_score = 0.0;       // mean over cells and replicates
  std::vector<ClassificationRates> rates;  // replicate averages, one per p0
};

inline const std::vector<double> kDefaultThresholds = {0.8, 0.9, 0.95};

EvalReport evaluate(const Vector &truth, const std::vector<ReplicateFit> &fits, Index n,
                    const std::vector<Index> &areas = {},
                    const std::vector<double> &thresholds = kDefaultThresholds);

/// Same metrics over the border areas of the partition of `g`.
EvalReport border_restrict(const Vector &truth, const std::vector<ReplicateFit> &fits, const AreaGraph &g,
                           const std::vector<double> &thresholds = kDefaultThresholds);

nlohmann::json to_json(const EvalReport &r);
/// One `metric,value` row per summary figure.
void write_report_csv(std::ostream &out, const EvalReport &r);
/// `area_id,marb,mrrmse` for mapping in external tools.
void write_area_csv(std::ostream &out, const EvalReport &r, const std::vector<std::string> &area_ids);

}  // namespace dacmap
