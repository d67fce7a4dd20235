#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dacmap/gmrf.hpp"
#include "dacmap/graph.hpp"
#include "dacmap/lgm.hpp"

namespace dacmap {

inline constexpr const char *kGeneratorVersion = "dacmap-sim/1";

/// side x side rook grid with cell-centre coordinates, partitioned into
/// blocks_per_side^2 equal square subdomains.
AreaGraph grid_template(int side, int blocks_per_side);

struct VarianceShares {
  double spatial = 0.70;
  double temporal = 0.05;
  double interaction = 0.25;
};

/// Log-risk surface on the time-major (t * n + i) cell grid.
struct RiskSurface {
  Index n = 0;
  Index periods = 0;
  Vector log_risk;

  Vector risk() const { return log_risk.array().exp(); }
};

/// Smooth log-risk: centred spatial, centred temporal and doubly centred
/// space-time components built from low-order cosine bases, rescaled so
/// their empirical variances are exactly shares * total_sd^2.
RiskSurface smooth_surface(const AreaGraph &g, Index periods, const VarianceShares &shares,
                           std::uint64_t seed, double total_sd = 0.3);

struct GmrfTaus {
  double spatial = 1.0;
  double temporal = 1.0;
  double interaction = 1.0;
};

/// Sum of constrained samples from the scaled CAR, RW1 and interaction
/// priors (alpha = 0). Samples are orthogonal to each kernel.
RiskSurface gmrf_surface(const AreaGraph &g, Index periods, const GmrfTaus &taus, Interaction type,
                         std::uint64_t seed);

/// Independent Poisson(E * r) draws on a complete grid.
CountData sample_counts(const AreaGraph &g, const std::vector<std::string> &times, const Vector &risk,
                        const Vector &expected, std::uint64_t seed);

std::vector<std::string> default_times(Index periods);

void write_truth(std::ostream &out, const AreaGraph &g, const std::vector<std::string> &times, const Vector &risk);
/// Reads `area_id,time,risk`, ordered to match `g` and `times`.
Vector read_truth(std::istream &in, const AreaGraph &g, const std::vector<std::string> &times);

}  // namespace dacmap
