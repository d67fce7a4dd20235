#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dacmap/gmrf.hpp"
#include "dacmap/graph.hpp"
#include "dacmap/latent_model.hpp"

namespace dacmap {

/// Observed and expected counts on the complete area x time grid, stored
/// time-major: cell index = t * n + i.
struct CountData {
  std::vector<std::string> area_ids;
  std::vector<std::string> times;
  Vector observed;
  Vector expected;
  std::vector<bool> structural_zero;  // expected was 0 on input

  Index n() const { return static_cast<Index>(area_ids.size()); }
  Index periods() const { return static_cast<Index>(times.size()); }
  Index cell(Index i, Index t) const { return t * n() + i; }

  /// Rows for `areas` (indices into area_ids) in the given order.
  CountData subset(const std::vector<Index> &areas) const;
  /// Rows reordered to follow `g`'s area order; every graph area must be present.
  CountData aligned_to(const AreaGraph &g) const;
};

inline constexpr double kZeroExpected = 1e-8;

/// Population and observed counts by stratum, one row per (i, t) cell.
struct StrataTable {
  Matrix population;  // cells x strata
  Matrix observed;    // cells x strata
};

/// Indirect (internal) standardization: E_c = sum_j N_cj * O_j / N_j.
Vector expected_cases(const StrataTable &table);

/// Reads `area_id,time,observed,expected` or
/// `area_id,time,observed,population,stratum` (the latter standardized).
CountData read_counts(std::istream &in);
CountData read_counts_file(const std::string &path);
void write_counts(std::ostream &out, const CountData &data);

enum class SdPrior { Uniform, PenalizedComplexity };

struct HyperPriorSpec {
  SdPrior sd_prior = SdPrior::Uniform;
  double pc_u = 1.0;       // P(sd > u) = alpha for the PC alternative
  double pc_alpha = 0.01;
  double intercept_precision = 0.001;
  double log_tau_min = -12.0;
  double log_tau_max = 12.0;
};

struct PriorSpec {
  int temporal_order = 1;
  Interaction interaction = Interaction::IV;
  HyperPriorSpec hyper;
};

/// Natural-scale hyperparameters of the space-time model.
struct Hyper {
  double tau_spatial = 1.0;
  double lambda = 0.5;
  double tau_temporal = 1.0;
  double tau_interaction = 1.0;
};

Vector to_internal(const Hyper &h);
Hyper to_natural(const Vector &theta);

/// Space-time model ready for inference. Latent ordering:
/// (alpha, xi_1..xi_n, u_1..u_n, gamma_1..gamma_T, delta_11..delta_nT), delta
/// time-major. xi is the BYM2 field, u its scaled structured component.
struct SpaceTimeModel {
  LatentModel model;
  Index n = 0;
  Index periods = 0;
  Interaction interaction = Interaction::IV;
  ScaledStructure spatial;
  ScaledStructure temporal;
  StructureMatrix interaction_structure;
  Index structural_zeros = 0;
};

SpaceTimeModel build_model(const AreaGraph &g, const CountData &data, const PriorSpec &spec);

/// Q(theta) without any numerical jitter. Throws for theta outside the
/// admissible region (non-finite, or precisions outside the truncation).
SparseMatrix joint_precision(const SpaceTimeModel &m, const Vector &theta);
SparseMatrix joint_precision(const SpaceTimeModel &m, const Hyper &h);

}  // namespace dacmap
