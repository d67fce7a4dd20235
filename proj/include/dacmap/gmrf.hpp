#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dacmap/core.hpp"
#include "dacmap/graph.hpp"

namespace dacmap {

enum class Interaction { I = 1, II = 2, III = 3, IV = 4 };

std::string to_string(Interaction type);
Interaction parse_interaction(const std::string &text);

/// Symmetric positive-semidefinite precision structure together with a
/// basis of its kernel (columns of `null_basis`, not necessarily orthonormal).
struct StructureMatrix {
  Index dim = 0;
  SparseMatrix entries;  // full (both triangles) storage
  Index rank_deficiency = 0;
  Matrix null_basis;
};

/// Scaled structure: the constrained generalized inverse of `scaled` has
/// geometric-mean marginal variance one (per connected block).
struct ScaledStructure {
  StructureMatrix base;
  double scale_factor = 1.0;               // geometric mean over all scaled nodes
  std::vector<double> component_factors;   // one per connected block of `base`
  SparseMatrix scaled;
};

/// Sum-to-zero style constraint rows over a block-local coordinate system.
/// `rows` keeps every candidate row; `independent[r]` is false for rows
/// dropped as linearly redundant.
struct ConstraintSet {
  SparseMatrix rows;
  std::vector<bool> independent;

  Index retained_count() const;
  SparseMatrix retained() const;
};

StructureMatrix spatial_structure(const AreaGraph &g);
StructureMatrix rw_structure(Index periods, int order);
/// Kronecker structure of the interaction in (time-major, area-minor) order:
/// delta index = t * n + i.
StructureMatrix interaction_structure(const StructureMatrix &spatial,
                                      const StructureMatrix &temporal,
                                      Interaction type);
ScaledStructure scale_structure(const StructureMatrix &r);

/// Constraints over the stacked coordinates [xi (n) | gamma (T) | delta (nT)]
/// for a connected graph and an RW1 temporal prior.
ConstraintSet constraints_for(Interaction type, Index n, Index periods);

/// Interaction rows built from the spatial and temporal kernels (any number
/// of components, RW1 or RW2). Returned over delta coordinates only (nT).
ConstraintSet interaction_constraints(const StructureMatrix &spatial,
                                      const StructureMatrix &temporal,
                                      Interaction type);

/// Connected blocks of a symmetric sparse matrix (by its nonzero pattern).
std::vector<int> matrix_components(const SparseMatrix &m, int *count);

void write_matrix_market(std::ostream &out, const SparseMatrix &m);

}  // namespace dacmap
