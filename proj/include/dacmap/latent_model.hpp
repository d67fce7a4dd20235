#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dacmap/core.hpp"

namespace dacmap {

enum class Family { Poisson, Gaussian };

/// One additive piece of the prior precision: coefficient(theta) * matrix.
struct PrecisionTerm {
  SparseMatrix matrix;  // full symmetric storage, latent dimension
  std::function<double(const Vector &)> coefficient;
};

/// Hyperparameter on its internal (unbounded) scale.
struct HyperParameter {
  std::string name;
  double initial = 0.0;
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
};

struct LatentBlock {
  std::string name;
  Index offset = 0;
  Index size = 0;
};

/// Latent Gaussian model as seen by the inference engine:
///   y_r | eta_r ~ family,  eta = offset + predictor * x,
///   x | theta ~ N(0, Q(theta)^-1) subject to constraints * x = 0.
struct LatentModel {
  Index dim = 0;
  std::vector<LatentBlock> blocks;
  SparseMatrix predictor;        // observations x latent, independent of theta
  Vector offset;                 // log E for Poisson
  Vector observed;
  std::vector<bool> active;      // false: the observation carries no likelihood
  Family family = Family::Poisson;
  double gaussian_precision = 1.0;

  std::vector<PrecisionTerm> terms;
  SparseMatrix constraints;      // retained rows only
  Vector jitter_mask;            // 1 on coordinates of intrinsic blocks

  std::vector<HyperParameter> hypers;
  std::function<double(const Vector &)> log_hyperprior;  // internal scale, Jacobian included
  // Optional closed form for the theta-dependent part of
  // 1/2 log|Q| + 1/2 log|C Q^-1 C'|; the engine fixes the constant numerically.
  std::function<double(const Vector &)> prior_log_scale;

  Index num_observations() const { return predictor.rows(); }
  const LatentBlock *block(const std::string &name) const {
    for (const auto &b : blocks)
      if (b.name == name) return &b;
    return nullptr;
  }
};

}  // namespace dacmap
