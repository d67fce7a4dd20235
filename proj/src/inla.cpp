#include "dacmap/inla.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "dacmap/stats.hpp"

namespace dacmap {

namespace {

constexpr double kMinCpo = 1e-300;

Vector linspace(double a, double b, int n) {
  Vector x(n);
  for (int i = 0; i < n; ++i) x[i] = n == 1 ? a : a + (b - a) * i / (n - 1);
  return x;
}

double trapezoid(const Vector &x, const Vector &f) {
  double s = 0.0;
  for (Index i = 1; i < x.size(); ++i) s += 0.5 * (f[i] + f[i - 1]) * (x[i] - x[i - 1]);
  return s;
}

double mixture_cdf(const Vector &w, const Vector &mu, const Vector &sd, double v) {
  double s = 0.0;
  for (Index k = 0; k < w.size(); ++k) s += w[k] * normal_cdf((v - mu[k]) / sd[k]);
  return s;
}

double mixture_pdf(const Vector &w, const Vector &mu, const Vector &sd, double v) {
  double s = 0.0;
  for (Index k = 0; k < w.size(); ++k) s += w[k] * normal_pdf((v - mu[k]) / sd[k]) / sd[k];
  return s;
}

double mixture_quantile(const Vector &w, const Vector &mu, const Vector &sd, double p) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (Index k = 0; k < w.size(); ++k) {
    lo = std::min(lo, mu[k] - 10.0 * sd[k]);
    hi = std::max(hi, mu[k] + 10.0 * sd[k]);
  }
  // Safeguarded Newton on the CDF.
  double x = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    double f = mixture_cdf(w, mu, sd, x) - p;
    if (f > 0) hi = x; else lo = x;
    double d = mixture_pdf(w, mu, sd, x);
    double xn = d > 0 ? x - f / d : 0.5 * (lo + hi);
    if (!(xn > lo && xn < hi)) xn = 0.5 * (lo + hi);
    if (std::abs(xn - x) <= 1e-13 * (1.0 + std::abs(x)) || hi - lo <= 1e-13 * (1.0 + std::abs(x))) return xn;
    x = xn;
  }
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// LatentMarginal

LatentMarginal LatentMarginal::from_mixture(const Vector &weights, const Vector &means, const Vector &sds,
                                            int points) {
  LatentMarginal m;
  const double total = weights.sum();
  Vector w = weights / total;
  m.mean = w.dot(means);
  double second = (w.array() * (sds.array().square() + means.array().square())).sum();
  m.sd = std::sqrt(std::max(second - m.mean * m.mean, 0.0));
  double half = 5.0 * std::max(m.sd, 1e-12);
  m.x = linspace(m.mean - half, m.mean + half, points);
  m.density.resize(points);
  for (int i = 0; i < points; ++i) m.density[i] = mixture_pdf(w, means, sds, m.x[i]);
  double z = trapezoid(m.x, m.density);
  if (z > 0) m.density /= z;
  m.q025 = mixture_quantile(w, means, sds, 0.025);
  m.q50 = mixture_quantile(w, means, sds, 0.5);
  m.q975 = mixture_quantile(w, means, sds, 0.975);
  return m;
}

LatentMarginal LatentMarginal::from_grid(Vector x, Vector density) {
  if (x.size() < 2 || x.size() != density.size()) fail("marginal grid needs at least two matching points");
  LatentMarginal m;
  m.x = std::move(x);
  m.density = density.cwiseMax(0.0);
  double z = trapezoid(m.x, m.density);
  if (!(z > 0)) fail("marginal density has zero mass");
  m.density /= z;
  m.mean = trapezoid(m.x, m.x.cwiseProduct(m.density));
  Vector c = (m.x.array() - m.mean).square().matrix();
  m.sd = std::sqrt(std::max(trapezoid(m.x, c.cwiseProduct(m.density)), 0.0));
  m.q025 = m.quantile(0.025);
  m.q50 = m.quantile(0.5);
  m.q975 = m.quantile(0.975);
  return m;
}

double LatentMarginal::value(double v) const {
  if (v <= x[0] || v >= x[x.size() - 1]) return 0.0;
  auto it = std::upper_bound(x.data(), x.data() + x.size(), v);
  Index i = (it - x.data()) - 1;
  double t = (v - x[i]) / (x[i + 1] - x[i]);
  return (1 - t) * density[i] + t * density[i + 1];
}

double LatentMarginal::cdf(double v) const {
  const Index n = x.size();
  if (v <= x[0]) return 0.0;
  double s = 0.0;
  for (Index i = 1; i < n; ++i) {
    if (v >= x[i]) {
      s += 0.5 * (density[i] + density[i - 1]) * (x[i] - x[i - 1]);
      continue;
    }
    double h = v - x[i - 1];
    double slope = (density[i] - density[i - 1]) / (x[i] - x[i - 1]);
    s += density[i - 1] * h + 0.5 * slope * h * h;
    return std::min(s, 1.0);
  }
  return std::min(s, 1.0);
}

Vector LatentMarginal::cumulative() const {
  Vector c(x.size());
  c[0] = 0.0;
  for (Index i = 1; i < x.size(); ++i) c[i] = c[i - 1] + 0.5 * (density[i] + density[i - 1]) * (x[i] - x[i - 1]);
  return c;
}

double LatentMarginal::quantile(double p) const { return quantile(p, cumulative()); }

double LatentMarginal::quantile(double p, const Vector &cum) const {
  const Index n = x.size();
  if (p <= 0.0) return x[0];
  if (p >= cum[n - 1]) return x[n - 1];
  Index i = std::upper_bound(cum.data(), cum.data() + n, p) - cum.data();
  // Solve d0 h + s h^2 / 2 = r on segment [x[i-1], x[i]].
  double w = x[i] - x[i - 1];
  double d0 = density[i - 1];
  double s = (density[i] - d0) / w;
  double r = p - cum[i - 1];
  double disc = std::max(d0 * d0 + 2.0 * s * r, 0.0);
  double den = d0 + std::sqrt(disc);
  double h = den > 0 ? 2.0 * r / den : 0.0;
  return x[i - 1] + std::clamp(h, 0.0, w);
}

// ---------------------------------------------------------------------------
// Engine

InlaEngine::InlaEngine(const LatentModel &model, EngineOptions options) : model_(model), opt_(std::move(options)) {
  const Index d = model_.dim;
  if (model_.predictor.cols() != d) fail("predictor has wrong latent dimension");
  if (model_.observed.size() != model_.num_observations() || model_.offset.size() != model_.num_observations())
    fail("observation vectors do not match the predictor");
  if (static_cast<Index>(model_.active.size()) != model_.num_observations()) fail("active mask has wrong length");

  SparseMatrix pat(d, d);
  for (const auto &t : model_.terms) {
    if (t.matrix.rows() != d || t.matrix.cols() != d) fail("precision term has wrong dimension");
    pat += t.matrix.cwiseAbs();
  }
  SparseMatrix eye(d, d);
  eye.setIdentity();
  pat += eye;
  pattern_zero_prior_ = 0.0 * pat;
  SparseMatrix ata = SparseMatrix(model_.predictor.transpose()) * model_.predictor;
  pattern_zero_post_ = pattern_zero_prior_ + 0.0 * ata.cwiseAbs();

  Vector mask = model_.jitter_mask.size() == d ? model_.jitter_mask : Vector::Zero(d);
  jitter_diag_mask_ = SparseMatrix(d, d);
  std::vector<Triplet> tj;
  for (Index i = 0; i < d; ++i) tj.emplace_back(static_cast<int>(i), static_cast<int>(i), mask[i]);
  jitter_diag_mask_.setFromTriplets(tj.begin(), tj.end());

  k_ = model_.constraints.rows();
  if (k_ > 0) {
    if (model_.constraints.cols() != d) fail("constraint matrix has wrong dimension");
    constraints_t_ = model_.constraints.transpose();
    Matrix cct = Matrix(model_.constraints * constraints_t_);
    cct_.compute(cct);
    if (cct_.info() != Eigen::Success) fail("constraint rows are linearly dependent");
  }
  prior_chol_.analyze(pattern_zero_prior_);
  post_chol_.analyze(pattern_zero_post_);
  warm_ = Vector::Zero(d);
}

void InlaEngine::check_deadline() const {
  if (std::chrono::steady_clock::now() > opt_.deadline) throw Error(ErrorKind::Budget, "time budget exceeded");
}

bool InlaEngine::in_bounds(const Vector &theta) const {
  for (Index j = 0; j < theta.size(); ++j) {
    const auto &h = model_.hypers[static_cast<std::size_t>(j)];
    if (!(theta[j] >= h.lower && theta[j] <= h.upper)) return false;
  }
  return true;
}

SparseMatrix InlaEngine::prior_precision(const Vector &theta) const {
  SparseMatrix q = pattern_zero_prior_;
  for (const auto &t : model_.terms) q += t.coefficient(theta) * t.matrix;
  if (opt_.jitter > 0) {
    Vector dg = q.diagonal();
    SparseMatrix jd = jitter_diag_mask_;
    for (Index i = 0; i < jd.outerSize(); ++i)
      for (SparseMatrix::InnerIterator it(jd, i); it; ++it) it.valueRef() *= opt_.jitter * std::abs(dg[i]);
    q += jd;
  }
  return q;
}

double InlaEngine::log_lik(const Vector &eta_full) const {
  double s = 0.0;
  const Vector &y = model_.observed;
  for (Index r = 0; r < eta_full.size(); ++r) {
    if (!model_.active[static_cast<std::size_t>(r)]) continue;
    if (model_.family == Family::Poisson) {
      s += y[r] * eta_full[r] - std::exp(eta_full[r]) - std::lgamma(y[r] + 1.0);
    } else {
      double tau = model_.gaussian_precision;
      double e = y[r] - eta_full[r];
      s += 0.5 * std::log(tau / (2.0 * std::numbers::pi)) - 0.5 * tau * e * e;
    }
  }
  return s;
}

Vector InlaEngine::log_lik_gradient(const Vector &eta_full) const {
  Vector g = Vector::Zero(eta_full.size());
  for (Index r = 0; r < eta_full.size(); ++r) {
    if (!model_.active[static_cast<std::size_t>(r)]) continue;
    g[r] = model_.family == Family::Poisson ? model_.observed[r] - std::exp(eta_full[r])
                                             : model_.gaussian_precision * (model_.observed[r] - eta_full[r]);
  }
  return g;
}

Vector InlaEngine::log_lik_curvature(const Vector &eta_full) const {
  Vector c = Vector::Zero(eta_full.size());
  for (Index r = 0; r < eta_full.size(); ++r) {
    if (!model_.active[static_cast<std::size_t>(r)]) continue;
    c[r] = model_.family == Family::Poisson ? std::exp(eta_full[r]) : model_.gaussian_precision;
  }
  return c;
}

double InlaEngine::projected_norm(const Vector &g) const {
  if (k_ == 0) return g.lpNorm<Eigen::Infinity>();
  Vector lam = cct_.solve(model_.constraints * g);
  return (g - constraints_t_ * lam).lpNorm<Eigen::Infinity>();
}

GaussianApprox InlaEngine::gaussian_approx(const Vector &theta) {
  check_deadline();
  if (theta.size() != static_cast<Index>(model_.hypers.size())) fail("wrong number of hyperparameters");
  const SparseMatrix &a = model_.predictor;
  const SparseMatrix q = prior_precision(theta);

  auto objective = [&](const Vector &x) {
    Vector ef = model_.offset + a * x;
    if (ef.maxCoeff() > 700.0) return -std::numeric_limits<double>::infinity();
    return -0.5 * x.dot(q * x) + log_lik(ef);
  };
  auto factor_at = [&](const Vector &c) {
    SparseMatrix qs = q + pattern_zero_post_;
    qs += SparseMatrix(a.transpose() * c.asDiagonal() * a);
    if (!post_chol_.factorize(qs)) throw Error(ErrorKind::Convergence, "posterior precision is not positive definite");
    if (k_ > 0) {
      last_y_ = post_chol_.forward(constraints_t_);
      last_m_.compute(Matrix(SparseMatrix(last_y_.transpose()) * last_y_));
    }
  };
  auto krige = [&](Vector xu) {
    if (k_ > 0) xu -= post_chol_.backward(Vector(last_y_ * last_m_.solve(model_.constraints * xu)));
    return xu;
  };

  GaussianApprox ga;
  ga.theta = theta;
  Vector x = warm_.size() == model_.dim ? warm_ : Vector::Zero(model_.dim);
  if (k_ > 0) x -= constraints_t_ * cct_.solve(model_.constraints * x);
  double fx = objective(x);
  if (!std::isfinite(fx)) {
    x.setZero();
    fx = objective(x);
  }
  int it = 0;
  for (; it < opt_.max_newton; ++it) {
    Vector ef = model_.offset + a * x;
    Vector glik = log_lik_gradient(ef);
    Vector g = -(q * x) + a.transpose() * glik;
    ga.gradient_norm = projected_norm(g);
    if (ga.gradient_norm <= opt_.newton_tol) {
      ga.converged = true;
      break;
    }
    Vector c = log_lik_curvature(ef);
    factor_at(c);
    // The kriged step is unchanged by adding C'mu to g; dropping the
    // multiplier part first keeps H^-1 from amplifying it into round-off.
    Vector gp = k_ > 0 ? Vector(g - constraints_t_ * cct_.solve(model_.constraints * g)) : g;
    Vector xn = krige(x + post_chol_.solve(gp));
    Vector dir = xn - x;
    double step = 1.0, fn = objective(xn);
    while (!(fn >= fx - 1e-12 * std::abs(fx)) && step > 1e-10) {
      step *= 0.5;
      xn = x + step * dir;
      fn = objective(xn);
    }
    if (!(fn >= fx - 1e-12 * std::abs(fx))) break;
    x = xn;
    fx = fn;
  }
  if (!ga.converged) {
    Vector ef = model_.offset + a * x;
    ga.gradient_norm = projected_norm(-(q * x) + a.transpose() * log_lik_gradient(ef));
    ga.converged = ga.gradient_norm <= opt_.newton_tol;
  }
  ga.iterations = it;
  newton_total_ += it;

  const double half_ld_prior = prior_normalizer(theta, q);
  Vector ef = model_.offset + a * x;
  ga.curvature = log_lik_curvature(ef);
  factor_at(ga.curvature);
  double ld_post = post_chol_.log_determinant();
  if (k_ > 0) ld_post += 2.0 * Matrix(last_m_.matrixLLT()).diagonal().array().log().sum();

  ga.mode = x;
  ga.eta = a * x;
  ga.log_likelihood = half_ld_prior - 0.5 * x.dot(q * x) + log_lik(ef) - 0.5 * ld_post;
  ga.log_posterior = ga.log_likelihood + (model_.log_hyperprior && theta.size() > 0 ? model_.log_hyperprior(theta) : 0.0);
  if (ga.converged) warm_ = x;
  return ga;
}

double InlaEngine::prior_normalizer(const Vector &theta, const SparseMatrix &q) {
  if (model_.prior_log_scale && calibrated_) return model_.prior_log_scale(theta) + prior_const_;
  if (!prior_chol_.factorize(q)) throw Error(ErrorKind::Convergence, "prior precision is not positive definite");
  double ld = prior_chol_.log_determinant();
  if (k_ > 0) {
    SparseMatrix y = prior_chol_.forward(constraints_t_);
    Eigen::LLT<Matrix> m(Matrix(SparseMatrix(y.transpose()) * y));
    ld += 2.0 * Matrix(m.matrixLLT()).diagonal().array().log().sum();
  }
  if (model_.prior_log_scale) {
    prior_const_ = 0.5 * ld - model_.prior_log_scale(theta);
    calibrated_ = true;
  }
  return 0.5 * ld;
}

double InlaEngine::eval_log_posterior(const Vector &theta) {
  GaussianApprox ga = gaussian_approx(theta);
  if (!ga.converged || !std::isfinite(ga.log_posterior)) return -std::numeric_limits<double>::infinity();
  return ga.log_posterior;
}

InlaEngine::PointDetail InlaEngine::detail(const Vector &theta) {
  PointDetail p;
  p.ga = gaussian_approx(theta);
  // Variances of eta from the factor left by the final approximation.
  const SparseMatrix &a = model_.predictor;
  SelectedInverse s = post_chol_.selected_inverse();
  Eigen::SparseMatrix<double, Eigen::RowMajor> arow(a);
  const Index nobs = a.rows();
  p.eta_var.resize(nobs);
  for (Index r = 0; r < nobs; ++r) {
    double v = 0.0;
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator i(arow, r); i; ++i)
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator j(arow, r); j; ++j)
        v += i.value() * j.value() * s(i.col(), j.col());
    p.eta_var[r] = v;
  }
  const LatentBlock *alpha = model_.block("alpha");
  if (alpha) p.alpha_var = s(alpha->offset, alpha->offset);
  if (k_ > 0) {
    // Kriging correction: a' W M^-1 W' a with W = Q*^-1 C'.
    Matrix w = post_chol_.backward(Matrix(last_y_));
    Matrix u = a * w;
    Matrix y = last_m_.matrixL().solve(u.transpose());
    p.eta_var -= y.colwise().squaredNorm().transpose();
    if (alpha) {
      Vector wa = w.row(alpha->offset).transpose();
      p.alpha_var -= last_m_.matrixL().solve(wa).squaredNorm();
    }
  }
  p.eta_var = p.eta_var.cwiseMax(1e-300);
  p.alpha_var = std::max(p.alpha_var, 1e-300);
  return p;
}

HyperGrid InlaEngine::explore_hyper() {
  const Index m = static_cast<Index>(model_.hypers.size());
  HyperGrid grid;
  int evals = 0;
  auto lpost = [&](const Vector &th) {
    ++evals;
    return eval_log_posterior(th);
  };

  if (m == 0 || opt_.fixed_theta) {
    Vector th = opt_.fixed_theta ? *opt_.fixed_theta : Vector();
    GaussianApprox ga = gaussian_approx(th);
    if (!ga.converged)
      throw Error(ErrorKind::Convergence, "Newton iterations did not converge (gradient " + std::to_string(ga.gradient_norm) + ")");
    grid.points = {th};
    grid.log_posterior = Vector::Constant(1, ga.log_posterior);
    grid.weights = Vector::Ones(1);
    grid.mode = th;
    grid.axes = Matrix::Identity(m, m);
    grid.evaluations = 1;
    return grid;
  }

  Vector lower(m), upper(m), th(m);
  for (Index j = 0; j < m; ++j) {
    const auto &h = model_.hypers[static_cast<std::size_t>(j)];
    lower[j] = h.lower;
    upper[j] = h.upper;
    th[j] = std::clamp(h.initial, h.lower, h.upper);
  }
  auto clamp = [&](Vector v) { return v.cwiseMax(lower).cwiseMin(upper); };
  auto gradient = [&](const Vector &t, double ft) {
    Vector g(m);
    for (Index j = 0; j < m; ++j) {
      double h = opt_.fd_step;
      Vector tp = t, tm = t;
      tp[j] = std::min(t[j] + h, upper[j]);
      tm[j] = std::max(t[j] - h, lower[j]);
      double fp = tp[j] > t[j] ? -lpost(tp) : ft;
      double fm = tm[j] < t[j] ? -lpost(tm) : ft;
      g[j] = (fp - fm) / (tp[j] - tm[j]);
    }
    return g;
  };
  auto projected = [&](const Vector &t, const Vector &g) {
    Vector p = g;
    for (Index j = 0; j < m; ++j)
      if ((t[j] <= lower[j] && g[j] > 0) || (t[j] >= upper[j] && g[j] < 0)) p[j] = 0.0;
    return p;
  };

  // Quasi-Newton on -log p(theta | y) with box truncation.
  double f = -lpost(th);
  if (!std::isfinite(f)) throw Error(ErrorKind::Convergence, "log-posterior not finite at the initial hyperparameters");
  Vector g = gradient(th, f);
  Matrix hinv = Matrix::Identity(m, m);
  int iter = 0;
  for (; iter < opt_.bfgs_max_iter; ++iter) {
    if (projected(th, g).lpNorm<Eigen::Infinity>() < opt_.bfgs_tol) break;
    Vector p = -hinv * g;
    for (Index j = 0; j < m; ++j)
      if ((th[j] <= lower[j] && p[j] < 0) || (th[j] >= upper[j] && p[j] > 0)) p[j] = 0.0;
    double pmax = p.lpNorm<Eigen::Infinity>();
    if (pmax > 2.0) p *= 2.0 / pmax;
    double slope = g.dot(p);
    if (!(slope < 0)) {
      hinv.setIdentity();
      p = -projected(th, g);
      pmax = p.lpNorm<Eigen::Infinity>();
      if (pmax > 2.0) p *= 2.0 / pmax;
      slope = g.dot(p);
    }
    double step = 1.0, fn = 0.0;
    Vector tn;
    bool ok = false;
    while (step > 1e-8) {
      tn = clamp(th + step * p);
      fn = -lpost(tn);
      if (fn <= f + 1e-4 * step * slope) {
        ok = true;
        break;
      }
      step *= 0.5;
    }
    if (!ok) break;
    Vector gn = gradient(tn, fn);
    Vector s = tn - th, yv = gn - g;
    double sy = s.dot(yv);
    if (sy > 1e-10) {
      double rho = 1.0 / sy;
      Matrix id = Matrix::Identity(m, m);
      hinv = (id - rho * s * yv.transpose()) * hinv * (id - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    bool small = (tn - th).lpNorm<Eigen::Infinity>() < 1e-6 && std::abs(fn - f) < 1e-10;
    th = tn;
    f = fn;
    g = gn;
    if (small) break;
  }
  grid.optimizer_iterations = iter;
  const Vector mode_x = warm_;

  // Curvature at the mode by central differences.
  Matrix hess(m, m);
  const double h = opt_.hessian_step;
  auto fval = [&](const Vector &t) {
    warm_ = mode_x;
    double v = lpost(t);
    return std::isfinite(v) ? v : -f - 1e3;
  };
  const double f0 = -f;
  for (Index i = 0; i < m; ++i) {
    Vector tp = th, tm = th;
    tp[i] += h;
    tm[i] -= h;
    hess(i, i) = (fval(tp) - 2.0 * f0 + fval(tm)) / (h * h);
    for (Index j = 0; j < i; ++j) {
      Vector a1 = th, a2 = th, a3 = th, a4 = th;
      a1[i] += h; a1[j] += h;
      a2[i] += h; a2[j] -= h;
      a3[i] -= h; a3[j] += h;
      a4[i] -= h; a4[j] -= h;
      hess(i, j) = hess(j, i) = (fval(a1) - fval(a2) - fval(a3) + fval(a4)) / (4.0 * h * h);
    }
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(-hess);
  Vector lam = es.eigenvalues().cwiseMax(1.0 / (opt_.max_hyper_sd * opt_.max_hyper_sd));
  grid.axes = es.eigenvectors() * lam.cwiseSqrt().cwiseInverse().asDiagonal();
  grid.log_cell_volume = m * std::log(opt_.grid_step) - 0.5 * lam.array().log().sum();

  // Regular grid in standardized coordinates, pruned by the drop from the mode.
  const int per_axis = std::max(1, opt_.grid_points | 1);
  const int half = (per_axis - 1) / 2;
  std::vector<int> idx(static_cast<std::size_t>(m), -half);
  std::vector<double> lps;
  cache_.clear();
  for (;;) {
    Vector z(m);
    for (Index j = 0; j < m; ++j) z[j] = idx[static_cast<std::size_t>(j)] * opt_.grid_step;
    Vector t = th + grid.axes * z;
    if (0.5 * z.squaredNorm() <= 2.0 * opt_.prune_drop && in_bounds(t)) {
      warm_ = mode_x;
      ++evals;
      PointDetail d = detail(t);
      if (d.ga.converged && std::isfinite(d.ga.log_posterior) && d.ga.log_posterior >= f0 - opt_.prune_drop) {
        grid.points.push_back(t);
        lps.push_back(d.ga.log_posterior);
        cache_.push_back(std::move(d));
      }
    }
    Index j = 0;
    while (j < m && ++idx[static_cast<std::size_t>(j)] > half) idx[static_cast<std::size_t>(j++)] = -half;
    if (j == m) break;
  }
  if (grid.points.empty()) {
    warm_ = mode_x;
    PointDetail d = detail(th);
    if (!d.ga.converged) throw Error(ErrorKind::Convergence, "Newton iterations did not converge at the hyperparameter mode");
    grid.points.push_back(th);
    lps.push_back(d.ga.log_posterior);
    cache_.push_back(std::move(d));
  }
  grid.log_posterior = Eigen::Map<Vector>(lps.data(), static_cast<Index>(lps.size()));
  grid.log_posterior.maxCoeff(&grid.mode_index);
  // Drop anything that is more than the threshold below the best point found.
  const double best = grid.log_posterior[grid.mode_index];
  std::vector<Index> keep;
  for (Index i = 0; i < grid.log_posterior.size(); ++i)
    if (grid.log_posterior[i] >= best - opt_.prune_drop) keep.push_back(i);
  if (static_cast<Index>(keep.size()) < grid.log_posterior.size()) {
    HyperGrid pruned = grid;
    pruned.points.clear();
    std::vector<PointDetail> kept;
    pruned.log_posterior.resize(static_cast<Index>(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) {
      pruned.points.push_back(grid.points[static_cast<std::size_t>(keep[i])]);
      pruned.log_posterior[static_cast<Index>(i)] = grid.log_posterior[keep[i]];
      kept.push_back(std::move(cache_[static_cast<std::size_t>(keep[i])]));
    }
    cache_ = std::move(kept);
    grid = std::move(pruned);
    grid.log_posterior.maxCoeff(&grid.mode_index);
  }
  grid.mode = grid.points[static_cast<std::size_t>(grid.mode_index)];
  Vector w = (grid.log_posterior.array() - grid.log_posterior.maxCoeff()).exp();
  grid.weights = w / w.sum();
  grid.evaluations = evals;
  warm_ = mode_x;
  return grid;
}

double InlaEngine::eta_variance(Index r) const {
  const Vector a = Vector(model_.predictor.row(r).transpose());
  const Vector x = post_chol_.solve(a);
  double v = a.dot(x);
  if (k_ > 0) v -= last_m_.matrixL().solve(Vector(constraints_t_.transpose() * x)).squaredNorm();
  return std::max(v, 1e-300);
}

// Units whose cavity moves far from the full-data mode are recomputed with
// observation r removed at every grid point; p(theta | y_-r) comes from the
// ratio of the two Laplace estimates.
void InlaEngine::refit_cpo(const HyperGrid &grid, const std::vector<Index> &units, FitResult &res) {
  LatentModel held_model = model_;
  InlaEngine held(held_model, opt_);
  const GaussHermite gh = gauss_hermite(opt_.gh_nodes);
  const Index kpts = static_cast<Index>(grid.points.size());
  Vector log_w(kpts), cpo_at(kpts);
  for (Index r : units) {
    check_deadline();
    held_model.active[static_cast<std::size_t>(r)] = false;
    const double y = model_.observed[r], off = model_.offset[r];
    const bool poisson = model_.family == Family::Poisson;
    auto lik = [&](double eta) {
      if (poisson) return std::exp(poisson_logpmf(y, std::exp(off + eta)));
      double tau = model_.gaussian_precision, e = y - off - eta;
      return std::sqrt(tau / (2.0 * std::numbers::pi)) * std::exp(-0.5 * tau * e * e);
    };
    double dropped = 0.0;
    for (Index k = 0; k < kpts; ++k) {
      const PointDetail &p = cache_[static_cast<std::size_t>(k)];
      held.warm_ = p.ga.mode;
      GaussianApprox ga;
      ga.gradient_norm = std::numeric_limits<double>::infinity();
      try {
        ga = held.gaussian_approx(grid.points[static_cast<std::size_t>(k)]);
        log_w[k] = std::log(grid.weights[k]) + ga.log_posterior - p.ga.log_posterior;
        cpo_at[k] = normal_expectation(gh, ga.eta[r], std::sqrt(held.eta_variance(r)), lik);
      } catch (const Error &e) {
        if (e.kind() != ErrorKind::Convergence) throw;
        ga.gradient_norm = std::numeric_limits<double>::infinity();
      }
      if (ga.gradient_norm > 100.0 * opt_.newton_tol || !std::isfinite(log_w[k]) || !std::isfinite(cpo_at[k])) {
        dropped += grid.weights[k];
        log_w[k] = -std::numeric_limits<double>::infinity();
        cpo_at[k] = 0.0;
      }
    }
    held_model.active[static_cast<std::size_t>(r)] = true;
    if (dropped > 0.05) continue;
    const Vector v = (log_w.array() - log_w.maxCoeff()).exp();
    const double cpo = v.dot(cpo_at) / v.sum();
    if (cpo > kMinCpo) {
      res.cpo[r] = std::min(cpo, 1.0);
      res.cpo_flagged[static_cast<std::size_t>(r)] = false;
    }
  }
}

FitResult InlaEngine::summarize(const HyperGrid &grid) {
  const Index kpts = static_cast<Index>(grid.points.size());
  bool cached = static_cast<Index>(cache_.size()) == kpts;
  for (Index i = 0; cached && i < kpts; ++i)
    cached = cache_[static_cast<std::size_t>(i)].ga.theta == grid.points[static_cast<std::size_t>(i)];
  if (!cached) {
    cache_.clear();
    const Vector start = warm_;
    for (const auto &t : grid.points) {
      warm_ = start;
      cache_.push_back(detail(t));
    }
  }

  const Index nobs = model_.num_observations();
  FitResult res;
  res.grid = grid;
  res.eta.resize(static_cast<std::size_t>(nobs));
  res.cpo = Vector::Ones(nobs);
  res.cpo_flagged.assign(static_cast<std::size_t>(nobs), false);
  res.fitted = Vector::Zero(nobs);
  res.deviance = Vector::Zero(nobs);
  const Vector &w = grid.weights;
  const GaussHermite gh = gauss_hermite(opt_.gh_nodes);
  const bool poisson = model_.family == Family::Poisson;

  Vector mu(kpts), sd(kpts);
  const double w_sq = w.squaredNorm();
  std::vector<Index> refit;
  for (Index r = 0; r < nobs; ++r) {
    const bool active = model_.active[static_cast<std::size_t>(r)];
    const double y = model_.observed[r];
    const double off = model_.offset[r];
    auto loglik = [&](double eta) {
      if (poisson) return poisson_logpmf(y, std::exp(off + eta));
      double tau = model_.gaussian_precision, e = y - off - eta;
      return 0.5 * std::log(tau / (2.0 * std::numbers::pi)) - 0.5 * tau * e * e;
    };
    double inv = 0.0, inv2 = 0.0;
    bool flagged = !active;
    for (Index k = 0; k < kpts; ++k) {
      const PointDetail &p = cache_[static_cast<std::size_t>(k)];
      mu[k] = p.ga.eta[r];
      sd[k] = std::sqrt(p.eta_var[r]);
      res.fitted[r] += w[k] * (poisson ? std::exp(mu[k] + 0.5 * sd[k] * sd[k]) : mu[k]);
      if (!active) continue;
      res.deviance[r] += w[k] * normal_expectation(gh, mu[k], sd[k], [&](double e) { return -2.0 * loglik(e); });
      // Cavity: remove the quadratic likelihood term from the Gaussian marginal.
      double c = p.ga.curvature[r];
      double gr = poisson ? y - std::exp(off + mu[k]) : model_.gaussian_precision * (y - off - mu[k]);
      double pc = 1.0 / p.eta_var[r] - c;
      double cpo_k = 0.0;
      if (pc > 1e-12 / p.eta_var[r]) {
        double mc = mu[k] - gr / pc;
        cpo_k = normal_expectation(gh, mc, std::sqrt(1.0 / pc), [&](double e) { return std::exp(loglik(e)); });
      }
      if (!(cpo_k > kMinCpo) || !std::isfinite(cpo_k)) {
        flagged = true;
        cpo_k = kMinCpo;
      }
      inv += w[k] / cpo_k;
      inv2 += (w[k] / cpo_k) * (w[k] / cpo_k);
    }
    if (active) {
      double cpo = 1.0 / inv;
      if (!(cpo > kMinCpo)) {
        cpo = kMinCpo;
        flagged = true;
      }
      res.cpo[r] = std::min(cpo, 1.0);
    }
    res.cpo_flagged[static_cast<std::size_t>(r)] = flagged;
    // Effective sample size of the importance weights w / CPO_theta, relative
    // to that of w; a collapse means the held-out posterior of theta is poorly
    // represented by the grid.
    if (active && inv * inv / inv2 * w_sq < opt_.cpo_refit_ess) refit.push_back(r);
    res.eta[static_cast<std::size_t>(r)] = LatentMarginal::from_mixture(w, mu, sd, opt_.marginal_points);
  }
  if (!refit.empty()) refit_cpo(grid, refit, res);

  if (model_.block("alpha")) {
    double m1 = 0.0, m2 = 0.0;
    const Index o = model_.block("alpha")->offset;
    for (Index k = 0; k < kpts; ++k) {
      const PointDetail &p = cache_[static_cast<std::size_t>(k)];
      m1 += w[k] * p.ga.mode[o];
      m2 += w[k] * (p.alpha_var + p.ga.mode[o] * p.ga.mode[o]);
    }
    res.alpha_mean = m1;
    res.alpha_sd = std::sqrt(std::max(m2 - m1 * m1, 0.0));
  }

  const Index m = static_cast<Index>(model_.hypers.size());
  for (Index j = 0; j < m; ++j) {
    HyperSummary hs;
    hs.name = model_.hypers[static_cast<std::size_t>(j)].name;
    std::vector<std::pair<double, double>> vals;
    double m1 = 0.0, m2 = 0.0;
    for (Index k = 0; k < kpts; ++k) {
      double v = grid.points[static_cast<std::size_t>(k)][j];
      m1 += w[k] * v;
      m2 += w[k] * v * v;
      vals.emplace_back(v, w[k]);
    }
    std::sort(vals.begin(), vals.end());
    auto q = [&](double p) {
      double acc = 0.0;
      for (const auto &[v, wt] : vals) {
        acc += wt;
        if (acc >= p) return v;
      }
      return vals.back().first;
    };
    hs.mean = m1;
    hs.sd = std::sqrt(std::max(m2 - m1 * m1, 0.0));
    hs.q025 = q(0.025);
    hs.q50 = q(0.5);
    hs.q975 = q(0.975);
    res.hypers.push_back(hs);
  }
  res.log_marginal_likelihood = log_marginal_likelihood(grid);
  res.newton_iterations = newton_total_;
  return res;
}

FitResult InlaEngine::fit() {
  auto t0 = std::chrono::steady_clock::now();
  HyperGrid grid = explore_hyper();
  FitResult r = summarize(grid);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Free functions

GaussianApprox gaussian_approx(const LatentModel &m, const Vector &theta, const EngineOptions &opt) {
  InlaEngine e(m, opt);
  return e.gaussian_approx(theta);
}

HyperGrid explore_hyper(const LatentModel &m, const EngineOptions &opt) {
  InlaEngine e(m, opt);
  return e.explore_hyper();
}

std::vector<LatentMarginal> latent_marginals(const LatentModel &m, const HyperGrid &grid, const EngineOptions &opt) {
  InlaEngine e(m, opt);
  return e.summarize(grid).eta;
}

Vector compute_cpo(const LatentModel &m, const HyperGrid &grid, const EngineOptions &opt) {
  InlaEngine e(m, opt);
  return e.summarize(grid).cpo;
}

double log_marginal_likelihood(const HyperGrid &grid) {
  return log_sum_exp(grid.log_posterior) + grid.log_cell_volume;
}

FitResult fit(const LatentModel &m, const EngineOptions &opt) {
  InlaEngine e(m, opt);
  return e.fit();
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

nlohmann::json vec_json(const Vector &v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector json_vec(const nlohmann::json &j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Vector>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace

nlohmann::json to_json(const LatentMarginal &m) {
  return {{"x", vec_json(m.x)}, {"density", vec_json(m.density)}, {"mean", m.mean}, {"sd", m.sd},
          {"q025", m.q025},     {"q50", m.q50},                   {"q975", m.q975}};
}

LatentMarginal marginal_from_json(const nlohmann::json &j) {
  LatentMarginal m;
  m.x = json_vec(j.at("x"));
  m.density = json_vec(j.at("density"));
  m.mean = j.at("mean").get<double>();
  m.sd = j.at("sd").get<double>();
  m.q025 = j.at("q025").get<double>();
  m.q50 = j.at("q50").get<double>();
  m.q975 = j.at("q975").get<double>();
  return m;
}

nlohmann::json to_json(const FitResult &r) {
  nlohmann::json j;
  j["format"] = "dacmap.fit";
  j["version"] = 1;
  nlohmann::json eta = nlohmann::json::array();
  for (const auto &m : r.eta) eta.push_back(to_json(m));
  j["eta"] = std::move(eta);
  j["cpo"] = vec_json(r.cpo);
  j["cpo_flagged"] = r.cpo_flagged;
  j["fitted"] = vec_json(r.fitted);
  j["deviance"] = vec_json(r.deviance);
  nlohmann::json hy = nlohmann::json::array();
  for (const auto &h : r.hypers)
    hy.push_back({{"name", h.name}, {"mean", h.mean}, {"sd", h.sd}, {"q025", h.q025}, {"q50", h.q50}, {"q975", h.q975}});
  j["hypers"] = std::move(hy);
  j["alpha"] = {{"mean", r.alpha_mean}, {"sd", r.alpha_sd}};
  j["log_marginal_likelihood"] = r.log_marginal_likelihood;
  nlohmann::json pts = nlohmann::json::array();
  for (const auto &p : r.grid.points) pts.push_back(vec_json(p));
  j["grid"] = {{"points", std::move(pts)},
               {"log_posterior", vec_json(r.grid.log_posterior)},
               {"weights", vec_json(r.grid.weights)},
               {"mode_index", r.grid.mode_index},
               {"log_cell_volume", r.grid.log_cell_volume},
               {"evaluations", r.grid.evaluations},
               {"optimizer_iterations", r.grid.optimizer_iterations}};
  j["newton_iterations"] = r.newton_iterations;
  j["seconds"] = r.seconds;
  return j;
}

FitResult fit_result_from_json(const nlohmann::json &j) {
  if (j.value("format", "") != "dacmap.fit" || j.value("version", 0) != 1)
    fail("not a version-1 fit result");
  FitResult r;
  for (const auto &m : j.at("eta")) r.eta.push_back(marginal_from_json(m));
  r.cpo = json_vec(j.at("cpo"));
  r.cpo_flagged = j.at("cpo_flagged").get<std::vector<bool>>();
  r.fitted = json_vec(j.at("fitted"));
  r.deviance = json_vec(j.at("deviance"));
  for (const auto &h : j.at("hypers"))
    r.hypers.push_back({h.at("name").get<std::string>(), h.at("mean").get<double>(), h.at("sd").get<double>(),
                        h.at("q025").get<double>(), h.at("q50").get<double>(), h.at("q975").get<double>()});
  r.alpha_mean = j.at("alpha").at("mean").get<double>();
  r.alpha_sd = j.at("alpha").at("sd").get<double>();
  r.log_marginal_likelihood = j.at("log_marginal_likelihood").get<double>();
  const auto &g = j.at("grid");
  for (const auto &p : g.at("points")) r.grid.points.push_back(json_vec(p));
  r.grid.log_posterior = json_vec(g.at("log_posterior"));
  r.grid.weights = json_vec(g.at("weights"));
  r.grid.mode_index = g.at("mode_index").get<Index>();
  if (!r.grid.points.empty()) r.grid.mode = r.grid.points[static_cast<std::size_t>(r.grid.mode_index)];
  r.grid.log_cell_volume = g.at("log_cell_volume").get<double>();
  r.grid.evaluations = g.at("evaluations").get<int>();
  r.grid.optimizer_iterations = g.at("optimizer_iterations").get<int>();
  r.newton_iterations = j.at("newton_iterations").get<int>();
  r.seconds = j.at("seconds").get<double>();
  return r;
}

}  // namespace dacmap
