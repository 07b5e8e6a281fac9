#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mnarflow/core.hpp"
#include "mnarflow/random.hpp"
#include "mnarflow/sem.hpp"

namespace mnarflow {

/// Independent Gaussian noise, eps_k ~ N(0, variances(k)).
struct NoiseModel {
  Vector variances;
  bool learnable = false;

  static NoiseModel isotropic(int k, double sigma) { return {Vector::Constant(k, sigma * sigma), false}; }

  void validate() const {
    if (variances.size() == 0 || !(variances.array() > 0.0).all() || !variances.allFinite()) {
      throw ConfigError("NoiseModel: variances must be finite and > 0");
    }
  }
};

enum class LogDetMode { exact, stochastic };

inline const char* to_string(LogDetMode m) { return m == LogDetMode::exact ? "exact" : "stochastic"; }

/// Russian-roulette cut-off N = min_terms + Poisson(poisson_rate) and the
/// number of Hutchinson probes per estimate.
struct LogDetEstimatorConfig {
  double poisson_rate = 2.0;
  int min_terms = 2;
  int num_hutchinson = 1;

  void validate() const {
    if (!(poisson_rate > 0.0)) throw ConfigError("LogDetEstimatorConfig: poisson_rate must be > 0");
    if (min_terms < 1) throw ConfigError("LogDetEstimatorConfig: min_terms must be >= 1");
    if (num_hutchinson < 1) throw ConfigError("LogDetEstimatorConfig: num_hutchinson must be >= 1");
  }

  /// P(N >= m), the survival function of the cut-off distribution.
  double survival(int m) const {
    const int t = m - min_terms;
    if (t <= 0) return 1.0;
    // Sum the upper tail directly; 1 - cdf loses precision for large t.
    double pmf = std::exp(-poisson_rate);
    for (int j = 1; j <= t; ++j) pmf *= poisson_rate / j;
    double tail = 0.0;
    for (int j = t; j < t + 400; ++j) {
      tail += pmf;
      pmf *= poisson_rate / (j + 1);
      if (pmf < tail * 1e-18) break;
    }
    return tail;
  }
};

/// log|det(I - D J)| and, if requested, its gradient w.r.t. J, -D (I - D J)^{-T}.
inline double logdet_from_jacobian(const Matrix& jac, const Vector& d, Matrix* grad_jac = nullptr) {
  const Eigen::Index k = jac.rows();
  const Matrix a = Matrix::Identity(k, k) - d.asDiagonal() * jac;
  Eigen::PartialPivLU<Matrix> lu(a);
  const Matrix& u = lu.matrixLU();
  double out = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    const double piv = std::abs(u(i, i));
    if (!(piv > 1e-300) || !std::isfinite(piv)) {
      throw SingularJacobianError("log-det: I - D J_F is singular; id - D F is not invertible");
    }
    out += std::log(piv);
  }
  if (grad_jac) *grad_jac = -(d.asDiagonal() * lu.inverse().transpose());
  return out;
}

/// log|det(I - D (M o B)^T)| via pivoted LU.
inline double logdet_exact_linear(const Matrix& b, const Matrix& mask, const InterventionMask& iv) {
  require_square(b, "logdet_exact_linear");
  if (mask.rows() != b.rows() || mask.cols() != b.cols() || iv.k() != b.rows()) {
    throw DimensionError("logdet_exact_linear: dimension mismatch");
  }
  return logdet_from_jacobian(mask.cwiseProduct(b).transpose(), iv.d());
}

/// Exact log-det of any model at x through its dense K x K Jacobian.
inline double logdet_exact(const SemPoint& point, const InterventionMask& iv, Matrix* grad_jac = nullptr) {
  return logdet_from_jacobian(point.jacobian(), iv.d(), grad_jac);
}

struct StochasticLogDet {
  double value = 0.0;
  int terms = 0;
};

/// Unbiased estimate -sum_{m<=N} W^T (D J)^m W / (m P(N >= m)), averaged over
/// Hutchinson probes. Powers are applied by repeated Jacobian-vector
/// products. When grad_jac is given it receives the gradient of this same
/// realization (same N, same probes) w.r.t. J.
inline StochasticLogDet logdet_stochastic(const SemPoint& point, const InterventionMask& iv,
                                          const LogDetEstimatorConfig& cfg, Rng& rng,
                                          Matrix* grad_jac = nullptr) {
  cfg.validate();
  const Vector d = iv.d();
  const Eigen::Index k = d.size();
  std::poisson_distribution<int> poisson(cfg.poisson_rate);
  const int n_terms = cfg.min_terms + poisson(rng);

  std::vector<double> coef(n_terms + 1, 0.0);
  for (int m = 1; m <= n_terms; ++m) coef[m] = 1.0 / (static_cast<double>(m) * cfg.survival(m));

  StochasticLogDet out;
  out.terms = n_terms;
  if (grad_jac) grad_jac->setZero(k, k);
  const double probe_weight = 1.0 / static_cast<double>(cfg.num_hutchinson);

  std::vector<Vector> fwd(n_terms + 1), adj(n_terms);
  for (int p = 0; p < cfg.num_hutchinson; ++p) {
    Vector w(k);
    for (Eigen::Index i = 0; i < k; ++i) w[i] = standard_normal(rng);
    fwd[0] = w;
    double estimate = 0.0;
    for (int m = 1; m <= n_terms; ++m) {
      fwd[m] = d.cwiseProduct(point.jvp(fwd[m - 1]));
      estimate -= coef[m] * w.dot(fwd[m]);
    }
    out.value += probe_weight * estimate;
    if (!grad_jac) continue;
    // d(w^T P^m w)/dP = sum_{i+j=m-1} (P^T)^i w (P^j w)^T with P = D J.
    adj[0] = w;
    for (int i = 1; i < n_terms; ++i) adj[i] = point.vjp(d.cwiseProduct(adj[i - 1]));
    Matrix g = Matrix::Zero(k, k);
    for (int i = 0; i < n_terms; ++i) {
      Vector acc = Vector::Zero(k);
      for (int j = 0; i + j + 1 <= n_terms; ++j) acc += coef[i + j + 1] * fwd[j];
      g.noalias() += adj[i] * acc.transpose();
    }
    *grad_jac -= probe_weight * (d.asDiagonal() * g);
  }
  return out;
}

/// Convenience overload evaluating the model at x.
inline StochasticLogDet logdet_stochastic(const SemModel& model, const Matrix& mask, const Vector& x,
                                          const InterventionMask& iv, const LogDetEstimatorConfig& cfg, Rng& rng) {
  return logdet_stochastic(SemPoint(model, mask, x), iv, cfg, rng);
}

/// Adjoints produced by the density, to be pushed through SemPoint::backward.
struct DensityGradient {
  Vector grad_f;         // dlogp/dF
  Matrix grad_jac;       // dlogp/dJ_F
  Vector grad_log_var;   // dlogp/dlog(sigma^2)
};

struct DensityOptions {
  LogDetMode mode = LogDetMode::exact;
  LogDetEstimatorConfig estimator{};
};

/// log p(x) = sum_{intervened} log phi(x_k) + sum_{observed} log N(eps_k; 0, sigma_k^2)
///          + log|det J_{id - D F}(x)|.
/// Intervened coordinates use a standard-normal density. `rng` is only
/// touched in stochastic mode.
inline double target_log_density(const SemPoint& point, const NoiseModel& noise, const InterventionMask& iv,
                                  const DensityOptions& opt, Rng* rng, DensityGradient* grad = nullptr) {
  const Vector& x = point.x();
  const Vector& f = point.f();
  const Eigen::Index k = x.size();
  if (noise.variances.size() != k || iv.k() != k) throw DimensionError("target_log_density: dimension mismatch");
  if (grad) {
    grad->grad_f = Vector::Zero(k);
    grad->grad_log_var = Vector::Zero(k);
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    if (!iv.observed[i]) {
      total += normal_log_pdf(x[i], 1.0);
      continue;
    }
    const double var = noise.variances[i];
    const double eps = x[i] - f[i];
    total += normal_log_pdf(eps, var);
    if (grad) {
      grad->grad_f[i] = eps / var;
      grad->grad_log_var[i] = -0.5 + 0.5 * eps * eps / var;
    }
  }
  Matrix* gj = grad ? &grad->grad_jac : nullptr;
  if (opt.mode == LogDetMode::exact) {
    total += logdet_exact(point, iv, gj);
  } else {
    if (!rng) throw ConfigError("target_log_density: stochastic log-det needs an rng");
    total += logdet_stochastic(point, iv, opt.estimator, *rng, gj).value;
  }
  return total;
}

inline double target_log_density(const SemModel& model, const Matrix& mask, const NoiseModel& noise,
                                 const Vector& x, const InterventionMask& iv, const DensityOptions& opt = {},
                                 Rng* rng = nullptr) {
  return target_log_density(SemPoint(model, mask, x), noise, iv, opt, rng);
}

}  // namespace mnarflow
