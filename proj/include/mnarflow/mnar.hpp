#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mnarflow/core.hpp"
#include "mnarflow/dataset.hpp"
#include "mnarflow/graph.hpp"
#include "mnarflow/random.hpp"

namespace mnarflow {

/// Block-parallel MNAR mechanism: P(R_k = 0 | x) = expit(w_k^T x + z_k),
/// with w_k = column k of w and w(k, k) frozen at zero (no self-censoring).
struct MnarModel {
  Matrix w;
  Vector z;
  std::optional<EdgePattern> parent_pattern;

  int k() const { return static_cast<int>(z.size()); }

  static MnarModel zeros(int k) { return {Matrix::Zero(k, k), Vector::Zero(k), std::nullopt}; }

  /// Restores the structural zeros (diagonal, and pattern support if set).
  void enforce_support() {
    w.diagonal().setZero();
    if (parent_pattern) {
      for (int j = 0; j < k(); ++j)
        for (int c = 0; c < k(); ++c)
          if (!parent_pattern->has(j, c)) w(j, c) = 0.0;
    }
  }

  void validate() const {
    if (w.rows() != z.size() || w.cols() != z.size()) throw DimensionError("MnarModel: w must be K x K");
    for (int i = 0; i < k(); ++i)
      if (w(i, i) != 0.0) throw DataError("MnarModel: self-censoring weight w(k,k) must be 0");
    if (parent_pattern && parent_pattern->k() != k()) throw DimensionError("MnarModel: pattern size mismatch");
  }
};

/// p_k = P(R_k = 0 | x).
inline Vector prob_missing(const MnarModel& model, const Vector& x) {
  const Vector eta = model.w.transpose() * x + model.z;
  return eta.unaryExpr([](double v) { return sigmoid(v); });
}

/// sum over k not skipped of (1 - r_k) log p_k + r_k log(1 - p_k).
/// skip(k) == 1 removes coordinate k (intervened nodes are structurally
/// observed). grad_eta, if given, receives dlogp/d(w_k^T x + z_k).
inline double log_prob_r(const MnarModel& model, const BitVector& r, const Vector& x, const BitVector& skip,
                         Vector* grad_eta = nullptr) {
  const Eigen::Index k = x.size();
  if (r.size() != k || skip.size() != k || model.k() != k) throw DimensionError("log_prob_r: dimension mismatch");
  const Vector eta = model.w.transpose() * x + model.z;
  if (grad_eta) grad_eta->setZero(k);
  double total = 0.0;
  for (Eigen::Index c = 0; c < k; ++c) {
    if (skip[c]) continue;
    const bool missing = r[c] == 0;
    total += missing ? log_sigmoid(eta[c]) : log_sigmoid(-eta[c]);
    if (grad_eta) (*grad_eta)[c] = (missing ? 1.0 : 0.0) - sigmoid(eta[c]);
  }
  return total;
}

/// Accumulates d/dw and d/dz from dlogp/deta at input x.
inline void accumulate_mnar_gradient(const Vector& grad_eta, const Vector& x, Matrix& grad_w, Vector& grad_z) {
  grad_w.noalias() += x * grad_eta.transpose();
  grad_z += grad_eta;
}

/// Draws R_k ~ Bernoulli(1 - p_k); protected(k) == 1 forces R_k = 1.
inline BitVector sample_r(const MnarModel& model, const Vector& x, const BitVector& protected_nodes, Rng& rng) {
  const Vector p = prob_missing(model, x);
  BitVector r(x.size());
  for (Eigen::Index c = 0; c < x.size(); ++c) {
    const bool missing = uniform01(rng) < p[c];
    r[c] = (protected_nodes[c] || !missing) ? 1 : 0;
  }
  return r;
}

/// X_j -> R_k iff |w(j, k)| > threshold.
inline EdgePattern extract_m_edges(const MnarModel& model, double threshold = 0.1) {
  if (!(threshold > 0.0)) throw ConfigError("extract_m_edges: threshold must be > 0");
  EdgePattern p(model.k());
  for (int j = 0; j < model.k(); ++j)
    for (int c = 0; c < model.k(); ++c)
      if (j != c && std::abs(model.w(j, c)) > threshold) p.set(j, c, true);
  return p;
}

/// SHD between X -> R edge sets. X_j -> R_k and X_k -> R_j are unrelated
/// edges of a bipartite graph, so every differing entry counts once.
inline int m_edge_shd(const EdgePattern& estimated, const EdgePattern& truth) {
  if (estimated.k() != truth.k()) throw DimensionError("m_edge_shd: node counts differ");
  int total = 0;
  for (int j = 0; j < truth.k(); ++j)
    for (int c = 0; c < truth.k(); ++c) total += estimated.has(j, c) != truth.has(j, c);
  return total;
}

struct LogisticFitOptions {
  double lambda = 1e-2;
  int max_iter = 2000;
  double weight_cap = 10.0;
  double tol = 1e-9;
};

/// Mechanism used when no initialization data exists: zero weights,
/// intercepts from smoothed marginal missing rates of non-intervened cells.
inline MnarModel marginal_mnar(const Dataset& data) {
  MnarModel m = MnarModel::zeros(data.k());
  for (int c = 0; c < data.k(); ++c) {
    int n = 0, miss = 0;
    for (int i = 0; i < data.n(); ++i) {
      if (!data.s(i, c)) continue;
      ++n;
      miss += data.r(i, c) == 0;
    }
    m.z[c] = logit((miss + 1.0) / (n + 2.0));
  }
  return m;
}

/// L1-regularized logistic fit of each R_k on X_{-k}. Rows used for R_k are
/// those where every other coordinate is observed and node k is not
/// intervened. Degenerate responses (no missing or all missing) get zero
/// weights and the Laplace-smoothed intercept logit((m + 1) / (n + 2)).
inline MnarModel fit_complete_cases(const Dataset& data, const LogisticFitOptions& opt = {}) {
  const int k = data.k();
  MnarModel model = MnarModel::zeros(k);
  for (int c = 0; c < k; ++c) {
    std::vector<int> rows;
    for (int i = 0; i < data.n(); ++i) {
      if (!data.s(i, c)) continue;
      bool others = true;
      for (int j = 0; j < k && others; ++j) others = j == c || data.r(i, j) == 1;
      if (others) rows.push_back(i);
    }
    const int n = static_cast<int>(rows.size());
    if (n == 0) {
      throw TrainingError("fit_complete_cases: no usable complete cases for R_" + std::to_string(c + 1));
    }
    Matrix xs = Matrix::Zero(n, k);
    Vector resp(n);
    int missing = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < k; ++j)
        if (j != c) xs(i, j) = data.y(rows[i], j);
      resp[i] = data.r(rows[i], c) == 0 ? 1.0 : 0.0;
      missing += data.r(rows[i], c) == 0;
    }
    const double z_floor = logit(1.0 / (n + 2.0));
    const double z_ceil = logit((n + 1.0) / (n + 2.0));
    if (missing == 0 || missing == n) {
      model.z[c] = logit((missing + 1.0) / (n + 2.0));
      continue;
    }

    // FISTA on the mean negative log-likelihood with an L1 prox on w.
    Matrix design(n, k + 1);
    design << xs, Vector::Ones(n);
    const Matrix gram = design.transpose() * design / n;
    const double lipschitz = 0.25 * Eigen::SelfAdjointEigenSolver<Matrix>(gram).eigenvalues().maxCoeff() + 1e-12;
    const double step = 1.0 / lipschitz;
    Vector theta = Vector::Zero(k + 1);
    theta[k] = logit((missing + 1.0) / (n + 2.0));
    Vector momentum = theta;
    double t = 1.0;
    for (int it = 0; it < opt.max_iter; ++it) {
      const Vector p = (design * momentum).unaryExpr([](double v) { return sigmoid(v); });
      const Vector grad = design.transpose() * (p - resp) / n;
      Vector next = momentum - step * grad;
      for (int j = 0; j < k; ++j) {
        const double v = next[j];
        next[j] = j == c ? 0.0 : std::copysign(std::max(0.0, std::abs(v) - step * opt.lambda), v);
      }
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      const double change = (next - theta).cwiseAbs().maxCoeff();
      momentum = next + ((t - 1.0) / t_next) * (next - theta);
      theta = next;
      t = t_next;
      if (change < opt.tol) break;
    }
    for (int j = 0; j < k; ++j) model.w(j, c) = std::clamp(theta[j], -opt.weight_cap, opt.weight_cap);
    model.z[c] = std::clamp(theta[k], z_floor, z_ceil);
  }
  model.w.diagonal().setZero();
  return model;
}

}  // namespace mnarflow
