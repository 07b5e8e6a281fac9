#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <variant>

#include "mnarflow/core.hpp"
#include "mnarflow/graph.hpp"
#include "mnarflow/random.hpp"

namespace mnarflow {

enum class Activation { tanh, identity };

inline const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "identity" || s == "linear") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

/// Linear mechanism X = (M o B)^T X + eps. b(j, k) is the coefficient of X_j
/// in the equation of X_k; the diagonal is zero.
struct LinearSem {
  Matrix b;
  double contractivity_bound = 0.95;

  int k() const { return static_cast<int>(b.rows()); }
};

/// One-hidden-layer network shared across outputs; output k sees the input
/// masked by column k of the dependency mask:
///   [F(x)]_k = sum_h w2(h, k) act(sum_j w1(j, h) M(j, k) x_j + b1(h)) + b2(k).
struct MlpSem {
  Matrix w1;  // K x H
  Vector b1;  // H
  Matrix w2;  // H x K
  Vector b2;  // K
  Activation activation = Activation::tanh;
  double lipschitz_target = 0.9;

  int k() const { return static_cast<int>(w1.rows()); }
  int hidden() const { return static_cast<int>(w1.cols()); }
};

using SemModel = std::variant<LinearSem, MlpSem>;

inline int node_count(const SemModel& m) {
  return std::visit([](const auto& v) { return v.k(); }, m);
}

inline bool is_linear(const SemModel& m) { return std::holds_alternative<LinearSem>(m); }

/// Hard intervention description: observed(k) == 1 iff X_k is purely
/// observed; clamp(k) holds the assigned value of intervened nodes.
struct InterventionMask {
  BitVector observed;
  Vector clamp;

  static InterventionMask none(int k) { return {BitVector::Ones(k), Vector::Zero(k)}; }

  int k() const { return static_cast<int>(observed.size()); }

  void validate() const {
    if (clamp.size() != observed.size()) throw DimensionError("InterventionMask: size mismatch");
    for (int i = 0; i < k(); ++i) {
      if (observed[i] && clamp[i] != 0.0) throw DataError("InterventionMask: clamp must be 0 on observed nodes");
    }
  }

  Vector d() const { return observed.cast<double>(); }
};

/// Gumbel-softmax (binary concrete) relaxation of the dependency mask.
struct GumbelMask {
  Matrix logits;
  double temperature = 1.0;
  bool hard = false;

  int k() const { return static_cast<int>(logits.rows()); }
};

/// A realized mask together with dM/dlogit for the relaxed path.
struct MaskSample {
  Matrix value;
  Matrix dvalue_dlogit;
};

/// Mask from fixed logistic noise (g1 - g0); zero noise gives sigmoid(logits / tau).
inline MaskSample mask_from_noise(const GumbelMask& mask, const Matrix& noise) {
  if (!(mask.temperature > 0.0)) throw ConfigError("GumbelMask: temperature must be > 0");
  const int k = mask.k();
  MaskSample s{Matrix::Zero(k, k), Matrix::Zero(k, k)};
  for (int j = 0; j < k; ++j) {
    for (int c = 0; c < k; ++c) {
      if (j == c) continue;
      const double soft = sigmoid((mask.logits(j, c) + noise(j, c)) / mask.temperature);
      s.value(j, c) = mask.hard ? (soft > 0.5 ? 1.0 : 0.0) : soft;
      s.dvalue_dlogit(j, c) = soft * (1.0 - soft) / mask.temperature;
    }
  }
  return s;
}

inline Matrix sample_gumbel_noise(int k, Rng& rng) {
  Matrix g(k, k);
  for (int j = 0; j < k; ++j)
    for (int c = 0; c < k; ++c) g(j, c) = standard_gumbel(rng) - standard_gumbel(rng);
  return g;
}

/// Draws M with M(j,k) = sigmoid((logit + g1 - g0) / tau), zero diagonal.
/// With `hard` set the forward value is thresholded at 0.5 while the
/// derivative follows the soft value (straight-through).
inline MaskSample sample_mask(const GumbelMask& mask, Rng& rng) {
  return mask_from_noise(mask, sample_gumbel_noise(mask.k(), rng));
}

/// sigmoid(logits) with zero diagonal: the mask used for snapshots,
/// penalties and graph extraction.
inline Matrix expected_mask(const GumbelMask& mask) {
  Matrix m = mask.logits.unaryExpr([](double v) { return sigmoid(v); });
  m.diagonal().setZero();
  return m;
}

inline Matrix hard_mask(const GumbelMask& mask) {
  Matrix m = expected_mask(mask).unaryExpr([](double v) { return v > 0.5 ? 1.0 : 0.0; });
  m.diagonal().setZero();
  return m;
}

inline Matrix full_mask(int k) {
  Matrix m = Matrix::Ones(k, k);
  m.diagonal().setZero();
  return m;
}

// ---------------------------------------------------------------------------
// Per-point evaluation

/// Forward quantities at one input, reused by Jacobian products and backprop.
class SemPoint {
 public:
  SemPoint(const SemModel& model, const Matrix& mask, const Vector& x) : model_(&model), mask_(&mask), x_(x) {
    const int k = node_count(model);
    if (mask.rows() != k || mask.cols() != k || x.size() != k) {
      throw DimensionError("SemPoint: model has K=" + std::to_string(k) + " but mask is " +
                           std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) + " and x has " +
                           std::to_string(x.size()) + " entries");
    }
    if (const auto* lin = std::get_if<LinearSem>(&model)) {
      effective_ = mask.cwiseProduct(lin->b);
      f_ = effective_.transpose() * x;
    } else {
      const auto& net = std::get<MlpSem>(model);
      // pre(k, h): hidden pre-activation seen by output k.
      const Matrix masked_inputs = (mask.array().colwise() * x.array()).matrix();  // (j, k) = M(j,k) x_j
      pre_ = masked_inputs.transpose() * net.w1;
      pre_.rowwise() += net.b1.transpose();
      if (net.activation == Activation::tanh) {
        act_ = pre_.array().tanh().matrix();
        dact_ = (1.0 - act_.array().square()).matrix();
        ddact_ = (-2.0 * act_.array() * dact_.array()).matrix();
      } else {
        act_ = pre_;
        dact_ = Matrix::Ones(pre_.rows(), pre_.cols());
        ddact_ = Matrix::Zero(pre_.rows(), pre_.cols());
      }
      // scaled(k, h) = act'(k, h) * w2(h, k)
      scaled_ = dact_.cwiseProduct(net.w2.transpose());
      f_ = act_.cwiseProduct(net.w2.transpose()).rowwise().sum() + net.b2;
    }
  }

  // The model and mask are held by reference.
  SemPoint(const SemModel&&, const Matrix&, const Vector&) = delete;
  SemPoint(const SemModel&, const Matrix&&, const Vector&) = delete;

  const Vector& f() const { return f_; }
  const Vector& x() const { return x_; }

  /// Dense Jacobian, J(k, j) = dF_k / dx_j.
  Matrix jacobian() const {
    if (is_linear(*model_)) return effective_.transpose();
    const auto& net = std::get<MlpSem>(*model_);
    return (scaled_ * net.w1.transpose()).cwiseProduct(mask_->transpose());
  }

  /// J v without forming J.
  Vector jvp(const Vector& v) const {
    if (is_linear(*model_)) return effective_.transpose() * v;
    const auto& net = std::get<MlpSem>(*model_);
    const Matrix masked = (mask_->array().colwise() * v.array()).matrix();
    return (masked.transpose() * net.w1).cwiseProduct(scaled_).rowwise().sum();
  }

  /// J^T u without forming J.
  Vector vjp(const Vector& u) const {
    if (is_linear(*model_)) return effective_ * u;
    const auto& net = std::get<MlpSem>(*model_);
    // (J^T u)_j = sum_k M(j,k) u_k sum_h w1(j,h) scaled(k,h)
    const Matrix weighted = scaled_.array().colwise() * u.array();  // K x H
    return (net.w1 * weighted.transpose()).cwiseProduct(*mask_).rowwise().sum();
  }

  /// Accumulates parameter and mask gradients of an objective whose
  /// adjoints are dObj/dF (K) and dObj/dJ_F (K x K, may be empty).
  void backward(const Vector& grad_f, const Matrix& grad_jac, SemModel& grad_model, Matrix& grad_mask) const {
    const bool has_jac = grad_jac.size() != 0;
    if (const auto* lin = std::get_if<LinearSem>(model_)) {
      Matrix grad_effective = x_ * grad_f.transpose();
      if (has_jac) grad_effective += grad_jac.transpose();
      auto& g = std::get<LinearSem>(grad_model);
      g.b += grad_effective.cwiseProduct(*mask_);
      grad_mask += grad_effective.cwiseProduct(lin->b);
      g.b.diagonal().setZero();
      grad_mask.diagonal().setZero();
      return;
    }
    const auto& net = std::get<MlpSem>(*model_);
    auto& g = std::get<MlpSem>(grad_model);
    const Matrix w2t = net.w2.transpose();  // (k, h)

    Matrix grad_pre = (dact_.cwiseProduct(w2t)).array().colwise() * grad_f.array();
    Matrix grad_w2t = act_.array().colwise() * grad_f.array();
    g.b2 += grad_f;

    if (has_jac) {
      const Matrix gj_masked = grad_jac.cwiseProduct(mask_->transpose());  // (k, j)
      const Matrix q = gj_masked * net.w1;                                 // (k, h)
      grad_w2t += dact_.cwiseProduct(q);
      grad_pre += w2t.cwiseProduct(q).cwiseProduct(ddact_);
      g.w1 += gj_masked.transpose() * scaled_;
      grad_mask += grad_jac.cwiseProduct(scaled_ * net.w1.transpose()).transpose();
    }

    const Matrix masked_inputs = (mask_->array().colwise() * x_.array()).matrix();
    g.w1 += masked_inputs * grad_pre;
    g.b1 += grad_pre.colwise().sum().transpose();
    grad_mask += ((net.w1 * grad_pre.transpose()).array().colwise() * x_.array()).matrix();
    g.w2 += grad_w2t.transpose();
    grad_mask.diagonal().setZero();
  }

 private:
  const SemModel* model_;
  const Matrix* mask_;
  Vector x_;
  Vector f_;
  Matrix effective_;  // linear: M o B
  Matrix pre_, act_, dact_, ddact_, scaled_;
};

/// F(x) under the given mask.
inline Vector forward_f(const SemModel& model, const Matrix& mask, const Vector& x) {
  return SemPoint(model, mask, x).f();
}

/// A zero-valued object shaped like `model`, used to accumulate gradients.
inline SemModel zeros_like(const SemModel& model) {
  if (const auto* lin = std::get_if<LinearSem>(&model)) {
    LinearSem g = *lin;
    g.b.setZero();
    return g;
  }
  MlpSem g = std::get<MlpSem>(model);
  g.w1.setZero();
  g.b1.setZero();
  g.w2.setZero();
  g.b2.setZero();
  return g;
}

/// Flat parameter vector in a fixed order (linear: b column-major;
/// network: w1, b1, w2, b2).
inline Vector pack(const SemModel& model) {
  if (const auto* lin = std::get_if<LinearSem>(&model)) return lin->b.reshaped();
  const auto& net = std::get<MlpSem>(model);
  Vector out(net.w1.size() + net.b1.size() + net.w2.size() + net.b2.size());
  out << net.w1.reshaped(), net.b1, net.w2.reshaped(), net.b2;
  return out;
}

inline void unpack(SemModel& model, const Vector& flat) {
  if (auto* lin = std::get_if<LinearSem>(&model)) {
    if (flat.size() != lin->b.size()) throw DimensionError("unpack: parameter count mismatch");
    lin->b = flat.reshaped(lin->b.rows(), lin->b.cols());
    return;
  }
  auto& net = std::get<MlpSem>(model);
  const Eigen::Index n1 = net.w1.size(), n2 = net.b1.size(), n3 = net.w2.size(), n4 = net.b2.size();
  if (flat.size() != n1 + n2 + n3 + n4) throw DimensionError("unpack: parameter count mismatch");
  net.w1 = flat.segment(0, n1).reshaped(net.w1.rows(), net.w1.cols());
  net.b1 = flat.segment(n1, n2);
  net.w2 = flat.segment(n1 + n2, n3).reshaped(net.w2.rows(), net.w2.cols());
  net.b2 = flat.segment(n1 + n2 + n3, n4);
}

// ---------------------------------------------------------------------------
// Contractivity

/// Scales each layer with spectral norm s by min(1, c / s), where
/// c = target^(1 / layers). Returns the resulting product of norms.
inline double spectral_normalize_layers(std::span<Matrix* const> layers, double lipschitz_target,
                                        int power_iters = 200) {
  if (power_iters < 1) throw ConfigError("spectral_normalize: power_iters must be >= 1");
  if (layers.empty()) return 1.0;
  const double budget = std::pow(lipschitz_target, 1.0 / static_cast<double>(layers.size()));
  double product = 1.0;
  for (Matrix* w : layers) {
    const double sigma = spectral_norm(*w, std::min(power_iters, 50), std::max(power_iters, 50)).value;
    if (sigma > budget) {
      *w *= budget / sigma;
      product *= budget;
    } else {
      product *= sigma;
    }
  }
  return product;
}

inline MlpSem spectral_normalize(MlpSem model, int power_iters = 200) {
  Matrix* layers[] = {&model.w1, &model.w2};
  spectral_normalize_layers(layers, model.lipschitz_target, power_iters);
  return model;
}

/// Rescales b onto the spectral-norm ball of radius contractivity_bound.
inline LinearSem project_contractive(LinearSem model) {
  model.b.diagonal().setZero();
  const double sigma = spectral_norm(model.b).value;
  if (sigma > model.contractivity_bound) model.b *= model.contractivity_bound / sigma;
  return model;
}

inline SemModel enforce_contractivity(const SemModel& model) {
  if (const auto* lin = std::get_if<LinearSem>(&model)) return project_contractive(*lin);
  return spectral_normalize(std::get<MlpSem>(model));
}

/// Upper bound on the Lipschitz constant used by the contractivity invariant:
/// ||B||_2 (linear) or ||w1||_2 ||w2||_2 (network, tanh is 1-Lipschitz).
inline double lipschitz_bound(const SemModel& model) {
  if (const auto* lin = std::get_if<LinearSem>(&model)) return spectral_norm(lin->b).value;
  const auto& net = std::get<MlpSem>(model);
  return spectral_norm(net.w1).value * spectral_norm(net.w2).value;
}

inline double contractivity_target(const SemModel& model) {
  if (const auto* lin = std::get_if<LinearSem>(&model)) return lin->contractivity_bound;
  return std::get<MlpSem>(model).lipschitz_target;
}

// ---------------------------------------------------------------------------
// Interventional residuals and simulation

/// eps_k = x_k - F_k(x) on purely observed coordinates, in ascending order.
inline Vector epsilon_observed(const SemModel& model, const Matrix& mask, const Vector& x,
                               const InterventionMask& iv) {
  const Vector f = forward_f(model, mask, x);
  const auto obs = indices_where(iv.observed, 1);
  Vector eps(static_cast<Eigen::Index>(obs.size()));
  for (std::size_t i = 0; i < obs.size(); ++i) eps[i] = x[obs[i]] - f[obs[i]];
  return eps;
}

struct FixedPointOptions {
  double tol = 1e-8;
  int max_iter = 1000;
};

/// Solves x = D F(x) + D eps + c by Picard iteration from x0 = D eps + c.
inline Vector solve_fixed_point(const SemModel& model, const Matrix& mask, const InterventionMask& iv,
                                const Vector& eps, FixedPointOptions opt = {}) {
  if (!(opt.tol > 0.0)) throw ConfigError("solve_fixed_point: tol must be > 0");
  const Vector d = iv.d();
  const Vector base = d.cwiseProduct(eps) + iv.clamp;
  Vector x = base;
  for (int it = 0; it < opt.max_iter; ++it) {
    Vector next = d.cwiseProduct(forward_f(model, mask, x)) + base;
    const double change = (next - x).cwiseAbs().maxCoeff();
    x = std::move(next);
    if (!x.allFinite()) break;
    if (change <= opt.tol) return x;
  }
  throw NonConvergenceError("solve_fixed_point: no convergence within " + std::to_string(opt.max_iter) +
                            " iterations (model not contractive?)");
}

}  // namespace mnarflow
