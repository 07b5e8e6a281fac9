#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mnarflow/core.hpp"
#include "mnarflow/dataset.hpp"
#include "mnarflow/graph.hpp"
#include "mnarflow/imputation.hpp"
#include "mnarflow/likelihood.hpp"
#include "mnarflow/mnar.hpp"
#include "mnarflow/random.hpp"
#include "mnarflow/sem.hpp"

namespace mnarflow {

enum class EStepMode { rejection, gaussian_exact, passthrough };
enum class LogDetChoice { automatic, exact, stochastic };
enum class ModelFamily { linear, mlp };

inline const char* to_string(EStepMode m) {
  switch (m) {
    case EStepMode::rejection: return "rejection";
    case EStepMode::gaussian_exact: return "gaussian-exact";
    default: return "passthrough";
  }
}

struct TrainConfig {
  int epochs = 100;
  int batch_size = 64;
  double learning_rate = 1e-2;
  double lambda1 = 1e-2;    // expected mask L1
  double lambda2 = 2e-3;    // missingness-weight L1
  double lambda_dag = 0.0;  // acyclicity penalty on the expected mask; 0 disables
  EStepMode estep_mode = EStepMode::rejection;
  LogDetChoice logdet_mode = LogDetChoice::automatic;
  std::uint64_t seed = 0;
  double edge_threshold = 0.1;
  double m_edge_threshold = 0.1;

  ModelFamily family = ModelFamily::linear;
  int hidden = 16;
  Activation activation = Activation::tanh;
  double lipschitz_target = 0.9;      // network models
  double linear_bound = 0.95;         // spectral-norm radius for linear models
  double init_scale = 0.1;
  double temperature = 1.0;
  bool anneal_temperature = false;
  double final_temperature = 0.1;
  double noise_sigma = 0.25;
  bool learn_variance = false;
  bool ignorable_mechanism = false;
  bool early_stop = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int threads = 1;
  int draws_per_record = 1;
  RejectionConfig rejection{};
  LogDetEstimatorConfig estimator{};

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
    if (lambda1 < 0 || lambda2 < 0 || lambda_dag < 0) throw ConfigError("train.lambda* must be >= 0");
    if (hidden < 1) throw ConfigError("train.hidden must be >= 1");
    if (!(lipschitz_target > 0.0 && lipschitz_target <= 1.0)) throw ConfigError("train.lipschitz_target must be in (0, 1]");
    if (!(linear_bound > 0.0)) throw ConfigError("train.linear_bound must be > 0");
    if (!(temperature > 0.0) || !(final_temperature > 0.0)) throw ConfigError("train.temperature must be > 0");
    if (!(noise_sigma > 0.0)) throw ConfigError("train.noise_sigma must be > 0");
    if (!(edge_threshold > 0.0) || !(m_edge_threshold > 0.0)) throw ConfigError("train thresholds must be > 0");
    rejection.validate();
    estimator.validate();
  }
};

struct EpochRecord {
  int epoch = 0;
  double objective = 0.0;     // penalized Q on this epoch's imputations, after the M-step
  double objective_se = 0.0;  // standard error of the per-record mean
  double proxy_loglik = 0.0;  // mean full-law log-likelihood of complete records
  double mean_attempts = 0.0;
  int fallbacks = 0;
  int records = 0;
  double lipschitz = 0.0;
  double temperature = 1.0;
};

struct AdamState {
  Vector m, v;
  long t = 0;

  void step(Vector& params, const Vector& grad, double lr, double b1, double b2, double eps) {
    if (m.size() != params.size()) {
      m = Vector::Zero(params.size());
      v = Vector::Zero(params.size());
    }
    ++t;
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    params.array() += lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

/// Full parameter bundle (theta, phi), optimizer moments and history.
struct FitState {
  SemModel sem;
  GumbelMask mask;
  NoiseModel noise;
  MnarModel mnar;
  AdamState adam_theta;
  AdamState adam_phi;
  std::vector<EpochRecord> history;
  bool dag_constrained = false;
  bool estep_passthrough = false;
  std::vector<int> last_attempts;  // per imputed record, from the final E-step
};

struct QValue {
  double value = 0.0;  // mean per-record log p(x) + log p(r | x)
  double se = 0.0;
  double penalized = 0.0;
};

namespace detail {

inline LogDetMode resolve_logdet(const TrainConfig& cfg, const SemModel& sem) {
  switch (cfg.logdet_mode) {
    case LogDetChoice::exact: return LogDetMode::exact;
    case LogDetChoice::stochastic: return LogDetMode::stochastic;
    default: return (is_linear(sem) && node_count(sem) <= 64) ? LogDetMode::exact : LogDetMode::stochastic;
  }
}

inline BitVector skip_of(const BitMatrix& s, int i) { return (s.row(i).array() == 0).cast<std::uint8_t>().transpose(); }

/// Packs theta = (sem params, mask logits, log variances if learnable).
inline Vector pack_theta(const FitState& st) {
  const Vector sem = pack(st.sem);
  const Vector logits = st.mask.logits.reshaped();
  Vector out(sem.size() + logits.size() + (st.noise.learnable ? st.noise.variances.size() : 0));
  out.head(sem.size()) = sem;
  out.segment(sem.size(), logits.size()) = logits;
  if (st.noise.learnable) out.tail(st.noise.variances.size()) = st.noise.variances.array().log().matrix();
  return out;
}

inline void unpack_theta(FitState& st, const Vector& flat) {
  const Eigen::Index ns = pack(st.sem).size();
  const Eigen::Index nl = st.mask.logits.size();
  unpack(st.sem, flat.head(ns));
  st.mask.logits = flat.segment(ns, nl).reshaped(st.mask.logits.rows(), st.mask.logits.cols());
  st.mask.logits.diagonal().setZero();
  if (st.noise.learnable) st.noise.variances = flat.tail(st.noise.variances.size()).array().exp().matrix();
}

inline Vector pack_phi(const MnarModel& m) {
  Vector out(m.w.size() + m.z.size());
  out << m.w.reshaped(), m.z;
  return out;
}

inline void unpack_phi(MnarModel& m, const Vector& flat) {
  m.w = flat.head(m.w.size()).reshaped(m.w.rows(), m.w.cols());
  m.z = flat.tail(m.z.size());
  m.enforce_support();
}

}  // namespace detail

/// Gradient of the per-record mean objective over `rows` of a batch.
struct BatchGradient {
  double value = 0.0;
  Vector theta;  // same layout as pack_theta
  Vector phi;    // same layout as pack_phi
};

/// Mean over rows of log p(x_i | theta) + log p(r_i | x_i, phi) under the
/// given realized mask, with gradients w.r.t. theta (through dM/dlogit) and
/// phi. Penalties are not included.
inline BatchGradient batch_objective(const ImputedBatch& batch, const std::vector<int>& rows, const FitState& st,
                                     const MaskSample& mask, const DensityOptions& density, std::uint64_t rng_key,
                                     bool want_theta, bool want_phi) {
  const int k = node_count(st.sem);
  SemModel grad_sem = zeros_like(st.sem);
  Matrix grad_mask = Matrix::Zero(k, k);
  Vector grad_logvar = Vector::Zero(k);
  Matrix grad_w = Matrix::Zero(k, k);
  Vector grad_z = Vector::Zero(k);
  double total = 0.0;

  // Linear exact log-det depends only on the intervention pattern.
  const bool cache_logdet = is_linear(st.sem) && density.mode == LogDetMode::exact;
  struct LogDetEntry {
    double value;
    Matrix grad;
    int count;
  };
  std::map<std::vector<std::uint8_t>, LogDetEntry> logdets;
  const Matrix linear_jac = cache_logdet ? Matrix(mask.value.cwiseProduct(std::get<LinearSem>(st.sem).b).transpose())
                                         : Matrix();

  for (int row : rows) {
    const Vector x = batch.x.row(row).transpose();
    const InterventionMask iv = batch.intervention(row);
    const SemPoint pt(st.sem, mask.value, x);
    const Vector& f = pt.f();
    Vector grad_f = Vector::Zero(k);
    double lp = 0.0;
    for (int c = 0; c < k; ++c) {
      if (!iv.observed[c]) {
        lp += normal_log_pdf(x[c], 1.0);
        continue;
      }
      const double var = st.noise.variances[c];
      const double eps = x[c] - f[c];
      lp += normal_log_pdf(eps, var);
      grad_f[c] = eps / var;
      grad_logvar[c] += -0.5 + 0.5 * eps * eps / var;
    }
    Matrix grad_jac;
    if (cache_logdet) {
      std::vector<std::uint8_t> key(iv.observed.data(), iv.observed.data() + k);
      auto it = logdets.find(key);
      if (it == logdets.end()) {
        LogDetEntry e{0.0, Matrix(), 0};
        e.value = logdet_from_jacobian(linear_jac, iv.d(), want_theta ? &e.grad : nullptr);
        it = logdets.emplace(std::move(key), std::move(e)).first;
      }
      lp += it->second.value;
      ++it->second.count;
    } else if (density.mode == LogDetMode::exact) {
      lp += logdet_exact(pt, iv, want_theta ? &grad_jac : nullptr);
    } else {
      Rng rng = keyed_rng(rng_key, {static_cast<std::uint64_t>(row)});
      lp += logdet_stochastic(pt, iv, density.estimator, rng, want_theta ? &grad_jac : nullptr).value;
    }
    if (want_theta) pt.backward(grad_f, grad_jac, grad_sem, grad_mask);

    const BitVector r = batch.r.row(row).transpose();
    Vector grad_eta;
    lp += log_prob_r(st.mnar, r, x, detail::skip_of(batch.s, row), want_phi ? &grad_eta : nullptr);
    if (want_phi) accumulate_mnar_gradient(grad_eta, x, grad_w, grad_z);
    total += lp;
  }
  if (cache_logdet && want_theta) {
    Matrix grad_jac = Matrix::Zero(k, k);
    for (const auto& [key, e] : logdets) grad_jac += static_cast<double>(e.count) * e.grad;
    // Linear F: the log-det adjoint enters only through J = (M o B)^T.
    SemPoint(st.sem, mask.value, Vector::Zero(k)).backward(Vector::Zero(k), grad_jac, grad_sem, grad_mask);
  }

  const double inv_n = rows.empty() ? 0.0 : 1.0 / static_cast<double>(rows.size());
  BatchGradient out;
  out.value = total * inv_n;
  if (want_theta) {
    Matrix grad_logits = grad_mask.cwiseProduct(mask.dvalue_dlogit);
    grad_logits.diagonal().setZero();
    const Vector sem_flat = pack(grad_sem);
    Vector flat(sem_flat.size() + grad_logits.size() + (st.noise.learnable ? k : 0));
    flat.head(sem_flat.size()) = sem_flat;
    flat.segment(sem_flat.size(), grad_logits.size()) = grad_logits.reshaped();
    if (st.noise.learnable) flat.tail(k) = grad_logvar;
    out.theta = flat * inv_n;
  }
  if (want_phi) {
    grad_w.diagonal().setZero();
    MnarModel g{grad_w, grad_z, std::nullopt};
    out.phi = detail::pack_phi(g) * inv_n;
  }
  return out;
}

/// Penalty value lambda1 E||M||_1 + lambda_dag h(E[M]) and its logit gradient.
inline double theta_penalty(const GumbelMask& mask, const TrainConfig& cfg, Matrix* grad_logits) {
  const Matrix em = expected_mask(mask);
  Matrix dsig = em.unaryExpr([](double p) { return p * (1.0 - p); });
  dsig.diagonal().setZero();
  double value = cfg.lambda1 * em.sum();
  Matrix g = cfg.lambda1 * dsig;
  if (cfg.lambda_dag > 0.0) {
    Matrix dh;
    value += cfg.lambda_dag * acyclicity_penalty(em, dh);
    g += cfg.lambda_dag * dh.cwiseProduct(dsig);
  }
  g.diagonal().setZero();
  if (grad_logits) *grad_logits = g;
  return value;
}

inline double phi_penalty(const MnarModel& m, const TrainConfig& cfg) { return cfg.lambda2 * m.w.cwiseAbs().sum(); }

/// Monte-Carlo estimate of Q(Theta | Theta^t): mean over imputed rows of
/// log p(x | theta) + log p(r | x, phi), using the expected mask.
inline QValue q_objective(const ImputedBatch& imputed, const FitState& st, const TrainConfig& cfg,
                          std::uint64_t rng_key = 0) {
  const int k = node_count(st.sem);
  const Matrix mask = expected_mask(st.mask);
  DensityOptions density{detail::resolve_logdet(cfg, st.sem), cfg.estimator};
  std::vector<double> values(imputed.n());
  std::map<std::vector<std::uint8_t>, double> logdets;
  for (int i = 0; i < imputed.n(); ++i) {
    const Vector x = imputed.x.row(i).transpose();
    const InterventionMask iv = imputed.intervention(i);
    const SemPoint pt(st.sem, mask, x);
    double lp = 0.0;
    const Vector& f = pt.f();
    for (int c = 0; c < k; ++c)
      lp += iv.observed[c] ? normal_log_pdf(x[c] - f[c], st.noise.variances[c]) : normal_log_pdf(x[c], 1.0);
    if (density.mode == LogDetMode::exact && is_linear(st.sem)) {
      std::vector<std::uint8_t> key(iv.observed.data(), iv.observed.data() + k);
      auto it = logdets.find(key);
      if (it == logdets.end()) it = logdets.emplace(key, logdet_exact(pt, iv)).first;
      lp += it->second;
    } else if (density.mode == LogDetMode::exact) {
      lp += logdet_exact(pt, iv);
    } else {
      Rng rng = keyed_rng(rng_key, {static_cast<std::uint64_t>(i), 77});
      lp += logdet_stochastic(pt, iv, density.estimator, rng).value;
    }
    lp += log_prob_r(st.mnar, imputed.r.row(i).transpose(), x, detail::skip_of(imputed.s, i));
    values[i] = lp;
  }
  QValue q;
  if (values.empty()) return q;
  const double n = static_cast<double>(values.size());
  q.value = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - q.value) * (v - q.value);
  q.se = values.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  q.penalized = q.value - theta_penalty(st.mask, cfg, nullptr) - phi_penalty(st.mnar, cfg);
  return q;
}

/// Gradient of the penalized q_objective (expected mask, all rows). Frozen
/// coordinates (mask and mechanism diagonals) get exactly zero.
inline BatchGradient q_gradient(const ImputedBatch& imputed, const FitState& st, const TrainConfig& cfg,
                                std::uint64_t rng_key = 0) {
  const Matrix em = expected_mask(st.mask);
  MaskSample ms{em, em.unaryExpr([](double p) { return p * (1.0 - p); })};
  ms.dvalue_dlogit.diagonal().setZero();
  std::vector<int> rows(imputed.n());
  std::iota(rows.begin(), rows.end(), 0);
  const DensityOptions density{detail::resolve_logdet(cfg, st.sem), cfg.estimator};
  BatchGradient g = batch_objective(imputed, rows, st, ms, density, rng_key, true, true);
  Matrix pen;
  g.value -= theta_penalty(st.mask, cfg, &pen) + phi_penalty(st.mnar, cfg);
  g.theta.segment(pack(st.sem).size(), pen.size()) -= pen.reshaped();
  for (Eigen::Index i = 0; i < st.mnar.w.size(); ++i) {
    const double w = st.mnar.w.data()[i];
    g.phi[i] -= cfg.lambda2 * (w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0));
  }
  return g;
}

/// Fresh (theta, phi): zero mask logits, small random weights projected to
/// the contractive set, and a complete-case logistic fit for phi (falling
/// back to marginal intercepts when no usable cases exist).
inline FitState initialize_state(const Dataset& data, const TrainConfig& cfg) {
  const int k = data.k();
  FitState st;
  Rng rng = keyed_rng(cfg.seed, {0x1417});
  auto small = [&](Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = cfg.init_scale * standard_normal(rng);
    return m;
  };
  if (cfg.family == ModelFamily::linear) {
    LinearSem lin{small(k, k), cfg.linear_bound};
    lin.b.diagonal().setZero();
    st.sem = project_contractive(lin);
  } else {
    MlpSem net;
    net.w1 = small(k, cfg.hidden);
    net.b1 = Vector::Zero(cfg.hidden);
    net.w2 = small(cfg.hidden, k);
    net.b2 = Vector::Zero(k);
    net.activation = cfg.activation;
    net.lipschitz_target = cfg.lipschitz_target;
    st.sem = spectral_normalize(net);
  }
  st.mask = GumbelMask{Matrix::Zero(k, k), cfg.temperature, false};
  st.noise = NoiseModel::isotropic(k, cfg.noise_sigma);
  st.noise.learnable = cfg.learn_variance;
  try {
    st.mnar = fit_complete_cases(data, {cfg.lambda2, 2000, 10.0, 1e-9});
  } catch (const TrainingError&) {
    st.mnar = marginal_mnar(data);
  }
  st.dag_constrained = cfg.lambda_dag > 0.0;
  return st;
}

/// Imputes the dataset under the current snapshot (expected mask).
inline ImputedBatch e_step(const Dataset& data, const FitState& st, const TrainConfig& cfg, int epoch) {
  if (data.fully_observed() || cfg.estep_mode == EStepMode::passthrough) return passthrough_batch(data);
  const Matrix mask = expected_mask(st.mask);
  ImputeContext ctx{cfg.seed, static_cast<std::uint64_t>(epoch), cfg.threads, cfg.draws_per_record};
  if (cfg.estep_mode == EStepMode::gaussian_exact) {
    const auto* lin = std::get_if<LinearSem>(&st.sem);
    if (!lin) throw ConfigError("gaussian-exact E-step requires a linear model");
    return impute_gaussian(data, mask.cwiseProduct(lin->b), st.noise, ctx);
  }
  return impute_rejection(data, st.sem, mask, st.noise, st.mnar, cfg.rejection, ctx);
}

/// One pass of minibatch Adam ascent on the penalized objective. theta and
/// phi are updated on alternating minibatches (both on a single batch).
/// theta updates are followed by contractivity projection.
inline FitState m_step(const ImputedBatch& imputed, FitState st, const TrainConfig& cfg, int epoch = 0) {
  const int n = imputed.n();
  if (n == 0) return st;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng = keyed_rng(cfg.seed, {static_cast<std::uint64_t>(epoch), 0x5u});
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  const int batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const DensityOptions density{detail::resolve_logdet(cfg, st.sem), cfg.estimator};
  for (int bi = 0; bi < batches; ++bi) {
    const std::vector<int> rows(order.begin() + bi * cfg.batch_size,
                                order.begin() + std::min(n, (bi + 1) * cfg.batch_size));
    const bool update_theta = batches == 1 || bi % 2 == 0;
    const bool update_phi = batches == 1 || bi % 2 == 1;
    Rng mask_rng = keyed_rng(cfg.seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(bi), 0x6u});
    const MaskSample mask = sample_mask(st.mask, mask_rng);
    const std::uint64_t key = splitmix64(cfg.seed ^ splitmix64((static_cast<std::uint64_t>(epoch) << 32) | bi));
    const BatchGradient g = batch_objective(imputed, rows, st, mask, density, key, update_theta, update_phi);
    if (update_theta) {
      Vector grad = g.theta;
      Matrix pen;
      theta_penalty(st.mask, cfg, &pen);
      const Eigen::Index ns = pack(st.sem).size();
      grad.segment(ns, pen.size()) -= pen.reshaped();
      if (!grad.allFinite()) {
        throw TrainingError("m_step: non-finite theta gradient at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(bi));
      }
      Vector params = detail::pack_theta(st);
      st.adam_theta.step(params, grad, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
      detail::unpack_theta(st, params);
      if (auto* lin = std::get_if<LinearSem>(&st.sem)) lin->b.diagonal().setZero();
      st.sem = enforce_contractivity(st.sem);
    }
    if (update_phi) {
      Vector grad = g.phi;
      const Eigen::Index nw = st.mnar.w.size();
      for (Eigen::Index i = 0; i < nw; ++i) {
        const double w = st.mnar.w.data()[i];
        grad[i] -= cfg.lambda2 * (w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0));
      }
      if (!grad.allFinite()) {
        throw TrainingError("m_step: non-finite phi gradient at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(bi));
      }
      Vector params = detail::pack_phi(st.mnar);
      st.adam_phi.step(params, grad, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
      detail::unpack_phi(st.mnar, params);
    }
  }
  return st;
}

/// Mean log p(x) + log p(r | x) over records without missing entries.
inline double proxy_loglik(const Dataset& data, const FitState& st, const TrainConfig& cfg) {
  std::vector<int> rows;
  for (int i = 0; i < data.n(); ++i)
    if (data.complete_record(i)) rows.push_back(i);
  if (rows.empty()) return std::numeric_limits<double>::quiet_NaN();
  return q_objective(passthrough_batch(data.subset(rows)), st, cfg, cfg.seed ^ 0xABCDu).value;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Penalized EM: per epoch, impute under the frozen snapshot, then one
/// M-step pass. Returns the final state with per-epoch history.
inline FitState run_em(const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.n() == 0) throw DataError("run_em: dataset is empty");
  if (cfg.estep_mode == EStepMode::gaussian_exact &&
      (cfg.family != ModelFamily::linear || !cfg.ignorable_mechanism)) {
    throw ConfigError("gaussian-exact E-step needs a linear model and an ignorable (MCAR/MAR) mechanism");
  }
  FitState st = initialize_state(data, cfg);
  st.estep_passthrough = data.fully_observed() || cfg.estep_mode == EStepMode::passthrough;
  int quiet_epochs = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.anneal_temperature) {
      const double frac = cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 1.0;
      st.mask.temperature = cfg.temperature + frac * (cfg.final_temperature - cfg.temperature);
    }
    const ImputedBatch imputed = e_step(data, st, cfg, epoch);
    const Vector before_theta = detail::pack_theta(st);
    const Vector before_phi = detail::pack_phi(st.mnar);
    st = m_step(imputed, std::move(st), cfg, epoch);
    st.last_attempts = imputed.attempts;

    EpochRecord rec;
    rec.epoch = epoch + 1;
    const QValue q = q_objective(imputed, st, cfg, splitmix64(cfg.seed + 0x9000u + epoch));
    rec.objective = q.penalized;
    rec.objective_se = q.se;
    rec.proxy_loglik = proxy_loglik(data, st, cfg);
    rec.mean_attempts = imputed.mean_attempts();
    rec.fallbacks = imputed.fallbacks;
    rec.records = imputed.n();
    rec.lipschitz = lipschitz_bound(st.sem);
    rec.temperature = st.mask.temperature;
    st.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (cfg.early_stop) {
      const double change = std::max((detail::pack_theta(st) - before_theta).cwiseAbs().maxCoeff(),
                                     (detail::pack_phi(st.mnar) - before_phi).cwiseAbs().maxCoeff());
      quiet_epochs = change < 1e-5 ? quiet_epochs + 1 : 0;
      if (quiet_epochs >= 5) break;
    }
  }
  return st;
}

/// run_em with the acyclicity penalty on the expected mask. With
/// lambda_dag = 0 this is run_em.
inline FitState run_em_dag(const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  return run_em(data, cfg, on_epoch);
}

/// Per-edge strength: |b(j,k)| for linear models, otherwise the mean of
/// |dF_k/dx_j| over 256 standard-normal inputs.
inline Matrix edge_strength(const FitState& st) {
  if (const auto* lin = std::get_if<LinearSem>(&st.sem)) return lin->b.cwiseAbs();
  const int k = node_count(st.sem);
  const Matrix mask = expected_mask(st.mask);
  Rng rng = keyed_rng(0x5EED, {static_cast<std::uint64_t>(k)});
  Matrix acc = Matrix::Zero(k, k);
  constexpr int probes = 256;
  for (int p = 0; p < probes; ++p) {
    Vector x(k);
    for (auto& v : x) v = standard_normal(rng);
    acc += SemPoint(st.sem, mask, x).jacobian().cwiseAbs().transpose();  // (j, k) = |dF_k/dx_j|
  }
  return acc / probes;
}

struct ExtractedGraphs {
  EdgePattern target;
  EdgePattern m_edges;
};

/// Target edge j -> k iff sigmoid(logit) > 0.5 and strength > threshold;
/// DAG-constrained states are pruned to acyclicity by ascending strength.
inline ExtractedGraphs extract_graph(const FitState& st, double threshold = 0.1, double m_threshold = 0.1) {
  const int k = node_count(st.sem);
  const Matrix em = expected_mask(st.mask);
  const Matrix strength = edge_strength(st);
  EdgePattern target(k);
  for (int j = 0; j < k; ++j)
    for (int c = 0; c < k; ++c)
      if (j != c && em(j, c) > 0.5 && strength(j, c) > threshold) target.set(j, c, true);
  if (st.dag_constrained) target = prune_to_acyclic(target, strength.cwiseProduct(em));
  return {target, extract_m_edges(st.mnar, m_threshold)};
}

}  // namespace mnarflow
