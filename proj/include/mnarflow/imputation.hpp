#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "mnarflow/core.hpp"
#include "mnarflow/dataset.hpp"
#include "mnarflow/likelihood.hpp"
#include "mnarflow/mnar.hpp"
#include "mnarflow/parallel.hpp"
#include "mnarflow/random.hpp"
#include "mnarflow/sem.hpp"

namespace mnarflow {

/// Precision of X under hard interventions for the linear SEM
/// X = D B^T X + D eps + C with intervened nodes ~ N(0, 1):
///   (I - B D) (D Lambda^{-1} D + (I - D))^{-1} (I - D B^T).
/// Without interventions this is (I - B) Lambda (I - B^T).
inline Matrix interventional_precision(const Matrix& b, const NoiseModel& noise, const InterventionMask& iv) {
  require_square(b, "interventional_precision");
  const Eigen::Index k = b.rows();
  if (noise.variances.size() != k || iv.k() != k) throw DimensionError("interventional_precision: size mismatch");
  const Vector d = iv.d();
  Vector inner_inv(k);
  for (Eigen::Index i = 0; i < k; ++i) inner_inv[i] = 1.0 / (d[i] * noise.variances[i] + (1.0 - d[i]));
  const Matrix a = Matrix::Identity(k, k) - d.asDiagonal() * b.transpose();  // I - D B^T
  return a.transpose() * inner_inv.asDiagonal() * a;
}

struct GaussianPosterior {
  std::vector<int> missing;
  Vector mean;
  Matrix precision;
};

/// Conditional of the missing block given observed values:
/// precision P_{mm}, mean -P_{mm}^{-1} P_{mo} x_o.
inline GaussianPosterior gaussian_posterior(const Matrix& b, const NoiseModel& noise, const InterventionMask& iv,
                                            const std::vector<int>& observed_idx, const Vector& observed_vals) {
  const int k = static_cast<int>(b.rows());
  if (static_cast<Eigen::Index>(observed_idx.size()) != observed_vals.size()) {
    throw DimensionError("gaussian_posterior: observed index/value size mismatch");
  }
  std::vector<char> is_obs(k, 0);
  for (int idx : observed_idx) {
    if (idx < 0 || idx >= k || is_obs[idx]) throw DataError("gaussian_posterior: bad observed index");
    is_obs[idx] = 1;
  }
  GaussianPosterior post;
  for (int i = 0; i < k; ++i)
    if (!is_obs[i]) post.missing.push_back(i);
  const auto m = static_cast<Eigen::Index>(post.missing.size());
  if (m == 0) return post;

  const Matrix prec = interventional_precision(b, noise, iv);
  post.precision.resize(m, m);
  Matrix cross(m, static_cast<Eigen::Index>(observed_idx.size()));
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index c = 0; c < m; ++c) post.precision(a, c) = prec(post.missing[a], post.missing[c]);
    for (std::size_t c = 0; c < observed_idx.size(); ++c) cross(a, c) = prec(post.missing[a], observed_idx[c]);
  }
  Eigen::LLT<Matrix> llt(post.precision);
  if (llt.info() != Eigen::Success) throw NumericError("gaussian_posterior: precision is not positive definite");
  post.mean = -llt.solve(cross * observed_vals);
  return post;
}

/// Completed records. Row i of x corresponds to record source[i] of the
/// input dataset; several rows per record appear when more than one
/// posterior draw is requested.
struct ImputedBatch {
  Matrix x;
  BitMatrix r;
  BitMatrix s;
  std::vector<int> source;
  std::vector<int> attempts;
  int fallbacks = 0;

  int n() const { return static_cast<int>(x.rows()); }

  InterventionMask intervention(int i) const {
    InterventionMask iv{s.row(i).transpose(), Vector::Zero(x.cols())};
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      if (!s(i, c)) iv.clamp[c] = x(i, c);
    return iv;
  }

  double mean_attempts() const {
    if (attempts.empty()) return 0.0;
    double t = 0.0;
    for (int a : attempts) t += a;
    return t / static_cast<double>(attempts.size());
  }
};

/// Batch with observed coordinates copied and nothing imputed; cells with
/// r = 0 keep whatever finite value y holds (pre-imputed input).
inline ImputedBatch passthrough_batch(const Dataset& data) {
  ImputedBatch out;
  out.x = data.y;
  out.r = data.r;
  out.s = data.s;
  out.source.resize(data.n());
  for (int i = 0; i < data.n(); ++i) out.source[i] = i;
  out.attempts.assign(data.n(), 1);
  return out;
}

struct ImputeContext {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  int threads = 1;
  int draws_per_record = 1;
};

namespace detail {

inline ImputedBatch replicate_rows(const Dataset& data, int draws) {
  ImputedBatch out;
  const int n = data.n() * draws;
  out.x.resize(n, data.k());
  out.r.resize(n, data.k());
  out.s.resize(n, data.k());
  out.source.resize(n);
  out.attempts.assign(n, 0);
  for (int i = 0; i < data.n(); ++i) {
    for (int d = 0; d < draws; ++d) {
      const int row = i * draws + d;
      out.x.row(row) = data.y.row(i);
      out.r.row(row) = data.r.row(i);
      out.s.row(row) = data.s.row(i);
      out.source[row] = i;
    }
  }
  return out;
}

}  // namespace detail

/// Exact posterior imputation for a linear SEM (effective weights b) with an
/// ignorable mechanism.
inline ImputedBatch impute_gaussian(const Dataset& data, const Matrix& b, const NoiseModel& noise,
                                    const ImputeContext& ctx = {}) {
  const int draws = std::max(1, ctx.draws_per_record);
  ImputedBatch out = detail::replicate_rows(data, draws);
  const int k = data.k();

  // Factorizations are shared by records with the same (interventions, missing) pattern.
  struct Cached {
    Matrix precision;
    Matrix chol_l;  // precision^{-1} = L^{-T} L^{-1}
  };
  std::map<std::vector<std::uint8_t>, Cached> cache;
  std::vector<const Cached*> per_record(data.n(), nullptr);
  for (int i = 0; i < data.n(); ++i) {
    if (data.complete_record(i)) continue;
    std::vector<std::uint8_t> key(2 * k);
    for (int c = 0; c < k; ++c) {
      key[c] = data.s(i, c);
      key[k + c] = data.r(i, c);
    }
    auto it = cache.find(key);
    if (it == cache.end()) {
      const InterventionMask iv = data.intervention(i);
      Cached entry;
      entry.precision = interventional_precision(b, noise, iv);
      std::vector<int> miss;
      for (int c = 0; c < k; ++c)
        if (!data.r(i, c)) miss.push_back(c);
      Matrix pmm(miss.size(), miss.size());
      for (std::size_t a = 0; a < miss.size(); ++a)
        for (std::size_t c = 0; c < miss.size(); ++c) pmm(a, c) = entry.precision(miss[a], miss[c]);
      Eigen::LLT<Matrix> llt(pmm);
      if (llt.info() != Eigen::Success) throw NumericError("impute_gaussian: posterior precision not positive definite");
      entry.chol_l = llt.matrixL();
      it = cache.emplace(std::move(key), std::move(entry)).first;
    }
    per_record[i] = &it->second;
  }

  parallel_for(static_cast<std::size_t>(data.n()), ctx.threads, [&](std::size_t idx) {
    const int i = static_cast<int>(idx);
    for (int d = 0; d < draws; ++d) out.attempts[i * draws + d] = 1;
    const Cached* c = per_record[i];
    if (!c) return;
    std::vector<int> miss, obs;
    for (int j = 0; j < k; ++j) (data.r(i, j) ? obs : miss).push_back(j);
    Vector xo(obs.size());
    for (std::size_t j = 0; j < obs.size(); ++j) xo[j] = data.y(i, obs[j]);
    Vector rhs = Vector::Zero(miss.size());
    for (std::size_t a = 0; a < miss.size(); ++a)
      for (std::size_t j = 0; j < obs.size(); ++j) rhs[a] -= c->precision(miss[a], obs[j]) * xo[j];
    // mean = P^{-1} rhs with P = L L^T
    const auto lower = c->chol_l.triangularView<Eigen::Lower>();
    const Vector mean = lower.transpose().solve(lower.solve(rhs));
    for (int d = 0; d < draws; ++d) {
      Rng rng = keyed_rng(ctx.seed, {ctx.epoch, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(d), 1});
      Vector zdraw(miss.size());
      for (auto& v : zdraw) v = standard_normal(rng);
      const Vector sample = mean + lower.transpose().solve(zdraw);
      for (std::size_t a = 0; a < miss.size(); ++a) out.x(i * draws + d, miss[a]) = sample[a];
    }
  });
  return out;
}

/// log of the unnormalized posterior weight p(x | theta) p(r | x, phi).
/// Intervened indicators are excluded from the missingness term.
inline double log_posterior_weight(const Vector& x_full, const SemModel& model, const Matrix& mask,
                                   const NoiseModel& noise, const InterventionMask& iv, const MnarModel& mnar,
                                   const BitVector& r) {
  const BitVector skip = (iv.observed.array() == 0).cast<std::uint8_t>();
  return target_log_density(SemPoint(model, mask, x_full), noise, iv, {LogDetMode::exact, {}}, nullptr) +
         log_prob_r(mnar, r, x_full, skip);
}

inline double posterior_weight(const Vector& x_full, const SemModel& model, const Matrix& mask,
                               const NoiseModel& noise, const InterventionMask& iv, const MnarModel& mnar,
                               const BitVector& r) {
  return std::exp(log_posterior_weight(x_full, model, mask, noise, iv, mnar, r));
}

enum class RejectionFallback { best_weight, resample_proposal };

struct RejectionConfig {
  double proposal_scale = 2.0;  // proposal variance = scale * sigma_k^2
  double c0 = 0.0;              // <= 0: adaptive envelope from pilot draws
  int pilot_draws = 64;
  double envelope_inflation = 2.0;
  int max_attempts = 200;
  int max_restarts = 32;
  RejectionFallback fallback = RejectionFallback::best_weight;

  void validate() const {
    if (max_attempts < 1) throw ConfigError("RejectionConfig: max_attempts must be >= 1");
    if (!(proposal_scale > 0.0)) throw ConfigError("RejectionConfig: proposal_scale must be > 0");
    if (!(envelope_inflation >= 1.0)) throw ConfigError("RejectionConfig: envelope_inflation must be >= 1");
    if (c0 <= 0.0 && pilot_draws < 1) throw ConfigError("RejectionConfig: adaptive envelope needs pilot_draws >= 1");
  }
};

/// Iterates x_m <- F(x)_m on the missing coordinates with everything else
/// held at its observed value. Returns the last iterate if it does not settle.
inline Vector fixed_point_completion(const SemModel& model, const Matrix& mask, Vector x,
                                     const std::vector<int>& missing, double tol = 1e-8, int max_iter = 1000) {
  for (int m : missing) x[m] = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    const Vector f = forward_f(model, mask, x);
    double change = 0.0;
    for (int m : missing) {
      change = std::max(change, std::abs(f[m] - x[m]));
      x[m] = f[m];
    }
    if (!x.allFinite()) break;
    if (change <= tol) break;
  }
  for (int m : missing)
    if (!std::isfinite(x[m])) x[m] = 0.0;
  return x;
}

/// Rejection-sampling E-step. For each record the proposal is a diagonal
/// Gaussian around the fixed-point completion; a draw is accepted with
/// probability weight / (c0 Q). The adaptive envelope starts at the largest
/// pilot ratio times `envelope_inflation`; a draw exceeding it raises c0 to
/// inflation * ratio and restarts the record.
inline ImputedBatch impute_rejection(const Dataset& data, const SemModel& model, const Matrix& mask,
                                     const NoiseModel& noise, const MnarModel& mnar, const RejectionConfig& cfg,
                                     const ImputeContext& ctx = {}) {
  cfg.validate();
  const int draws = std::max(1, ctx.draws_per_record);
  ImputedBatch out = detail::replicate_rows(data, draws);
  const int k = data.k();
  const bool linear = is_linear(model);
  std::vector<int> fallback_flags(out.n(), 0);

  parallel_for(static_cast<std::size_t>(data.n()), ctx.threads, [&](std::size_t idx) {
    const int i = static_cast<int>(idx);
    std::vector<int> miss;
    for (int c = 0; c < k; ++c)
      if (!data.r(i, c)) miss.push_back(c);
    if (miss.empty()) {
      for (int d = 0; d < draws; ++d) out.attempts[i * draws + d] = 1;
      return;
    }
    const InterventionMask iv = data.intervention(i);
    const BitVector r = data.r.row(i).transpose();
    const BitVector skip = (iv.observed.array() == 0).cast<std::uint8_t>();
    Vector base = data.y.row(i).transpose();
    const Vector center = fixed_point_completion(model, mask, base, miss);
    Vector sd(miss.size());
    for (std::size_t a = 0; a < miss.size(); ++a) sd[a] = std::sqrt(cfg.proposal_scale * noise.variances[miss[a]]);

    // The linear log-det does not depend on x.
    const double linear_logdet = linear ? logdet_exact(SemPoint(model, mask, center), iv) : 0.0;
    auto log_weight = [&](const Vector& x) {
      const SemPoint pt(model, mask, x);
      double lp = 0.0;
      const Vector& f = pt.f();
      for (int c = 0; c < k; ++c) {
        lp += iv.observed[c] ? normal_log_pdf(x[c] - f[c], noise.variances[c]) : normal_log_pdf(x[c], 1.0);
      }
      lp += linear ? linear_logdet : logdet_exact(pt, iv);
      return lp + log_prob_r(mnar, r, x, skip);
    };
    struct Draw {
      Vector x;
      double log_ratio;
      double log_weight;
    };
    auto propose = [&](Rng& rng) {
      Draw dr{center, 0.0, 0.0};
      double log_q = 0.0;
      for (std::size_t a = 0; a < miss.size(); ++a) {
        const double z = standard_normal(rng);
        dr.x[miss[a]] = center[miss[a]] + sd[a] * z;
        log_q += normal_log_pdf(sd[a] * z, sd[a] * sd[a]);
      }
      dr.log_weight = log_weight(dr.x);
      dr.log_ratio = dr.log_weight - log_q;
      return dr;
    };

    const double log_inflate = std::log(cfg.envelope_inflation);
    for (int d = 0; d < draws; ++d) {
      const int row = i * draws + d;
      Rng rng = keyed_rng(ctx.seed, {ctx.epoch, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(d), 2});
      Draw best{center, -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
      double log_c0 = cfg.c0 > 0.0 ? std::log(cfg.c0) : -std::numeric_limits<double>::infinity();
      if (cfg.c0 <= 0.0) {
        for (int p = 0; p < cfg.pilot_draws; ++p) {
          Draw dr = propose(rng);
          log_c0 = std::max(log_c0, dr.log_ratio);
          if (dr.log_weight > best.log_weight) best = std::move(dr);
        }
        log_c0 += log_inflate;
      }
      bool accepted = false;
      int attempts = 0;
      for (int restart = 0; restart <= cfg.max_restarts && !accepted; ++restart) {
        bool raised = false;
        for (int a = 0; a < cfg.max_attempts; ++a) {
          Draw dr = propose(rng);
          ++attempts;
          if (dr.log_weight > best.log_weight) best = dr;
          if (dr.log_ratio > log_c0) {
            log_c0 = dr.log_ratio + log_inflate;
            raised = true;
            break;
          }
          if (std::log(uniform01(rng)) < dr.log_ratio - log_c0) {
            for (int m : miss) out.x(row, m) = dr.x[m];
            accepted = true;
            break;
          }
        }
        if (!raised) break;
      }
      out.attempts[row] = attempts;
      if (accepted) continue;
      if (!std::isfinite(best.log_weight)) {
        throw NumericError("impute_rejection: record " + std::to_string(i + 1) +
                           " has zero posterior weight at every proposal (proposal mismatch)");
      }
      fallback_flags[row] = 1;
      const Vector chosen = cfg.fallback == RejectionFallback::best_weight ? best.x : propose(rng).x;
      for (int m : miss) out.x(row, m) = chosen[m];
    }
  });
  for (int f : fallback_flags) out.fallbacks += f;
  return out;
}

}  // namespace mnarflow
