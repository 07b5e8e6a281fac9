#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mnarflow/core.hpp"
#include "mnarflow/dataset.hpp"
#include "mnarflow/graph.hpp"
#include "mnarflow/likelihood.hpp"
#include "mnarflow/mnar.hpp"
#include "mnarflow/random.hpp"
#include "mnarflow/sem.hpp"

namespace mnarflow {

enum class SemFamily { linear, tanh };
enum class MechanismKind { mnar, mcar };

inline const char* to_string(SemFamily f) { return f == SemFamily::linear ? "linear" : "tanh"; }
inline const char* to_string(MechanismKind m) { return m == MechanismKind::mnar ? "mnar" : "mcar"; }

/// Synthetic benchmark instance.
struct InstanceSpec {
  int k = 10;
  double er_density = 1.0;
  bool allow_cycles = true;
  SemFamily sem_family = SemFamily::linear;
  double weight_low = 0.25;
  double weight_high = 0.6;
  double lipschitz_target = 0.9;
  double noise_sigma = 0.25;
  int n_per_intervention = 500;
  /// Intervention sets, one regime each; empty means all singletons.
  std::vector<std::vector<int>> interventions;
  bool include_observational = false;
  bool observational_only = false;
  MechanismKind mechanism = MechanismKind::mnar;
  int max_parents = 3;
  double missing_rate = 0.1;
  int calibration_rows = 2000;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1) throw ConfigError("instance.k must be >= 1");
    if (!(er_density >= 0.0)) throw ConfigError("instance.er_density must be >= 0");
    if (!(lipschitz_target > 0.0 && lipschitz_target < 1.0)) throw ConfigError("instance.lipschitz_target must be in (0, 1)");
    if (!(weight_low > 0.0 && weight_high > weight_low)) throw ConfigError("instance weight band must satisfy 0 < low < high");
    if (!(noise_sigma > 0.0)) throw ConfigError("instance.noise_sigma must be > 0");
    if (n_per_intervention < 1) throw ConfigError("instance.n_per_intervention must be >= 1");
    if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw ConfigError("instance.missing_rate must be in [0, 1)");
    if (max_parents < 0) throw ConfigError("instance.max_parents must be >= 0");
    for (const auto& set : interventions)
      for (int v : set)
        if (v < 0 || v >= k) throw ConfigError("instance.interventions: node index out of range");
  }

  /// Intervention regimes in simulation order.
  std::vector<std::vector<int>> regimes() const {
    std::vector<std::vector<int>> out;
    if (observational_only) return {{}};
    if (include_observational) out.emplace_back();
    if (interventions.empty()) {
      for (int v = 0; v < k; ++v) out.push_back({v});
    } else {
      out.insert(out.end(), interventions.begin(), interventions.end());
    }
    return out;
  }
};

/// Ground truth of one instance.
struct Truth {
  SemModel sem;
  Matrix mask;
  NoiseModel noise;
  MnarModel mnar;
  EdgePattern target;
  EdgePattern m_edges;
};

namespace detail {

inline double band_weight(const InstanceSpec& spec, Rng& rng) {
  std::uniform_real_distribution<double> mag(spec.weight_low, spec.weight_high);
  const double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
  return sign * mag(rng);
}

inline Matrix draw_band_weights(const EdgePattern& p, const InstanceSpec& spec, Rng& rng) {
  Matrix w = Matrix::Zero(p.k(), p.k());
  for (int j = 0; j < p.k(); ++j)
    for (int c = 0; c < p.k(); ++c)
      if (p.has(j, c)) w(j, c) = band_weight(spec, rng);
  return w;
}

inline Matrix rescale_to(Matrix w, double target) {
  const double sigma = spectral_norm(w).value;
  if (sigma > target) w *= target / sigma;
  return w;
}

}  // namespace detail

/// Simulates one record of a regime. Returns the complete x and fills r.
inline Vector simulate_record(const Truth& truth, const std::vector<int>& regime, Rng& rng, BitVector& r,
                              InterventionMask& iv) {
  const int k = node_count(truth.sem);
  iv = InterventionMask::none(k);
  for (int v : regime) {
    iv.observed[v] = 0;
    iv.clamp[v] = standard_normal(rng);
  }
  Vector eps(k);
  for (int c = 0; c < k; ++c) eps[c] = std::sqrt(truth.noise.variances[c]) * standard_normal(rng);
  const Vector x = solve_fixed_point(truth.sem, truth.mask, iv, eps, {1e-10, 5000});
  const BitVector protect = (iv.observed.array() == 0).cast<std::uint8_t>();
  r = sample_r(truth.mnar, x, protect, rng);
  return x;
}

/// Complete rows drawn round-robin over regimes, used for calibration.
inline std::vector<std::pair<Vector, BitVector>> pilot_rows(const Truth& truth, const InstanceSpec& spec, int rows,
                                                            std::uint64_t key) {
  const auto regimes = spec.regimes();
  std::vector<std::pair<Vector, BitVector>> out;
  out.reserve(rows);
  for (int i = 0; i < rows; ++i) {
    Rng rng = keyed_rng(spec.seed, {key, static_cast<std::uint64_t>(i)});
    BitVector r;
    InterventionMask iv;
    Vector x = simulate_record(truth, regimes[i % regimes.size()], rng, r, iv);
    out.emplace_back(std::move(x), iv.observed);
  }
  return out;
}

/// Draws the ground truth: ER target graph, band weights rescaled to the
/// Lipschitz target, block-parallel mechanism with intercepts bisected so
/// the mean missing probability of each eligible coordinate hits the target.
inline Truth gen_instance(const InstanceSpec& spec) {
  spec.validate();
  const int k = spec.k;
  Rng rng = keyed_rng(spec.seed, {0xA11});
  Truth t;
  t.target = generate_er(ErConfig{k, spec.er_density, spec.allow_cycles, spec.seed}, rng);
  const Matrix w = detail::rescale_to(detail::draw_band_weights(t.target, spec, rng), spec.lipschitz_target);
  if (spec.sem_family == SemFamily::linear) {
    t.sem = LinearSem{w, spec.lipschitz_target};
  } else {
    // F(x) = tanh(W^T x) as a network with identity read-out.
    MlpSem net;
    net.w1 = w;
    net.b1 = Vector::Zero(k);
    net.w2 = Matrix::Identity(k, k);
    net.b2 = Vector::Zero(k);
    net.activation = Activation::tanh;
    net.lipschitz_target = spec.lipschitz_target;
    t.sem = net;
  }
  t.mask = full_mask(k);
  t.noise = NoiseModel::isotropic(k, spec.noise_sigma);
  t.mnar = MnarModel::zeros(k);
  t.m_edges = EdgePattern(k);

  if (spec.missing_rate <= 0.0) {
    t.mnar.z.setConstant(-800.0);  // expit underflows to exactly 0
    return t;
  }
  if (spec.mechanism == MechanismKind::mnar && spec.max_parents > 0 && k > 1) {
    const int cap = std::min(spec.max_parents, k - 1);
    std::uniform_int_distribution<int> count(1, cap);
    for (int c = 0; c < k; ++c) {
      std::vector<int> candidates;
      for (int j = 0; j < k; ++j)
        if (j != c) candidates.push_back(j);
      std::shuffle(candidates.begin(), candidates.end(), rng);
      const int parents = count(rng);
      for (int p = 0; p < parents; ++p) {
        t.mnar.w(candidates[p], c) = detail::band_weight(spec, rng);
        t.m_edges.set(candidates[p], c, true);
      }
    }
  }

  const auto pilot = pilot_rows(t, spec, spec.calibration_rows, 0xCA1);
  for (int c = 0; c < k; ++c) {
    std::vector<double> eta;
    for (const auto& [x, observed] : pilot)
      if (observed[c]) eta.push_back(t.mnar.w.col(c).dot(x));
    if (eta.empty()) continue;
    double lo = -40.0, hi = 40.0;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      double rate = 0.0;
      for (double e : eta) rate += sigmoid(e + mid);
      rate /= static_cast<double>(eta.size());
      (rate < spec.missing_rate ? lo : hi) = mid;
    }
    t.mnar.z[c] = 0.5 * (lo + hi);
  }
  return t;
}

/// Stable fingerprint of every field that affects generation.
inline std::string instance_fingerprint(const InstanceSpec& spec) {
  std::ostringstream os;
  os << spec.k << '|' << format_double(spec.er_density) << '|' << spec.allow_cycles << '|' << to_string(spec.sem_family)
     << '|' << format_double(spec.weight_low) << '|' << format_double(spec.weight_high) << '|'
     << format_double(spec.lipschitz_target) << '|' << format_double(spec.noise_sigma) << '|'
     << spec.n_per_intervention << '|';
  for (const auto& regime : spec.regimes()) {
    os << '[';
    for (int v : regime) os << v << ',';
    os << ']';
  }
  os << '|' << to_string(spec.mechanism) << '|' << spec.max_parents << '|' << format_double(spec.missing_rate) << '|'
     << spec.calibration_rows << '|' << spec.seed;
  return fnv1a_hex(os.str());
}

struct Simulation {
  Dataset data;
  Matrix complete;  // the values before coarsening
};

/// Simulates every regime: clamp intervened nodes to N(0, 1), draw noise,
/// solve the fixed point, sample indicators with intervened nodes protected
/// and coarsen.
inline Simulation simulate(const Truth& truth, const InstanceSpec& spec) {
  spec.validate();
  const auto regimes = spec.regimes();
  const int k = spec.k;
  const int n = static_cast<int>(regimes.size()) * spec.n_per_intervention;
  Simulation sim;
  sim.complete.resize(n, k);
  sim.data.y.resize(n, k);
  sim.data.r.resize(n, k);
  sim.data.s.resize(n, k);
  int row = 0;
  for (std::size_t g = 0; g < regimes.size(); ++g) {
    for (int i = 0; i < spec.n_per_intervention; ++i, ++row) {
      Rng rng = keyed_rng(spec.seed, {0x51u, static_cast<std::uint64_t>(g), static_cast<std::uint64_t>(i)});
      BitVector r;
      InterventionMask iv;
      const Vector x = simulate_record(truth, regimes[g], rng, r, iv);
      sim.complete.row(row) = x.transpose();
      sim.data.r.row(row) = r.transpose();
      sim.data.s.row(row) = iv.observed.transpose();
      for (int c = 0; c < k; ++c) sim.data.y(row, c) = r[c] ? x[c] : kMissing;
    }
  }
  sim.data.provenance = instance_fingerprint(spec);
  sim.data.validate();
  return sim;
}

/// Fully observed copy of a simulation (the complete-data control).
inline Dataset complete_dataset(const Simulation& sim) {
  Dataset d = sim.data;
  d.y = sim.complete;
  d.r.setOnes();
  return d;
}

/// Observed rates over non-intervened cells.
inline double eligible_missing_rate(const Dataset& d) {
  double cells = 0.0, missing = 0.0;
  for (int i = 0; i < d.n(); ++i)
    for (int c = 0; c < d.k(); ++c)
      if (d.s(i, c)) {
        cells += 1.0;
        missing += d.r(i, c) == 0;
      }
  return cells > 0 ? missing / cells : 0.0;
}

}  // namespace mnarflow
