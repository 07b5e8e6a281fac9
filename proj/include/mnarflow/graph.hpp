#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mnarflow/core.hpp"
#include "mnarflow/random.hpp"

namespace mnarflow {

/// Binary adjacency over K nodes; edges(j, k) == 1 means X_j -> X_k.
/// Also used for X -> R missingness edges (j -> k meaning X_j -> R_k).
class EdgePattern {
 public:
  EdgePattern() = default;

  explicit EdgePattern(int k) : edges_(BitMatrix::Zero(k, k)) {
    if (k < 1) throw ConfigError("EdgePattern: node count must be >= 1");
  }

  explicit EdgePattern(BitMatrix edges) : edges_(std::move(edges)) {
    if (edges_.rows() < 1 || edges_.rows() != edges_.cols()) {
      throw DimensionError("EdgePattern: adjacency must be a non-empty square matrix");
    }
    for (Eigen::Index i = 0; i < edges_.rows(); ++i) {
      if (edges_(i, i) != 0) throw DataError("EdgePattern: self-loop at node " + std::to_string(i));
    }
    for (Eigen::Index i = 0; i < edges_.size(); ++i) {
      if (edges_.data()[i] > 1) throw DataError("EdgePattern: entries must be 0 or 1");
    }
  }

  int k() const { return static_cast<int>(edges_.rows()); }
  const BitMatrix& edges() const { return edges_; }
  bool has(int from, int to) const { return edges_(from, to) != 0; }

  void set(int from, int to, bool present) {
    if (from == to && present) throw DataError("EdgePattern: self-loops are not allowed");
    edges_(from, to) = present ? 1 : 0;
  }

  int edge_count() const {
    int c = 0;
    for (Eigen::Index i = 0; i < edges_.size(); ++i) c += edges_.data()[i];
    return c;
  }

  Matrix as_real() const { return edges_.cast<double>(); }

  friend bool operator==(const EdgePattern& a, const EdgePattern& b) {
    return a.edges_.rows() == b.edges_.rows() && a.edges_ == b.edges_;
  }

 private:
  BitMatrix edges_;
};

/// Dense 0/1 CSV, K rows of K columns, no header.
inline std::string to_csv(const EdgePattern& p) {
  std::ostringstream os;
  for (int j = 0; j < p.k(); ++j) {
    for (int k = 0; k < p.k(); ++k) {
      if (k) os << ',';
      os << (p.has(j, k) ? '1' : '0');
    }
    os << '\n';
  }
  return os.str();
}

inline EdgePattern pattern_from_csv(const std::string& text) {
  std::vector<std::vector<int>> rows;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<int> row;
    std::stringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      if (cell != "0" && cell != "1") {
        throw DataError("edge CSV row " + std::to_string(rows.size() + 1) + ": bad cell '" + cell + "'");
      }
      row.push_back(cell == "1");
    }
    rows.push_back(std::move(row));
  }
  const int k = static_cast<int>(rows.size());
  if (k == 0) throw DataError("edge CSV: empty");
  BitMatrix m(k, k);
  for (int j = 0; j < k; ++j) {
    if (static_cast<int>(rows[j].size()) != k) {
      throw DataError("edge CSV row " + std::to_string(j + 1) + ": expected " + std::to_string(k) + " columns");
    }
    for (int c = 0; c < k; ++c) m(j, c) = static_cast<std::uint8_t>(rows[j][c]);
  }
  return EdgePattern(std::move(m));
}

struct ErConfig {
  int k = 10;
  double expected_degree = 1.0;
  bool allow_cycles = true;
  std::uint64_t seed = 0;
};

/// Erdos-Renyi pattern with edge probability expected_degree / (K - 1).
/// Without cycles, a random topological order keeps only forward edges.
inline EdgePattern generate_er(const ErConfig& cfg, Rng& rng) {
  if (cfg.k < 1) throw ConfigError("generate_er: K must be >= 1");
  if (!(cfg.expected_degree >= 0.0)) throw ConfigError("generate_er: expected_degree must be >= 0");
  EdgePattern p(cfg.k);
  if (cfg.k == 1) return p;
  const double prob = cfg.expected_degree / static_cast<double>(cfg.k - 1);
  if (prob > 1.0) throw ConfigError("generate_er: expected_degree exceeds K - 1");

  std::vector<int> order(cfg.k);
  std::iota(order.begin(), order.end(), 0);
  if (!cfg.allow_cycles) std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> rank(cfg.k);
  for (int i = 0; i < cfg.k; ++i) rank[order[i]] = i;

  std::bernoulli_distribution coin(prob);
  for (int j = 0; j < cfg.k; ++j) {
    for (int k = 0; k < cfg.k; ++k) {
      if (j == k) continue;
      const bool draw = coin(rng);
      if (draw && (cfg.allow_cycles || rank[j] < rank[k])) p.set(j, k, true);
    }
  }
  return p;
}

inline EdgePattern generate_er(const ErConfig& cfg) {
  Rng rng(cfg.seed);
  return generate_er(cfg, rng);
}

/// Structural Hamming distance. Each unordered node pair whose edge states
/// differ costs one edit; with `reversal_as_one == false` a pure reversal
/// (j->k in one pattern, k->j in the other) costs two instead.
inline int shd(const EdgePattern& estimated, const EdgePattern& truth, bool reversal_as_one = true) {
  if (estimated.k() != truth.k()) {
    throw DimensionError("shd: node counts differ (" + std::to_string(estimated.k()) + " vs " +
                         std::to_string(truth.k()) + ")");
  }
  const int n = truth.k();
  int total = 0;
  for (int j = 0; j < n; ++j) {
    for (int k = j + 1; k < n; ++k) {
      const bool ejk = estimated.has(j, k), ekj = estimated.has(k, j);
      const bool tjk = truth.has(j, k), tkj = truth.has(k, j);
      if (ejk == tjk && ekj == tkj) continue;
      const bool reversal = ejk != ekj && ejk == tkj && ekj == tjk;
      total += (reversal && !reversal_as_one) ? 2 : 1;
    }
  }
  return total;
}

/// exp(a) by scaling and squaring with a Taylor core; absolute tail < 1e-12.
inline Matrix matrix_exponential(const Matrix& a) {
  require_square(a, "matrix_exponential");
  const Eigen::Index n = a.rows();
  const double norm1 = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm1 > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm1 / 0.5)));
  const Matrix scaled = a / std::ldexp(1.0, squarings);

  Matrix result = Matrix::Identity(n, n);
  Matrix term = Matrix::Identity(n, n);
  for (int i = 1; i < 64; ++i) {
    term = term * scaled / static_cast<double>(i);
    result += term;
    if (term.cwiseAbs().maxCoeff() < 1e-17) break;
  }
  for (int s = 0; s < squarings; ++s) result = result * result;
  return result;
}

/// Tr(exp(m o m)) - K; zero exactly when the support of m is acyclic.
inline double acyclicity_penalty(const Matrix& m) {
  require_square(m, "acyclicity_penalty");
  const Matrix e = matrix_exponential(m.cwiseProduct(m));
  return std::max(0.0, e.trace() - static_cast<double>(m.rows()));
}

/// Penalty value and its gradient 2 m o exp(m o m)^T.
inline double acyclicity_penalty(const Matrix& m, Matrix& gradient) {
  require_square(m, "acyclicity_penalty");
  const Matrix e = matrix_exponential(m.cwiseProduct(m));
  gradient = 2.0 * m.cwiseProduct(e.transpose());
  return std::max(0.0, e.trace() - static_cast<double>(m.rows()));
}

inline bool is_acyclic(const EdgePattern& p) { return acyclicity_penalty(p.as_real()) < 1e-9; }

struct SpectralNormResult {
  double value = 0.0;
  int iterations = 0;
};

/// Largest singular value by power iteration on m^T m.
inline SpectralNormResult spectral_norm(const Matrix& m, int min_iters = 50, int max_iters = 2000,
                                        double rel_tol = 1e-13) {
  SpectralNormResult out;
  if (m.size() == 0 || m.cwiseAbs().maxCoeff() == 0.0) return out;
  // Fixed, dense start vector so the result is deterministic.
  Vector v(m.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.37 * std::sin(1.7 * static_cast<double>(i) + 0.3);
  v.normalize();
  double sigma = 0.0;
  for (int it = 1; it <= max_iters; ++it) {
    const Vector u = m * v;
    Vector w = m.transpose() * u;
    const double next = std::sqrt(u.squaredNorm());
    const double wn = w.norm();
    out.iterations = it;
    if (wn == 0.0) {
      sigma = next;
      break;
    }
    v = w / wn;
    const bool settled = std::abs(next - sigma) <= rel_tol * std::max(next, 1e-300);
    sigma = next;
    if (settled && it >= min_iters) break;
  }
  // One more Rayleigh step with the converged vector.
  out.value = std::max(sigma, (m * v).norm());
  return out;
}

inline bool is_contractive_spectral(const Matrix& weights, double bound) {
  require_square(weights, "is_contractive_spectral");
  return spectral_norm(weights).value <= bound;
}

/// True when `to` can be reached from `from` along edges of p.
inline bool reaches(const EdgePattern& p, int from, int to) {
  std::vector<char> seen(p.k(), 0);
  std::vector<int> stack{from};
  seen[from] = 1;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    if (v == to) return true;
    for (int w = 0; w < p.k(); ++w) {
      if (p.has(v, w) && !seen[w]) {
        seen[w] = 1;
        stack.push_back(w);
      }
    }
  }
  return false;
}

/// Removes cycle edges in ascending order of `strength` until the pattern is
/// acyclic. Edges not on any cycle are never removed.
inline EdgePattern prune_to_acyclic(EdgePattern p, const Matrix& strength) {
  struct Item {
    double s;
    int j, k;
  };
  std::vector<Item> items;
  for (int j = 0; j < p.k(); ++j)
    for (int k = 0; k < p.k(); ++k)
      if (p.has(j, k)) items.push_back({std::abs(strength(j, k)), j, k});
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.s < b.s; });
  for (const auto& it : items) {
    if (is_acyclic(p)) break;
    if (reaches(p, it.k, it.j)) p.set(it.j, it.k, false);
  }
  return p;
}

}  // namespace mnarflow
