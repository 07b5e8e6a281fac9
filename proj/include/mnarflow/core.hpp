#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mnarflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BitVector = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 1>;
using BitMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or precondition on user-supplied settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent data (files, shapes, invariant violations).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Shapes that do not agree.
class DimensionError : public DataError {
 public:
  using DataError::DataError;
};

/// A numerical procedure could not produce a valid result.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Fixed-point iteration failed to reach tolerance (non-contractive model).
class NonConvergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// I - D J_F is singular, so id - D F is not invertible.
class SingularJacobianError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Training aborted (non-finite gradient, failed initialization, ...).
class TrainingError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2 pi))

inline double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// log(sigmoid(v)) without overflow.
inline double log_sigmoid(double v) {
  if (v >= 0) return -std::log1p(std::exp(-v));
  return v - std::log1p(std::exp(v));
}

inline double normal_log_pdf(double v, double variance) {
  return -0.5 * std::log(variance) - kLogSqrt2Pi - 0.5 * v * v / variance;
}

inline void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) {
    throw DimensionError(std::string(what) + ": matrix must be square, got " + std::to_string(m.rows()) +
                         "x" + std::to_string(m.cols()));
  }
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Coordinates of `bits` equal to `value`, in ascending order.
inline std::vector<int> indices_where(const BitVector& bits, std::uint8_t value) {
  std::vector<int> out;
  for (Eigen::Index k = 0; k < bits.size(); ++k) {
    if (bits[k] == value) out.push_back(static_cast<int>(k));
  }
  return out;
}

/// 64-bit FNV-1a, printed as 16 hex digits.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mnarflow
