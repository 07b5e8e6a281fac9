#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mnarflow/core.hpp"
#include "mnarflow/sem.hpp"

namespace mnarflow {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/// n records of coarsened values y, missingness indicators r (1 = observed)
/// and intervention indicators s (1 = purely observed, 0 = intervened).
/// r is the source of truth for missingness; y holds NaN where r == 0.
struct Dataset {
  Matrix y;
  BitMatrix r;
  BitMatrix s;
  std::string provenance;

  int n() const { return static_cast<int>(y.rows()); }
  int k() const { return static_cast<int>(y.cols()); }

  /// Throws DataError naming the first offending record (1-based).
  void validate(bool allow_filled_missing = false) const {
    if (r.rows() != y.rows() || s.rows() != y.rows() || r.cols() != y.cols() || s.cols() != y.cols()) {
      throw DimensionError("Dataset: y, r, s shapes disagree");
    }
    for (int i = 0; i < n(); ++i) {
      for (int c = 0; c < k(); ++c) {
        const std::string where = "record " + std::to_string(i + 1) + ", column " + std::to_string(c + 1);
        if (r(i, c) > 1 || s(i, c) > 1) throw DataError(where + ": indicators must be 0/1");
        const bool finite = std::isfinite(y(i, c));
        if (r(i, c) == 1 && !finite) throw DataError(where + ": missing value with r = 1");
        if (r(i, c) == 0 && finite && !allow_filled_missing) throw DataError(where + ": value present with r = 0");
        if (s(i, c) == 0 && r(i, c) == 0) throw DataError(where + ": intervened node is missing");
      }
    }
  }

  InterventionMask intervention(int i) const {
    InterventionMask iv{s.row(i).transpose(), Vector::Zero(k())};
    for (int c = 0; c < k(); ++c) {
      if (!s(i, c)) iv.clamp[c] = y(i, c);
    }
    return iv;
  }

  bool complete_record(int i) const { return (r.row(i).array() == 1).all(); }

  bool fully_observed() const { return (r.array() == 1).all(); }

  double missing_rate() const {
    if (r.size() == 0) return 0.0;
    return 1.0 - r.cast<double>().mean();
  }

  Dataset subset(const std::vector<int>& rows) const {
    Dataset out;
    out.provenance = provenance;
    out.y.resize(static_cast<Eigen::Index>(rows.size()), k());
    out.r.resize(static_cast<Eigen::Index>(rows.size()), k());
    out.s.resize(static_cast<Eigen::Index>(rows.size()), k());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.y.row(i) = y.row(rows[i]);
      out.r.row(i) = r.row(rows[i]);
      out.s.row(i) = s.row(rows[i]);
    }
    return out;
  }
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_dataset(const Dataset& data, std::ostream& os) {
  const int k = data.k();
  for (int c = 0; c < k; ++c) os << (c ? "," : "") << "x_" << c + 1;
  for (int c = 0; c < k; ++c) os << ",r_" << c + 1;
  for (int c = 0; c < k; ++c) os << ",s_" << c + 1;
  os << '\n';
  for (int i = 0; i < data.n(); ++i) {
    for (int c = 0; c < k; ++c) {
      if (c) os << ',';
      if (data.r(i, c) == 0 && !std::isfinite(data.y(i, c))) {
        os << '?';
      } else {
        os << format_double(data.y(i, c));
      }
    }
    for (int c = 0; c < k; ++c) os << ',' << int(data.r(i, c));
    for (int c = 0; c < k; ++c) os << ',' << int(data.s(i, c));
    os << '\n';
  }
}

inline void write_dataset(const Dataset& data, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  write_dataset(data, os);
  if (!os) throw DataError("write failed for '" + path + "'");
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_number(const std::string& cell, bool& ok) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  ok = ec == std::errc() && ptr == last && std::isfinite(v);
  return v;
}

}  // namespace detail

/// Parses the dataset CSV. `allow_filled_missing` accepts finite values in
/// cells with r = 0 (externally imputed data).
inline Dataset read_dataset(std::istream& is, bool allow_filled_missing = false) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("dataset: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  if (header.empty() || header.size() % 3 != 0) throw DataError("dataset: malformed header");
  const int k = static_cast<int>(header.size() / 3);
  for (int c = 0; c < k; ++c) {
    const std::string idx = std::to_string(c + 1);
    if (header[c] != "x_" + idx || header[k + c] != "r_" + idx || header[2 * k + c] != "s_" + idx) {
      throw DataError("dataset: malformed header, expected x_1..x_K,r_1..r_K,s_1..s_K");
    }
  }
  std::vector<std::vector<double>> ys;
  std::vector<std::vector<std::uint8_t>> rs, ss;
  int row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (static_cast<int>(cells.size()) != 3 * k) {
      throw DataError("dataset row " + std::to_string(row) + ": expected " + std::to_string(3 * k) +
                      " columns, found " + std::to_string(cells.size()));
    }
    std::vector<double> yv(k);
    std::vector<std::uint8_t> rv(k), sv(k);
    for (int c = 0; c < k; ++c) {
      for (int part = 1; part <= 2; ++part) {
        const std::string& cell = cells[part * k + c];
        if (cell != "0" && cell != "1") {
          throw DataError("dataset row " + std::to_string(row) + ": indicator cell '" + cell + "' is not 0/1");
        }
        (part == 1 ? rv : sv)[c] = cell == "1";
      }
      const std::string& cell = cells[c];
      if (cell == "?") {
        yv[c] = kMissing;
      } else {
        bool ok = false;
        yv[c] = detail::parse_number(cell, ok);
        if (!ok) throw DataError("dataset row " + std::to_string(row) + ": non-numeric cell '" + cell + "'");
      }
    }
    ys.push_back(std::move(yv));
    rs.push_back(std::move(rv));
    ss.push_back(std::move(sv));
  }
  Dataset d;
  const auto n = static_cast<Eigen::Index>(ys.size());
  d.y.resize(n, k);
  d.r.resize(n, k);
  d.s.resize(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int c = 0; c < k; ++c) {
      d.y(i, c) = ys[i][c];
      d.r(i, c) = rs[i][c];
      d.s(i, c) = ss[i][c];
    }
  }
  try {
    d.validate(allow_filled_missing);
  } catch (const DataError& e) {
    throw DataError(std::string("dataset validation: ") + e.what());
  }
  return d;
}

inline Dataset read_dataset(const std::string& path, bool allow_filled_missing = false) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset '" + path + "'");
  return read_dataset(is, allow_filled_missing);
}

}  // namespace mnarflow
