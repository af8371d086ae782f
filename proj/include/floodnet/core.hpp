#pragma once

// Domain types shared by every floodnet module: well topology, rate series,
// train/test splitting and the error hierarchy used across the library.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace floodnet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Errors. The CLI maps each category onto an exit code.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad flags or arguments (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Divergence, non-finite values, failed fits (exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A DataError pinned to a cell of a series. row/col are -1 when not
/// applicable.
class ValidationError : public DataError {
 public:
  ValidationError(const std::string& what, Index row, Index col)
      : DataError(format(what, row, col)), row_(row), col_(col) {}

  Index row() const noexcept { return row_; }
  Index col() const noexcept { return col_; }

 private:
  static std::string format(const std::string& what, Index row, Index col) {
    std::ostringstream os;
    os << what;
    if (row >= 0 && col >= 0) {
      os << " at (row " << row << ", col " << col << ")";
    } else if (row >= 0) {
      os << " at index " << row;
    }
    return os.str();
  }

  Index row_;
  Index col_;
};

// ---------------------------------------------------------------------------
// WellField
// ---------------------------------------------------------------------------

class WellField {
 public:
  WellField() = default;

  WellField(std::vector<std::string> injectors, std::vector<std::string> producers)
      : injectors_(std::move(injectors)), producers_(std::move(producers)) {
    if (injectors_.empty()) throw DataError("well field needs at least one injector");
    if (producers_.empty()) throw DataError("well field needs at least one producer");
    check_unique(injectors_, "injector");
    check_unique(producers_, "producer");
  }

  /// Names I1..In and P1..Pm.
  static WellField numbered(std::size_t n_inj, std::size_t n_pro) {
    std::vector<std::string> inj, pro;
    for (std::size_t i = 0; i < n_inj; ++i) inj.push_back("I" + std::to_string(i + 1));
    for (std::size_t j = 0; j < n_pro; ++j) pro.push_back("P" + std::to_string(j + 1));
    return WellField(std::move(inj), std::move(pro));
  }

  const std::vector<std::string>& injectors() const noexcept { return injectors_; }
  const std::vector<std::string>& producers() const noexcept { return producers_; }
  Index n_inj() const noexcept { return static_cast<Index>(injectors_.size()); }
  Index n_pro() const noexcept { return static_cast<Index>(producers_.size()); }

  bool operator==(const WellField&) const = default;

 private:
  static void check_unique(const std::vector<std::string>& names, const char* kind) {
    std::set<std::string> seen;
    for (const auto& n : names) {
      if (n.empty()) throw DataError(std::string("empty ") + kind + " name");
      if (!seen.insert(n).second) {
        throw DataError(std::string("duplicate ") + kind + " name '" + n + "'");
      }
    }
  }

  std::vector<std::string> injectors_;
  std::vector<std::string> producers_;
};

// ---------------------------------------------------------------------------
// RateSeries
// ---------------------------------------------------------------------------

/// Time-indexed well records. Row n of every matrix belongs to times[n].
/// Rates are reservoir-volume rates per day; times are in days.
struct RateSeries {
  Vector times;                   // [n]
  Matrix injection;               // [n x N_inj]
  std::optional<Matrix> production;  // [n x N_pro]
  std::optional<Matrix> bhp;         // [n x N_pro]

  Index n_steps() const noexcept { return times.size(); }
  bool has_production() const noexcept { return production.has_value(); }
  bool has_bhp() const noexcept { return bhp.has_value(); }

  bool operator==(const RateSeries& o) const {
    auto same = [](const Matrix& a, const Matrix& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
    };
    auto same_opt = [&](const std::optional<Matrix>& a, const std::optional<Matrix>& b) {
      return a.has_value() == b.has_value() && (!a || same(*a, *b));
    };
    return times.size() == o.times.size() && times == o.times &&
           same(injection, o.injection) && same_opt(production, o.production) &&
           same_opt(bhp, o.bhp);
  }
};

/// Step index separating the training rows [0, split_index) from the test
/// rows [split_index, n).
struct TrainTestSplit {
  Index split_index = 0;
};

/// Checks every RateSeries invariant against the field and returns the series
/// unchanged. Throws ValidationError with the offending location.
inline RateSeries validate(const RateSeries& series, const WellField& field) {
  const Index n = series.n_steps();
  if (n < 1) throw ValidationError("series has no rows", -1, -1);

  auto check_shape = [&](const Matrix& m, Index cols, const char* what) {
    if (m.rows() != n) {
      throw ValidationError(std::string(what) + " has " + std::to_string(m.rows()) +
                                " rows, expected " + std::to_string(n),
                            -1, -1);
    }
    if (m.cols() != cols) {
      throw ValidationError(std::string(what) + " has " + std::to_string(m.cols()) +
                                " columns, field expects " + std::to_string(cols),
                            -1, -1);
    }
  };
  check_shape(series.injection, field.n_inj(), "injection");
  if (series.production) check_shape(*series.production, field.n_pro(), "production");
  if (series.bhp) check_shape(*series.bhp, field.n_pro(), "bhp");

  for (Index r = 0; r < n; ++r) {
    if (!std::isfinite(series.times[r])) throw ValidationError("non-finite time", r, -1);
    if (r > 0 && !(series.times[r] > series.times[r - 1])) {
      throw ValidationError("times not strictly increasing", r, -1);
    }
  }
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < field.n_inj(); ++c) {
      const double v = series.injection(r, c);
      if (!std::isfinite(v)) throw ValidationError("non-finite injection rate", r, c);
      if (v < 0.0) throw ValidationError("negative injection rate", r, c);
    }
  }
  auto check_finite = [&](const std::optional<Matrix>& m, const char* what) {
    if (!m) return;
    for (Index r = 0; r < n; ++r)
      for (Index c = 0; c < m->cols(); ++c)
        if (!std::isfinite((*m)(r, c))) throw ValidationError(std::string("non-finite ") + what, r, c);
  };
  check_finite(series.production, "production rate");
  check_finite(series.bhp, "bhp");
  return series;
}

namespace detail {

inline std::optional<Matrix> rows_of(const std::optional<Matrix>& m, Index begin, Index count) {
  if (!m) return std::nullopt;
  return Matrix(m->middleRows(begin, count));
}

}  // namespace detail

/// Rows [begin, begin + count) of a series.
inline RateSeries slice(const RateSeries& s, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > s.n_steps()) {
    throw UsageError("slice [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + std::to_string(s.n_steps()) + " steps");
  }
  RateSeries out;
  out.times = s.times.segment(begin, count);
  out.injection = s.injection.middleRows(begin, count);
  out.production = detail::rows_of(s.production, begin, count);
  out.bhp = detail::rows_of(s.bhp, begin, count);
  return out;
}

inline std::pair<RateSeries, RateSeries> split(const RateSeries& series, TrainTestSplit s) {
  const Index n = series.n_steps();
  if (s.split_index <= 0 || s.split_index >= n) {
    throw UsageError("split index " + std::to_string(s.split_index) + " outside (0, " +
                     std::to_string(n) + ")");
  }
  return {slice(series, 0, s.split_index), slice(series, s.split_index, n - s.split_index)};
}

/// Stacks two series row-wise. Optional matrices must be present in both or
/// neither.
inline RateSeries concatenate(const RateSeries& a, const RateSeries& b) {
  if (a.injection.cols() != b.injection.cols() || a.has_production() != b.has_production() ||
      a.has_bhp() != b.has_bhp()) {
    throw DataError("cannot concatenate series with different layouts");
  }
  auto stack = [](const Matrix& x, const Matrix& y) {
    Matrix out(x.rows() + y.rows(), x.cols());
    out << x, y;
    return out;
  };
  RateSeries out;
  out.times.resize(a.times.size() + b.times.size());
  out.times << a.times, b.times;
  out.injection = stack(a.injection, b.injection);
  if (a.production) out.production = stack(*a.production, *b.production);
  if (a.bhp) out.bhp = stack(*a.bhp, *b.bhp);
  return out;
}

/// Largest |dt_n - dt_1| relative to dt_1, or 0 for fewer than 3 rows.
inline double time_grid_nonuniformity(const Vector& times) {
  if (times.size() < 3) return 0.0;
  const double dt0 = times[1] - times[0];
  double worst = 0.0;
  for (Index n = 2; n < times.size(); ++n) {
    worst = std::max(worst, std::abs((times[n] - times[n - 1]) - dt0) / dt0);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Deterministic random numbers (splitmix64). The distributions are written
// out so draws are identical on every standard library.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  double normal() {
    // Box-Muller, one draw per call
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Independent stream derived from (seed, stream).
  static Rng stream(std::uint64_t seed, std::uint64_t stream) {
    Rng mix(seed ^ (0xd1b54a32d192ed03ULL * (stream + 1)));
    return Rng(mix.next_u64());
  }

 private:
  std::uint64_t state_;
};

}  // namespace floodnet
