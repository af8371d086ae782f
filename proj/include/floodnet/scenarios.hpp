#pragma once

// Synthetic waterflood scenarios and the CSV data format.
//
// Production truth comes from CRMP itself, optionally bent by a saturating
// warp S(q) = q_max (1 - e^{-q / q_max}) and perturbed by multiplicative
// Gaussian noise:
//
//   production = (1 - gamma) q + gamma S(q) + noise,   q = crmp_predict(truth)
//
// CSV layout: `time,INJ:<name>...,PRD:<name>...,BHP:<name>...`, one row per
// step. BHP columns are optional.

#include "floodnet/core.hpp"
#include "floodnet/crm.hpp"

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace floodnet {

/// (start_step, rate): the rate holds from start_step until the next
/// breakpoint. Rows before the first breakpoint inject nothing.
struct Breakpoint {
  Index start_step = 0;
  double rate = 0.0;
  bool operator==(const Breakpoint&) const = default;
};

struct ScenarioSpec {
  std::string name = "custom";
  WellField field = WellField::numbered(5, 4);
  Index n_steps = 120;
  double dt = 1.0;
  std::vector<std::vector<Breakpoint>> schedule;  // one list per injector
  CrmpParams truth;
  double noise_std = 0.0;     // fraction of the clean rate
  double nonlinearity = 0.0;  // gamma
  std::uint64_t seed = 0;
};

inline constexpr Index kDefaultSteps = 120;
inline constexpr Index kDefaultSplit = 90;

/// Piecewise-constant injection: 4-6 breakpoints per injector, the first at
/// step 1, rates uniform in [100, 1000].
inline std::vector<std::vector<Breakpoint>> random_schedule(Index n_inj, Index n_steps, std::uint64_t seed) {
  if (n_steps < 2) throw UsageError("a schedule needs at least two steps");
  std::vector<std::vector<Breakpoint>> out;
  for (Index i = 0; i < n_inj; ++i) {
    Rng rng = Rng::stream(seed, 1000 + static_cast<std::uint64_t>(i));
    const Index count = std::min<Index>(rng.integer(4, 6), n_steps - 1);
    std::vector<Index> starts{1};
    while (static_cast<Index>(starts.size()) < count) {
      const Index s = rng.integer(2, n_steps - 1);
      if (std::find(starts.begin(), starts.end(), s) == starts.end()) starts.push_back(s);
    }
    std::sort(starts.begin(), starts.end());
    std::vector<Breakpoint> bps;
    for (Index s : starts) bps.push_back({s, rng.uniform(100.0, 1000.0)});
    out.push_back(std::move(bps));
  }
  return out;
}

inline Matrix schedule_matrix(const std::vector<std::vector<Breakpoint>>& schedule, Index n_steps) {
  Matrix inj = Matrix::Zero(n_steps, static_cast<Index>(schedule.size()));
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    const auto& bps = schedule[i];
    for (std::size_t b = 0; b < bps.size(); ++b) {
      const Index start = bps[b].start_step;
      if (start < 0 || start >= n_steps) {
        throw UsageError("schedule breakpoint " + std::to_string(start) + " of injector " + std::to_string(i) +
                         " outside [0, " + std::to_string(n_steps) + ")");
      }
      if (b > 0 && start <= bps[b - 1].start_step) {
        throw UsageError("schedule breakpoints of injector " + std::to_string(i) + " must increase");
      }
      if (!(bps[b].rate >= 0.0)) throw UsageError("schedule rates must be non-negative");
      const Index end = b + 1 < bps.size() ? bps[b + 1].start_step : n_steps;
      inj.block(start, static_cast<Index>(i), end - start, 1).setConstant(bps[b].rate);
    }
  }
  return inj;
}

inline void check_spec(const ScenarioSpec& spec) {
  if (spec.n_steps < 2) throw UsageError("n_steps must be >= 2");
  if (!(spec.dt > 0.0)) throw UsageError("dt must be positive");
  if (!(spec.noise_std >= 0.0)) throw UsageError("noise_std must be >= 0");
  if (!(spec.nonlinearity >= 0.0)) throw UsageError("nonlinearity must be >= 0");
  if (static_cast<Index>(spec.schedule.size()) != spec.field.n_inj()) {
    throw UsageError("schedule needs one breakpoint list per injector");
  }
  if (spec.truth.gains.rows() != spec.field.n_inj() || spec.truth.gains.cols() != spec.field.n_pro()) {
    throw UsageError("truth gains must be [N_inj x N_pro]");
  }
}

inline RateSeries generate(const ScenarioSpec& spec) {
  check_spec(spec);
  RateSeries s;
  s.times.resize(spec.n_steps);
  for (Index n = 0; n < spec.n_steps; ++n) s.times[n] = spec.dt * static_cast<double>(n);
  s.injection = schedule_matrix(spec.schedule, spec.n_steps);
  validate(s, spec.field);

  const Matrix clean = crmp_predict(spec.truth, s);
  Matrix prod = clean;
  if (spec.nonlinearity > 0.0) {
    const double q_max = 1.5 * (s.injection * spec.truth.gains).maxCoeff();
    if (q_max > 0.0) {
      const double g = spec.nonlinearity;
      prod = ((1.0 - g) * clean.array() + g * q_max * (1.0 - (-clean.array() / q_max).exp())).matrix();
    }
  }
  if (spec.noise_std > 0.0) {
    Rng rng = Rng::stream(spec.seed, 7);
    for (Index j = 0; j < prod.cols(); ++j)
      for (Index n = 0; n < prod.rows(); ++n)
        prod(n, j) = std::max(0.0, prod(n, j) * (1.0 + spec.noise_std * rng.normal()));
  }
  s.production = std::move(prod);
  return s;
}

// Table values for the streak analogue: per-producer time constants and the
// 5x4 gain matrix of the streak field.
inline Vector streak_reference_tau() { return Vector{{0.1, 0.5, 1.7, 0.6}}; }
inline Vector streak_reference_q0() { return Vector{{0.0, 0.25, 0.02, 0.01}}; }
inline Matrix streak_reference_gains() {
  Matrix g(5, 4);
  g << 0.95, 0.02, 0.00, 0.03,
       0.51, 0.03, 0.12, 0.29,
       0.03, 0.00, 0.10, 0.87,
       0.18, 0.12, 0.07, 0.63,
       0.16, 0.02, 0.16, 0.66;
  return g;
}

/// Scales every row to sum exactly to one.
inline Matrix row_normalized(const Matrix& m) {
  Matrix out = m;
  for (Index i = 0; i < m.rows(); ++i) out.row(i) /= m.row(i).sum();
  return out;
}

/// Two streaks, I1->P1 and I3->P4. The I3 row is sharpened to 0.92 on P4 with
/// the remainder shared in proportion to the reference row.
inline ScenarioSpec streak_preset(std::uint64_t seed = 0, Index n_steps = kDefaultSteps) {
  ScenarioSpec s;
  s.name = "streak";
  s.field = WellField::numbered(5, 4);
  s.n_steps = n_steps;
  s.seed = seed;
  s.schedule = random_schedule(5, n_steps, seed);
  Matrix g = row_normalized(streak_reference_gains());
  const double other = 1.0 - g(2, 3);
  for (Index j = 0; j < 3; ++j) g(2, j) *= 0.08 / other;
  g(2, 3) = 0.92;
  s.truth.gains = g;
  s.truth.tau = streak_reference_tau();
  s.truth.q0 = streak_reference_q0();
  return s;
}

/// Near-uniform allocation (every entry within 0.22-0.28), similar time
/// constants, and a saturating response (gamma = 0.5).
inline ScenarioSpec homogeneous_preset(std::uint64_t seed = 0, Index n_steps = kDefaultSteps) {
  ScenarioSpec s;
  s.name = "homogeneous";
  s.field = WellField::numbered(5, 4);
  s.n_steps = n_steps;
  s.seed = seed;
  s.schedule = random_schedule(5, n_steps, seed);
  Matrix g(5, 4);
  g << 0.27, 0.28, 0.22, 0.23,
       0.27, 0.22, 0.28, 0.23,
       0.24, 0.25, 0.26, 0.25,
       0.22, 0.26, 0.25, 0.27,
       0.23, 0.23, 0.26, 0.28;
  s.truth.gains = g;
  s.truth.tau = Vector{{4.0, 3.6, 4.2, 4.4}};
  s.truth.q0 = Vector::Zero(4);
  s.nonlinearity = 0.5;
  s.noise_std = 0.01;
  return s;
}

inline std::vector<std::string> preset_names() { return {"streak", "homogeneous"}; }

inline ScenarioSpec preset(const std::string& name, std::uint64_t seed = 0, Index n_steps = kDefaultSteps) {
  if (name == "streak") return streak_preset(seed, n_steps);
  if (name == "homogeneous") return homogeneous_preset(seed, n_steps);
  throw UsageError("unknown preset '" + name + "' (available: streak, homogeneous)");
}

// ---------------------------------------------------------------------------
// Scenario JSON
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Matrix matrix_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array()) throw DataError(std::string(what) + " must be an array of rows");
  const auto rows = static_cast<Index>(j.size());
  const Index cols = rows ? static_cast<Index>(j.at(0).size()) : 0;
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const auto& r = j.at(static_cast<std::size_t>(i));
    if (!r.is_array() || static_cast<Index>(r.size()) != cols) throw DataError(std::string(what) + " is ragged");
    for (Index c = 0; c < cols; ++c) m(i, c) = r.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

inline Vector vector_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array()) throw DataError(std::string(what) + " must be an array");
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace detail

inline nlohmann::json spec_to_json(const ScenarioSpec& s) {
  nlohmann::json j;
  j["name"] = s.name;
  j["injectors"] = s.field.injectors();
  j["producers"] = s.field.producers();
  j["n_steps"] = s.n_steps;
  j["dt"] = s.dt;
  nlohmann::json sched = nlohmann::json::array();
  for (const auto& bps : s.schedule) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& b : bps) list.push_back(nlohmann::json::array({b.start_step, b.rate}));
    sched.push_back(std::move(list));
  }
  j["schedule"] = std::move(sched);
  j["truth"] = {{"tau", detail::vector_to_json(s.truth.tau)},
                {"gains", detail::matrix_to_json(s.truth.gains)},
                {"q0", detail::vector_to_json(s.truth.q0)}};
  j["noise_std"] = s.noise_std;
  j["nonlinearity"] = s.nonlinearity;
  j["seed"] = s.seed;
  return j;
}

inline ScenarioSpec spec_from_json(const nlohmann::json& j) {
  try {
    ScenarioSpec s;
    s.name = j.value("name", std::string("custom"));
    s.field = WellField(j.at("injectors").get<std::vector<std::string>>(),
                        j.at("producers").get<std::vector<std::string>>());
    s.n_steps = j.at("n_steps").get<Index>();
    s.dt = j.at("dt").get<double>();
    s.schedule.clear();
    for (const auto& list : j.at("schedule")) {
      std::vector<Breakpoint> bps;
      for (const auto& b : list) bps.push_back({b.at(0).get<Index>(), b.at(1).get<double>()});
      s.schedule.push_back(std::move(bps));
    }
    const auto& t = j.at("truth");
    s.truth.tau = detail::vector_from_json(t.at("tau"), "truth.tau");
    s.truth.gains = detail::matrix_from_json(t.at("gains"), "truth.gains");
    s.truth.q0 = detail::vector_from_json(t.at("q0"), "truth.q0");
    s.noise_std = j.value("noise_std", 0.0);
    s.nonlinearity = j.value("nonlinearity", 0.0);
    s.seed = j.value("seed", std::uint64_t{0});
    check_spec(s);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("scenario spec: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Raised for files without any data rows.
class NoDataError : public DataError {
 public:
  using DataError::DataError;
};

/// A series together with the well names read from its header.
struct Dataset {
  WellField field;
  RateSeries series;
};

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string csv_text(const RateSeries& series, const WellField& field) {
  validate(series, field);
  std::string out = "time";
  for (const auto& n : field.injectors()) out += ",INJ:" + n;
  if (series.production)
    for (const auto& n : field.producers()) out += ",PRD:" + n;
  if (series.bhp)
    for (const auto& n : field.producers()) out += ",BHP:" + n;
  out += '\n';
  for (Index r = 0; r < series.n_steps(); ++r) {
    out += format_double(series.times[r]);
    for (Index c = 0; c < series.injection.cols(); ++c) out += ',' + format_double(series.injection(r, c));
    if (series.production)
      for (Index c = 0; c < series.production->cols(); ++c) out += ',' + format_double((*series.production)(r, c));
    if (series.bhp)
      for (Index c = 0; c < series.bhp->cols(); ++c) out += ',' + format_double((*series.bhp)(r, c));
    out += '\n';
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw DataError("failed writing '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_csv(const RateSeries& series, const WellField& field, const std::string& path) {
  write_text_file(path, csv_text(series, field));
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto comma = line.find(',', pos);
    out.push_back(trim(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos)));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace detail

/// Parses CSV text. `source` names the input in error messages.
inline Dataset parse_csv(const std::string& text, const std::string& source = "<csv>") {
  std::vector<std::string_view> lines;
  {
    std::string_view rest(text);
    while (!rest.empty()) {
      const auto nl = rest.find('\n');
      lines.push_back(rest.substr(0, nl));
      if (nl == std::string_view::npos) break;
      rest.remove_prefix(nl + 1);
    }
  }
  while (!lines.empty() && detail::trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) throw NoDataError(source + ": no data (empty file)");

  const auto header = detail::split_fields(lines[0]);
  if (header.empty() || header[0] != "time") {
    throw DataError(source + ": line 1: malformed header, first column must be 'time'");
  }
  std::vector<std::string> inj, prd, bhp;
  std::vector<int> kind(header.size(), -1);  // 0 inj, 1 prd, 2 bhp
  for (std::size_t c = 1; c < header.size(); ++c) {
    const auto h = header[c];
    auto take = [&](std::string_view prefix, std::vector<std::string>& dst, int k) {
      if (h.substr(0, prefix.size()) != prefix) return false;
      const auto name = std::string(h.substr(prefix.size()));
      if (name.empty()) throw DataError(source + ": line 1: column " + std::to_string(c + 1) + " has no well name");
      dst.push_back(name);
      kind[c] = k;
      return true;
    };
    if (!take("INJ:", inj, 0) && !take("PRD:", prd, 1) && !take("BHP:", bhp, 2)) {
      throw DataError(source + ": line 1: malformed header column '" + std::string(h) + "'");
    }
  }
  if (!prd.empty() && !bhp.empty()) {
    for (const auto& p : prd)
      if (std::find(bhp.begin(), bhp.end(), p) == bhp.end())
        throw DataError(source + ": line 1: missing column BHP:" + p);
    for (const auto& b : bhp)
      if (std::find(prd.begin(), prd.end(), b) == prd.end())
        throw DataError(source + ": line 1: BHP:" + b + " has no matching PRD:" + b + " column");
  }
  const std::vector<std::string>& producers = prd.empty() ? bhp : prd;
  if (inj.empty()) throw DataError(source + ": line 1: no INJ: columns");
  if (producers.empty()) throw DataError(source + ": line 1: no PRD: or BHP: columns");

  Dataset ds;
  try {
    ds.field = WellField(inj, producers);
  } catch (const DataError& e) {
    throw DataError(source + ": line 1: " + e.what());
  }

  const auto n = static_cast<Index>(lines.size() - 1);
  if (n == 0) throw NoDataError(source + ": no data rows after the header");
  const auto ni = static_cast<Index>(inj.size()), np = static_cast<Index>(producers.size());
  RateSeries& s = ds.series;
  s.times.resize(n);
  s.injection.resize(n, ni);
  if (!prd.empty()) s.production = Matrix(n, np);
  if (!bhp.empty()) s.bhp = Matrix(n, np);

  // bhp columns are stored in producer order
  std::map<std::string, Index> producer_index;
  for (Index j = 0; j < np; ++j) producer_index[producers[static_cast<std::size_t>(j)]] = j;

  for (Index r = 0; r < n; ++r) {
    const auto line_no = std::to_string(r + 2);
    const auto fields = detail::split_fields(lines[static_cast<std::size_t>(r + 1)]);
    if (fields.size() != header.size()) {
      throw DataError(source + ": line " + line_no + ": expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(fields.size()));
    }
    Index ci = 0, cp = 0;
    for (std::size_t c = 0; c < fields.size(); ++c) {
      double v = 0.0;
      const auto f = fields[c];
      const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
      if (f.empty() || res.ec != std::errc() || res.ptr != f.data() + f.size()) {
        throw DataError(source + ": line " + line_no + ", column '" + std::string(header[c]) +
                        "': cannot parse '" + std::string(f) + "' as a number");
      }
      if (c == 0) {
        s.times[r] = v;
      } else if (kind[c] == 0) {
        s.injection(r, ci++) = v;
      } else if (kind[c] == 1) {
        (*s.production)(r, cp++) = v;
      } else {
        const auto name = std::string(header[c].substr(4));
        (*s.bhp)(r, producer_index.at(name)) = v;
      }
    }
  }
  try {
    validate(s, ds.field);
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what(), -1, -1);
  }
  return ds;
}

inline Dataset read_csv(const std::string& path) { return parse_csv(read_text_file(path), path); }

/// Reads a CSV and reorders its columns to `expected`; every expected well
/// must be present.
inline Dataset read_csv(const std::string& path, const WellField& expected) {
  Dataset ds = read_csv(path);
  auto column_map = [&](const std::vector<std::string>& want, const std::vector<std::string>& have,
                        const char* prefix) {
    std::vector<Index> idx;
    for (const auto& w : want) {
      const auto it = std::find(have.begin(), have.end(), w);
      if (it == have.end()) throw DataError(path + ": missing column " + prefix + w);
      idx.push_back(static_cast<Index>(it - have.begin()));
    }
    return idx;
  };
  const auto ii = column_map(expected.injectors(), ds.field.injectors(), "INJ:");
  const auto pp = column_map(expected.producers(), ds.field.producers(),
                             ds.series.production ? "PRD:" : "BHP:");
  auto pick = [](const Matrix& m, const std::vector<Index>& cols) {
    Matrix out(m.rows(), static_cast<Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Index>(c)) = m.col(cols[c]);
    return out;
  };
  RateSeries s;
  s.times = ds.series.times;
  s.injection = pick(ds.series.injection, ii);
  if (ds.series.production) s.production = pick(*ds.series.production, pp);
  if (ds.series.bhp) s.bhp = pick(*ds.series.bhp, pp);
  return {expected, std::move(s)};
}

}  // namespace floodnet
