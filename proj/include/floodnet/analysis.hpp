#pragma once

// CRM versus RNN comparison and timing benchmarks. Every wall-clock value in
// the JSON documents sits under a "timing" key so the rest of a document is
// reproducible byte for byte.

#include "floodnet/core.hpp"
#include "floodnet/crm.hpp"
#include "floodnet/model_file.hpp"
#include "floodnet/optimizer.hpp"
#include "floodnet/rnn.hpp"
#include "floodnet/scenarios.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

namespace floodnet {

/// RMSE of each column.
inline Vector column_rmse(const Matrix& predicted, const Matrix& observed) {
  if (predicted.rows() != observed.rows() || predicted.cols() != observed.cols()) {
    throw DataError("rmse: shapes differ");
  }
  if (observed.rows() == 0) return Vector::Zero(observed.cols());
  return (predicted - observed).array().square().colwise().mean().sqrt().transpose();
}

/// Default split: the first three quarters of the rows train.
inline Index default_split(Index n_steps) { return std::max<Index>(1, (3 * n_steps) / 4); }

struct CompareConfig {
  FitConfig crm;
  RnnTrainConfig rnn;
};

struct ComparisonReport {
  std::string source;
  WellField field;
  Index n_steps = 0;
  Index split_index = 0;

  Vector crm_train_rmse, crm_test_rmse;
  Vector rnn_train_rmse, rnn_test_rmse;
  Matrix crm_gains;
  Vector crm_tau;
  Matrix rnn_kernel;
  Vector rnn_recurrence;
  double crm_final_loss = 0.0;
  double rnn_final_loss = 0.0;

  double crm_fit_time = 0.0, rnn_fit_time = 0.0;
  double crm_predict_time = 0.0, rnn_predict_time = 0.0;

  Matrix observed, crm_pred, rnn_pred;  // every row of the series
};

namespace detail {

template <class F>
auto timed(F&& f, double& seconds) {
  const auto t0 = std::chrono::steady_clock::now();
  auto out = f();
  seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace detail

/// Fits CRMP and the RNN on rows [0, split) and scores both on the train and
/// test segments. CRM test predictions continue the recursion through the
/// training rows; the RNN reads injection only, so its test windows simply
/// look back into the training rows.
inline ComparisonReport compare_models(const Dataset& data, Index split_index, const CompareConfig& config,
                                       const std::string& source = "") {
  const RateSeries& s = data.series;
  validate(s, data.field);
  if (!s.production) throw DataError("comparison needs observed production");
  const auto [train, test] = split(s, TrainTestSplit{split_index});

  ComparisonReport r;
  r.source = source;
  r.field = data.field;
  r.n_steps = s.n_steps();
  r.split_index = split_index;
  r.observed = *s.production;

  const auto crm = fit_crmp(train, data.field, config.crm);
  r.crm_fit_time = crm.wall_time;
  r.crm_final_loss = crm.final_loss;
  r.crm_gains = crm.params.gains;
  r.crm_tau = crm.params.tau;

  const RnnFit rnn = fit_rnn(train, config.rnn);
  r.rnn_fit_time = rnn.wall_time;
  r.rnn_final_loss = rnn.final_loss;
  r.rnn_kernel = rnn.model.params.kernel;
  r.rnn_recurrence = rnn.model.params.recurrence.diagonal();

  r.crm_pred = detail::timed([&] { return crmp_predict(crm.params, s); }, r.crm_predict_time);
  r.rnn_pred = detail::timed([&] { return rnn_predict(rnn.model, s.injection); }, r.rnn_predict_time);

  const Index nt = s.n_steps() - split_index;
  r.crm_train_rmse = column_rmse(r.crm_pred.topRows(split_index), *train.production);
  r.crm_test_rmse = column_rmse(r.crm_pred.bottomRows(nt), *test.production);
  r.rnn_train_rmse = column_rmse(r.rnn_pred.topRows(split_index), *train.production);
  r.rnn_test_rmse = column_rmse(r.rnn_pred.bottomRows(nt), *test.production);
  return r;
}

/// Pooled RMSE over every producer of a segment.
inline double pooled_rmse(const Vector& per_producer) {
  return per_producer.size() ? std::sqrt(per_producer.array().square().mean()) : 0.0;
}

inline nlohmann::json comparison_to_json(const ComparisonReport& r) {
  using detail::matrix_to_json;
  using detail::vector_to_json;
  nlohmann::json j;
  j["scenario"] = {{"source", r.source},
                   {"injectors", r.field.injectors()},
                   {"producers", r.field.producers()},
                   {"n_steps", r.n_steps},
                   {"split_index", r.split_index},
                   {"crm_test_start", "recursion continued from the training segment"},
                   {"rnn_test_inputs", "injection only; test windows look back into the training rows"}};
  j["crm"] = {{"model", "crmp"},
              {"train_rmse", vector_to_json(r.crm_train_rmse)},
              {"test_rmse", vector_to_json(r.crm_test_rmse)},
              {"train_rmse_pooled", pooled_rmse(r.crm_train_rmse)},
              {"test_rmse_pooled", pooled_rmse(r.crm_test_rmse)},
              {"final_loss", r.crm_final_loss},
              {"gains", matrix_to_json(r.crm_gains)},
              {"tau", vector_to_json(r.crm_tau)}};
  j["rnn"] = {{"train_rmse", vector_to_json(r.rnn_train_rmse)},
              {"test_rmse", vector_to_json(r.rnn_test_rmse)},
              {"train_rmse_pooled", pooled_rmse(r.rnn_train_rmse)},
              {"test_rmse_pooled", pooled_rmse(r.rnn_test_rmse)},
              {"final_loss", r.rnn_final_loss},
              {"kernel", matrix_to_json(r.rnn_kernel)},
              {"recurrence_diagonal", vector_to_json(r.rnn_recurrence)}};
  j["timing"] = {{"crm_fit_seconds", r.crm_fit_time},
                 {"rnn_fit_seconds", r.rnn_fit_time},
                 {"crm_predict_seconds", r.crm_predict_time},
                 {"rnn_predict_seconds", r.rnn_predict_time}};
  return j;
}

/// Tidy rows for plotting: step, producer, observed, crm_pred, rnn_pred,
/// segment. One row per step and producer.
inline std::string comparison_csv(const ComparisonReport& r) {
  std::string out = "step,producer,observed,crm_pred,rnn_pred,segment\n";
  for (Index t = 0; t < r.n_steps; ++t) {
    const char* seg = t < r.split_index ? "train" : "test";
    for (Index j = 0; j < r.field.n_pro(); ++j) {
      out += std::to_string(t) + ',' + r.field.producers()[static_cast<std::size_t>(j)] + ',' +
             format_double(r.observed(t, j)) + ',' + format_double(r.crm_pred(t, j)) + ',' +
             format_double(r.rnn_pred(t, j)) + ',' + seg + '\n';
    }
  }
  return out;
}

namespace detail {

inline std::string fixed(double v, int width, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%*.*f", width, prec, v);
  return buf;
}

inline std::string padded(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace detail

inline std::string comparison_table(const ComparisonReport& r) {
  using detail::fixed;
  using detail::padded;
  std::string out = "RMSE per producer (train rows 0.." + std::to_string(r.split_index - 1) + ", test rows " +
                    std::to_string(r.split_index) + ".." + std::to_string(r.n_steps - 1) + ")\n";
  out += padded("producer", 10) + "  crm train   crm test  rnn train   rnn test\n";
  for (Index j = 0; j < r.field.n_pro(); ++j) {
    out += padded(r.field.producers()[static_cast<std::size_t>(j)], 10) + fixed(r.crm_train_rmse[j], 11, 3) +
           fixed(r.crm_test_rmse[j], 11, 3) + fixed(r.rnn_train_rmse[j], 11, 3) + fixed(r.rnn_test_rmse[j], 11, 3) +
           '\n';
  }
  out += padded("all", 10) + fixed(pooled_rmse(r.crm_train_rmse), 11, 3) + fixed(pooled_rmse(r.crm_test_rmse), 11, 3) +
         fixed(pooled_rmse(r.rnn_train_rmse), 11, 3) + fixed(pooled_rmse(r.rnn_test_rmse), 11, 3) + '\n';
  out += "fit seconds: crm " + fixed(r.crm_fit_time, 0, 4) + ", rnn " + fixed(r.rnn_fit_time, 0, 4) + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Benchmarks
// ---------------------------------------------------------------------------

struct BenchRow {
  std::string model;   // crm | rnn
  std::string preset;
  std::string phase;   // fit | predict
  double median_seconds = 0.0;
  double final_loss = 0.0;  // of the fit, identical across repeats
};

struct BenchResult {
  int repeats = 0;
  std::uint64_t seed = 0;
  std::vector<BenchRow> rows;
  bool deterministic = true;  // every repeat reproduced the same losses
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Median-of-repeats wall times for fitting and predicting both models on
/// each preset, split at kDefaultSplit.
inline BenchResult run_bench(const std::vector<std::string>& presets, int repeats, std::uint64_t seed,
                             const CompareConfig& config) {
  if (repeats < 1) throw UsageError("repeats must be >= 1");
  BenchResult out;
  out.repeats = repeats;
  out.seed = seed;
  for (const auto& name : presets) {
    const ScenarioSpec spec = preset(name, seed);
    const RateSeries s = generate(spec);
    const auto [train, test] = split(s, TrainTestSplit{kDefaultSplit});
    std::vector<double> crm_fit, crm_pred, rnn_fit, rnn_pred;
    double crm_loss = 0.0, rnn_loss = 0.0;
    for (int k = 0; k < repeats; ++k) {
      const auto crm = fit_crmp(train, spec.field, config.crm);
      const RnnFit rnn = fit_rnn(train, config.rnn);
      if (k > 0 && (crm.final_loss != crm_loss || rnn.final_loss != rnn_loss)) out.deterministic = false;
      crm_loss = crm.final_loss;
      rnn_loss = rnn.final_loss;
      crm_fit.push_back(crm.wall_time);
      rnn_fit.push_back(rnn.wall_time);
      double t = 0.0;
      detail::timed([&] { return crmp_predict(crm.params, s); }, t);
      crm_pred.push_back(t);
      detail::timed([&] { return rnn_predict(rnn.model, s.injection); }, t);
      rnn_pred.push_back(t);
    }
    out.rows.push_back({"crm", name, "fit", median(crm_fit), crm_loss});
    out.rows.push_back({"crm", name, "predict", median(crm_pred), crm_loss});
    out.rows.push_back({"rnn", name, "fit", median(rnn_fit), rnn_loss});
    out.rows.push_back({"rnn", name, "predict", median(rnn_pred), rnn_loss});
  }
  return out;
}

inline nlohmann::json bench_to_json(const BenchResult& b) {
  nlohmann::json rows = nlohmann::json::array(), times = nlohmann::json::array();
  for (const auto& r : b.rows) {
    rows.push_back({{"model", r.model}, {"preset", r.preset}, {"phase", r.phase}, {"final_loss", r.final_loss}});
    times.push_back(r.median_seconds);
  }
  return {{"repeats", b.repeats},
          {"seed", b.seed},
          {"deterministic", b.deterministic},
          {"rows", std::move(rows)},
          {"timing", {{"median_seconds", std::move(times)}}}};
}

/// Text table in the layout of a CPU-time comparison: one line per model,
/// preset and phase.
inline std::string bench_table(const BenchResult& b) {
  using detail::fixed;
  using detail::padded;
  std::string out = "CPU time in seconds, median of " + std::to_string(b.repeats) + " runs\n";
  out += padded("model", 7) + padded("case", 13) + padded("phase", 9) + "   seconds\n";
  for (const auto& r : b.rows) {
    out += padded(r.model, 7) + padded(r.preset, 13) + padded(r.phase, 9) + fixed(r.median_seconds, 10, 6) + '\n';
  }
  return out;
}

}  // namespace floodnet
