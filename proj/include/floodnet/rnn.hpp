#pragma once

// Linear stateless recurrent network used as the data-driven competitor to the
// CRM family.
//
//   y_t = A^T x_t + B y_{t-1}        (linear activation, no bias)
//
// A [N_inj x N_pro] is the kernel, B [N_pro x N_pro] the recurrence. The
// network is evaluated over a window of TS lookback steps: the state entering
// each window is zero, so
//
//   y_t = sum_{k=0}^{min(TS, t)} B^k A^T x_{t-k}.
//
// Constraints kept by training: A >= 0, B diagonal with entries in [0, 1).

#include "floodnet/core.hpp"
#include "floodnet/crm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace floodnet {

inline constexpr double kRecurrenceCeiling = 1.0 - 1e-6;

struct LinearRnnParams {
  Matrix kernel;      // A, [N_inj x N_pro]
  Matrix recurrence;  // B, [N_pro x N_pro], diagonal
  Index window = 10;  // TS

  Index n_inj() const noexcept { return kernel.rows(); }
  Index n_pro() const noexcept { return kernel.cols(); }
};

struct RnnTrainConfig {
  int epochs = 500;
  double learning_rate = 2.0;  // for rates scaled by rnn_rate_scale
  double momentum = 0.95;
  std::uint64_t seed = 0;
  Index window = 10;
};

struct RnnGradient {
  Matrix d_kernel;
  Matrix d_recurrence;
};

namespace detail {

inline void check_rnn_shapes(const LinearRnnParams& p, const Matrix& inputs) {
  if (inputs.cols() != p.kernel.rows()) {
    throw DataError("RNN expects " + std::to_string(p.kernel.rows()) + " input columns, got " +
                    std::to_string(inputs.cols()));
  }
  if (p.recurrence.rows() != p.kernel.cols() || p.recurrence.cols() != p.kernel.cols()) {
    throw DataError("recurrence matrix must be [N_pro x N_pro]");
  }
  if (p.window < 0) throw UsageError("RNN window must be non-negative");
}

}  // namespace detail

/// Stateless windowed evaluation. Output row t depends only on inputs
/// t - window .. t.
inline Matrix rnn_forward(const LinearRnnParams& params, const Matrix& inputs) {
  detail::check_rnn_shapes(params, inputs);
  const Index n = inputs.rows(), np = params.n_pro();
  const Matrix u = inputs * params.kernel;  // row t = (A^T x_t)^T
  Matrix y(n, np);
  Vector h(np), next(np);
  for (Index t = 0; t < n; ++t) {
    const Index w = std::max<Index>(0, t - params.window);
    h.setZero();
    for (Index s = w; s <= t; ++s) {
      next.noalias() = params.recurrence * h;
      h = next + u.row(s).transpose();
    }
    y.row(t) = h.transpose();
  }
  return y;
}

/// Full-length evaluation from an initial state: row 0 is y0 and rows t >= 1
/// follow y_t = A^T x_t + B y_{t-1}. Requires a window covering the series.
inline Matrix rnn_forward_seeded(const LinearRnnParams& params, const Matrix& inputs, const Vector& y0) {
  detail::check_rnn_shapes(params, inputs);
  const Index n = inputs.rows(), np = params.n_pro();
  if (y0.size() != np) throw DataError("initial state length does not match the producer count");
  if (params.window < n - 1) {
    throw UsageError("seeded evaluation needs window >= " + std::to_string(n - 1) + ", got " +
                     std::to_string(params.window));
  }
  Matrix y(n, np);
  if (n == 0) return y;
  y.row(0) = y0.transpose();
  for (Index t = 1; t < n; ++t) {
    y.row(t) = (params.kernel.transpose() * inputs.row(t).transpose() +
                params.recurrence * y.row(t - 1).transpose())
                   .transpose();
  }
  return y;
}

/// Mean squared error over every window-end output, averaged over samples
/// and producers, with the gradient by backpropagation through each window.
inline double rnn_loss_gradient(const LinearRnnParams& params, const Matrix& inputs, const Matrix& targets,
                                RnnGradient* grad) {
  detail::check_rnn_shapes(params, inputs);
  const Index n = inputs.rows(), np = params.n_pro(), ts = params.window;
  if (targets.rows() != n || targets.cols() != np) throw DataError("RNN targets shape mismatch");
  if (n == 0) {
    if (grad) *grad = {Matrix::Zero(params.kernel.rows(), np), Matrix::Zero(np, np)};
    return 0.0;
  }
  const double scale = 1.0 / static_cast<double>(n * np);
  const Matrix u = inputs * params.kernel;
  const Matrix& b = params.recurrence;

  Matrix du;
  Matrix d_rec;
  if (grad) {
    du = Matrix::Zero(n, np);
    d_rec = Matrix::Zero(np, np);
  }
  Matrix hist(np, ts + 1);  // column k holds the state after window step k
  Vector delta(np), tmp(np);
  double loss = 0.0;

  for (Index t = 0; t < n; ++t) {
    const Index w = std::max<Index>(0, t - ts);
    const Index len = t - w + 1;
    hist.col(0) = u.row(w).transpose();
    for (Index k = 1; k < len; ++k) {
      tmp.noalias() = b * hist.col(k - 1);
      hist.col(k) = tmp + u.row(w + k).transpose();
    }
    const auto err = hist.col(len - 1) - targets.row(t).transpose();
    loss += err.squaredNorm();
    if (!grad) continue;
    delta = 2.0 * scale * err;
    for (Index k = len - 1; k >= 0; --k) {
      du.row(w + k) += delta.transpose();
      if (k == 0) break;
      d_rec.noalias() += delta * hist.col(k - 1).transpose();
      tmp.noalias() = b.transpose() * delta;
      delta = tmp;
    }
  }
  if (grad) {
    grad->d_kernel = inputs.transpose() * du;
    grad->d_recurrence = d_rec;
  }
  return loss * scale;
}

inline double rnn_loss(const LinearRnnParams& params, const Matrix& inputs, const Matrix& targets) {
  return rnn_loss_gradient(params, inputs, targets, nullptr);
}

/// Clips A at zero, zeroes the off-diagonal of B and clips its diagonal to
/// [0, 1 - 1e-6].
inline void project_rnn_constraints(LinearRnnParams& p) {
  p.kernel = p.kernel.cwiseMax(0.0);
  const Vector diag = p.recurrence.diagonal().cwiseMax(0.0).cwiseMin(kRecurrenceCeiling);
  p.recurrence = diag.asDiagonal();
}

inline LinearRnnParams rnn_initial_params(Index n_inj, Index n_pro, Index window, std::uint64_t seed) {
  Rng rng(seed);
  LinearRnnParams p;
  p.window = window;
  p.kernel.resize(n_inj, n_pro);
  for (Index j = 0; j < n_pro; ++j)
    for (Index i = 0; i < n_inj; ++i) p.kernel(i, j) = rng.uniform(0.0, 0.1);
  Vector diag(n_pro);
  for (Index j = 0; j < n_pro; ++j) diag[j] = rng.uniform(0.0, 0.1);
  p.recurrence = diag.asDiagonal();
  return p;
}

struct RnnTrainResult {
  LinearRnnParams params;
  std::vector<double> loss_trajectory;  // loss entering each epoch
  double final_loss = 0.0;              // loss after the last update
};

inline constexpr int kMaxRateHalvings = 40;

/// Full-batch gradient descent with momentum on the windowed MSE, projecting
/// onto the constraint set after every update. Steps never raise the loss:
/// an uphill momentum step restarts from zero velocity, and an uphill plain
/// step halves the rate for the rest of the run.
inline RnnTrainResult rnn_train(const RnnTrainConfig& config, const Matrix& inputs, const Matrix& targets,
                                std::optional<LinearRnnParams> init = std::nullopt) {
  if (config.epochs < 1) throw UsageError("epochs must be >= 1");
  if (!(config.learning_rate > 0.0)) throw UsageError("learning rate must be positive");
  if (config.momentum < 0.0 || config.momentum >= 1.0) throw UsageError("momentum must lie in [0, 1)");
  if (inputs.rows() != targets.rows()) throw DataError("inputs and targets differ in step count");
  if (config.window < 0 || config.window > inputs.rows()) {
    throw UsageError("window " + std::to_string(config.window) + " exceeds the " +
                     std::to_string(inputs.rows()) + " available steps");
  }

  RnnTrainResult out;
  out.params = init ? *init : rnn_initial_params(inputs.cols(), targets.cols(), config.window, config.seed);
  out.params.window = config.window;
  project_rnn_constraints(out.params);
  out.loss_trajectory.reserve(static_cast<std::size_t>(config.epochs));

  Matrix vel_k = Matrix::Zero(out.params.kernel.rows(), out.params.kernel.cols());
  Matrix vel_r = Matrix::Zero(out.params.recurrence.rows(), out.params.recurrence.cols());
  RnnGradient g, g_next;
  double rate = config.learning_rate;
  double loss = rnn_loss_gradient(out.params, inputs, targets, &g);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (!std::isfinite(loss)) {
      throw NumericalError("RNN training diverged: non-finite loss at epoch " + std::to_string(epoch));
    }
    out.loss_trajectory.push_back(loss);
    auto step = [&]() {
      LinearRnnParams next = out.params;
      next.kernel += vel_k;
      next.recurrence += vel_r;
      project_rnn_constraints(next);
      return next;
    };
    vel_k = config.momentum * vel_k - rate * g.d_kernel;
    vel_r = config.momentum * vel_r - rate * g.d_recurrence;
    LinearRnnParams next = step();
    double next_loss = rnn_loss_gradient(next, inputs, targets, &g_next);
    // A step that raises the loss is retried without velocity, then with a
    // halved rate.
    for (int retry = 0; !(next_loss <= loss) && retry < kMaxRateHalvings; ++retry) {
      if (retry > 0 || config.momentum == 0.0) rate *= 0.5;
      vel_k = -rate * g.d_kernel;
      vel_r = -rate * g.d_recurrence;
      next = step();
      next_loss = rnn_loss_gradient(next, inputs, targets, &g_next);
    }
    if (!(next_loss <= loss) && std::isfinite(next_loss)) {
      // no descent left at working precision
      vel_k.setZero();
      vel_r.setZero();
      continue;
    }
    out.params = std::move(next);
    loss = next_loss;
    std::swap(g, g_next);
  }
  out.final_loss = loss;
  if (!std::isfinite(out.final_loss)) {
    throw NumericalError("RNN training diverged: non-finite loss at epoch " + std::to_string(config.epochs));
  }
  return out;
}

/// CRMP without BHP on a uniform grid is the same geometric convolution as the
/// linear network: B_jj = e^{-dt/tau_j}, A_ij = (1 - B_jj) f_ij.
inline LinearRnnParams crm_to_rnn(const CrmpParams& params, double dt, Index window) {
  if (!(dt > 0.0)) throw UsageError("time step must be positive");
  if (params.j_index) throw DataError("a BHP drive term has no counterpart in the linear RNN");
  const Index np = params.n_pro();
  LinearRnnParams out;
  out.window = window;
  Vector diag(np);
  for (Index j = 0; j < np; ++j) {
    if (!(params.tau[j] > 0.0)) throw NumericalError("tau must be positive");
    diag[j] = std::exp(-dt / params.tau[j]);
  }
  out.recurrence = diag.asDiagonal();
  out.kernel = params.gains * (Vector::Ones(np) - diag).asDiagonal();
  return out;
}

inline LinearRnnParams crm_to_rnn(const CrmpParams& params, const Vector& times, Index window) {
  if (times.size() < 2) throw DataError("need at least two timestamps to infer the step");
  if (time_grid_nonuniformity(times) > 1e-9) throw DataError("crm_to_rnn requires a uniform time grid");
  return crm_to_rnn(params, times[1] - times[0], window);
}

/// Injector-producer connectivity read from the kernel.
inline Matrix connectivity_from_rnn(const LinearRnnParams& params) { return params.kernel; }

// ---------------------------------------------------------------------------
// Rate normalization. Inputs and targets share one scale (the largest rate in
// the training segment) so the kernel stays a dimensionless allocation.
// ---------------------------------------------------------------------------

struct RnnModel {
  LinearRnnParams params;
  double scale = 1.0;
};

struct RnnFit {
  RnnModel model;
  std::vector<double> loss_trajectory;
  double final_loss = 0.0;
  double wall_time = 0.0;
};

inline double rnn_rate_scale(const RateSeries& train) {
  double m = train.injection.size() ? train.injection.maxCoeff() : 0.0;
  if (train.production && train.production->size()) m = std::max(m, train.production->cwiseAbs().maxCoeff());
  return m > 0.0 ? m : 1.0;
}

inline RnnFit fit_rnn(const RateSeries& train, const RnnTrainConfig& config) {
  if (!train.production) throw DataError("training series has no production columns");
  const auto start = std::chrono::steady_clock::now();
  RnnFit fit;
  fit.model.scale = rnn_rate_scale(train);
  const Matrix x = train.injection / fit.model.scale;
  const Matrix y = *train.production / fit.model.scale;
  RnnTrainResult r = rnn_train(config, x, y);
  fit.model.params = std::move(r.params);
  fit.loss_trajectory = std::move(r.loss_trajectory);
  fit.final_loss = r.final_loss;
  fit.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return fit;
}

inline Matrix rnn_predict(const RnnModel& model, const Matrix& injection) {
  return rnn_forward(model.params, injection / model.scale) * model.scale;
}

}  // namespace floodnet
