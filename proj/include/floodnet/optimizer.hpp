#pragma once

/**
 * @file optimizer.hpp
 * @brief Constrained least-squares fitting of the CRM family.
 *
 * The objective is the variance-scaled MSE (see loss()). Parameters are kept
 * feasible by projection: tau >= kTauMin, q0 >= 0, J >= 0 and each injector
 * row of the gain matrix on the probability simplex (equality mode) or the
 * capped simplex sum <= 1 (inequality mode).
 *
 * The solver is a projected method: a damped Gauss-Newton step on the
 * coordinates away from their bounds, augmented by a secant estimate of the
 * residual curvature, with plain Gauss-Newton and then a Barzilai-Borwein
 * projected-gradient step as fallbacks. An Armijo backtracking search
 * accepts only steps that decrease the loss, so the loss trajectory is
 * non-increasing.
 */

#include "floodnet/core.hpp"
#include "floodnet/crm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace floodnet {

enum class GainConstraint { equality, inequality };

struct FitConfig {
  int max_iters = 2000;
  double tol = 1e-10;  // relative loss decrease
  int n_starts = 8;
  std::uint64_t seed = 0;
  GainConstraint gain_constraint = GainConstraint::equality;
  bool include_press = false;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossWeights {
  Vector weight;                        // 1 / var_j, or 1 for degenerate columns
  std::vector<Index> degenerate_columns;  // zero-variance observed producers
};

inline LossWeights loss_weights(const Matrix& observed) {
  LossWeights w;
  const Index n = observed.rows();
  w.weight = Vector::Ones(observed.cols());
  for (Index j = 0; j < observed.cols(); ++j) {
    const double mean = n ? observed.col(j).mean() : 0.0;
    const double var = n ? (observed.col(j).array() - mean).square().mean() : 0.0;
    if (var <= 1e-14 * (mean * mean) || var == 0.0) {
      w.degenerate_columns.push_back(j);
    } else {
      w.weight[j] = 1.0 / var;
    }
  }
  return w;
}

inline double weighted_loss(const Matrix& predicted, const Matrix& observed, const LossWeights& w) {
  if (predicted.rows() != observed.rows() || predicted.cols() != observed.cols()) {
    throw DataError("loss: predicted and observed shapes differ");
  }
  const Index n = observed.rows(), np = observed.cols();
  if (n == 0 || np == 0) return 0.0;
  double total = 0.0;
  for (Index j = 0; j < np; ++j) {
    total += w.weight[j] * (predicted.col(j) - observed.col(j)).squaredNorm() / static_cast<double>(n);
  }
  return total / static_cast<double>(np);
}

/// Per-producer MSE divided by the variance of that producer's observations,
/// averaged over producers. Zero-variance columns fall back to plain MSE; use
/// loss_weights() to see which columns did.
inline double loss(const Matrix& predicted, const Matrix& observed) {
  return weighted_loss(predicted, observed, loss_weights(observed));
}

// ---------------------------------------------------------------------------
// Projections
// ---------------------------------------------------------------------------

/// Euclidean projection onto {x >= 0, sum x = 1} (sort and threshold).
inline Vector project_simplex(const Vector& v) {
  const Index n = v.size();
  if (n == 0) return v;
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0, theta = 0.0;
  for (Index k = 0; k < n; ++k) {
    cum += u[static_cast<std::size_t>(k)];
    const double t = (cum - 1.0) / static_cast<double>(k + 1);
    if (u[static_cast<std::size_t>(k)] - t > 0.0) theta = t;
  }
  return (v.array() - theta).cwiseMax(0.0).matrix();
}

/// Euclidean projection onto {x >= 0, sum x <= 1}.
inline Vector project_capped_simplex(const Vector& v) {
  const Vector clipped = v.cwiseMax(0.0);
  if (clipped.sum() <= 1.0) return clipped;
  return project_simplex(v);
}

inline Matrix project_gain_rows(const Matrix& gains, GainConstraint mode) {
  Matrix out(gains.rows(), gains.cols());
  for (Index i = 0; i < gains.rows(); ++i) {
    const Vector row = gains.row(i).transpose();
    out.row(i) = (mode == GainConstraint::equality ? project_simplex(row) : project_capped_simplex(row)).transpose();
  }
  return out;
}

/// max |row sum - 1| in equality mode, max(0, row sum - 1) otherwise.
inline double gain_row_residual(const Matrix& gains, GainConstraint mode) {
  double worst = 0.0;
  for (Index i = 0; i < gains.rows(); ++i) {
    const double s = gains.row(i).sum();
    worst = std::max(worst, mode == GainConstraint::equality ? std::abs(s - 1.0) : std::max(0.0, s - 1.0));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

/// Feasible set of a problem in its internal coordinates: a box on every
/// coordinate, plus groups of coordinates that sum to 1 (equality) or to at
/// most 1 (inequality).
struct ConstraintLayout {
  Vector lo, hi;
  std::vector<std::vector<Index>> rows;
  GainConstraint mode = GainConstraint::equality;
};

struct SolverResult {
  Vector theta;
  std::vector<double> trajectory;  // entry 0 is the starting loss
  int iterations = 0;
  int newton_steps = 0;
};

namespace detail {

/// Damped Gauss-Newton step restricted to the coordinates that are not held
/// at a bound, keeping the binding row sums fixed. A coordinate is held when
/// it sits on a bound and the projected-gradient point z keeps it there.
/// Returns false when nothing is free or the reduced system is singular.
inline bool reduced_newton_step(const ConstraintLayout& lay, const Vector& th, const Vector& z, const Vector& g,
                                const Matrix& H, double mu, Vector& d) {
  constexpr double kEps = 1e-12;
  const Index n = th.size();
  std::vector<char> fixed(static_cast<std::size_t>(n), 0), in_row(static_cast<std::size_t>(n), 0);
  std::vector<std::vector<Index>> sums;

  for (const auto& row : lay.rows) {
    double total = 0.0, z_total = 0.0;
    for (Index k : row) {
      in_row[static_cast<std::size_t>(k)] = 1;
      total += th[k];
      z_total += z[k];
    }
    const bool binding =
        lay.mode == GainConstraint::equality || (total >= 1.0 - 1e-10 && z_total >= 1.0 - 1e-10);
    std::vector<Index> free_in_row;
    for (Index k : row) {
      if (th[k] <= kEps && z[k] <= kEps) {
        fixed[static_cast<std::size_t>(k)] = 1;
      } else {
        free_in_row.push_back(k);
      }
    }
    if (binding && !free_in_row.empty()) sums.push_back(std::move(free_in_row));
  }
  for (Index k = 0; k < n; ++k) {
    if (in_row[static_cast<std::size_t>(k)]) continue;
    const bool low = th[k] <= lay.lo[k] + kEps && z[k] <= lay.lo[k] + kEps;
    const bool high = th[k] >= lay.hi[k] - kEps && z[k] >= lay.hi[k] - kEps;
    if (low || high) fixed[static_cast<std::size_t>(k)] = 1;
  }

  std::vector<Index> free;
  std::vector<Index> pos(static_cast<std::size_t>(n), -1);
  for (Index k = 0; k < n; ++k) {
    if (!fixed[static_cast<std::size_t>(k)]) {
      pos[static_cast<std::size_t>(k)] = static_cast<Index>(free.size());
      free.push_back(k);
    }
  }
  d.setZero(n);
  const Index nf = static_cast<Index>(free.size());
  if (nf == 0) return false;
  const Index nc = static_cast<Index>(sums.size());

  Matrix kkt = Matrix::Zero(nf + nc, nf + nc);
  Vector rhs = Vector::Zero(nf + nc);
  double diag_max = 0.0;
  for (Index a = 0; a < nf; ++a) diag_max = std::max(diag_max, H(free[a], free[a]));
  const double floor = 1e-12 * std::max(diag_max, 1e-300);
  for (Index a = 0; a < nf; ++a) {
    for (Index b = 0; b < nf; ++b) kkt(a, b) = H(free[a], free[b]);
    kkt(a, a) += mu * std::max(H(free[a], free[a]), floor) + floor;
    rhs[a] = -g[free[a]];
  }
  for (Index c = 0; c < nc; ++c) {
    for (Index k : sums[static_cast<std::size_t>(c)]) {
      const Index a = pos[static_cast<std::size_t>(k)];
      kkt(nf + c, a) = 1.0;
      kkt(a, nf + c) = 1.0;
    }
  }
  const Vector sol = kkt.partialPivLu().solve(rhs);
  if (!sol.allFinite()) return false;
  for (Index a = 0; a < nf; ++a) d[free[a]] = sol[a];
  return true;
}

}  // namespace detail

/// Minimizes problem.loss over the feasible set, starting from
/// project(theta). Each iteration tries the secant-augmented and then the
/// plain Gauss-Newton step on the free coordinates, and falls back to a
/// Barzilai-Borwein projected-gradient step. Steps pass an Armijo test on
/// the projected point, so the trajectory never increases.
template <class Problem>
SolverResult minimize_projected(const Problem& problem, Vector theta, int max_iters, double tol) {
  constexpr double kArmijo = 1e-4;
  constexpr int kMaxHalvings = 40;
  constexpr double kAlphaMin = 1e-12, kAlphaMax = 1e12;
  constexpr double kLossFloor = 1e-24;  // variance-scaled, so round-off level

  const ConstraintLayout& lay = problem.layout();
  problem.project(theta);
  const Index n = theta.size();
  Vector grad(n), grad_new(n), d(n);
  Matrix H(n, n), H_new(n, n);
  double f = problem.evaluate(theta, grad, &H);
  if (!std::isfinite(f)) throw NumericalError("non-finite loss at the starting point");

  SolverResult res;
  res.trajectory.push_back(f);

  auto projected = [&](const Vector& step) {
    Vector trial = theta + step;
    problem.project(trial);
    return trial;
  };

  // Armijo search along the projection arc theta -> P(theta + lambda d).
  auto search = [&](const Vector& dir, int halvings, Vector& trial, double& f_new, double& lambda) {
    lambda = 1.0;
    for (int h = 0; h <= halvings; ++h) {
      trial = projected(lambda * dir);
      const double slope = grad.dot(trial - theta);
      if (slope < 0.0) {
        f_new = problem.loss(trial);
        if (std::isfinite(f_new) && f_new <= f + kArmijo * slope) return true;
      }
      lambda *= 0.5;
    }
    return false;
  };

  double alpha = 1.0;
  {
    const double pg = (projected(-grad) - theta).cwiseAbs().maxCoeff();
    alpha = pg > 0.0 ? std::clamp(1.0 / pg, kAlphaMin, kAlphaMax) : 1.0;
  }
  double mu = 1e-3;
  Matrix S = Matrix::Zero(n, n);  // secant estimate of the residual curvature
  bool have_s = false;

  for (int it = 0; it < max_iters; ++it) {
    if (f <= kLossFloor) break;
    const double pg = (projected(-grad) - theta).cwiseAbs().maxCoeff();
    if (pg <= 1e-15 * std::max(1.0, theta.cwiseAbs().maxCoeff())) break;  // stationary

    Vector trial;
    double f_new = std::numeric_limits<double>::quiet_NaN(), lambda = 1.0;
    bool accepted = false;
    const Vector z = projected(-alpha * grad);
    for (int pass = have_s ? 0 : 1; pass < 2 && !accepted; ++pass) {
      // pass 0: Gauss-Newton plus secant term; pass 1: plain Gauss-Newton
      const bool solved = pass == 0 ? detail::reduced_newton_step(lay, theta, z, grad, Matrix(H + S), mu, d)
                                    : detail::reduced_newton_step(lay, theta, z, grad, H, mu, d);
      if (solved) accepted = search(d, 12, trial, f_new, lambda);
    }
    if (accepted) {
      ++res.newton_steps;
      mu = lambda == 1.0 ? std::max(mu * 0.25, 1e-12) : std::min(mu * 4.0, 1e8);
    } else {
      mu = std::min(mu * 16.0, 1e8);
    }
    if (!accepted) {
      const Vector step = projected(-alpha * grad) - theta;
      accepted = search(step, kMaxHalvings, trial, f_new, lambda);
    }
    if (!accepted) {
      if (!std::isfinite(problem.loss(theta))) {
        throw NumericalError("non-finite loss at iteration " + std::to_string(it));
      }
      break;  // no descent left at working precision
    }

    f_new = problem.evaluate(trial, grad_new, &H_new);
    if (!std::isfinite(f_new)) throw NumericalError("non-finite loss at iteration " + std::to_string(it));
    const Vector s = trial - theta;
    const Vector y = grad_new - grad;
    const double sy = s.dot(y);
    alpha = sy > 0.0 ? std::clamp(s.squaredNorm() / sy, kAlphaMin, kAlphaMax) : kAlphaMax;
    if (sy > 0.0) {
      // Dennis-Gay-Welsch update so that (H_new + S) s = y, with sizing
      const Vector y_res = y - H_new * s;
      const double sSs = s.dot(S * s);
      if (sSs > 0.0) S *= std::min(1.0, std::abs(s.dot(y_res)) / sSs);
      const Vector w = y_res - S * s;
      S += (w * y.transpose() + y * w.transpose()) / sy - (w.dot(s) / (sy * sy)) * (y * y.transpose());
      have_s = S.allFinite();
      if (!have_s) S.setZero();
    }

    const double rel = (f - f_new) / f;
    theta = std::move(trial);
    grad.swap(grad_new);
    H.swap(H_new);
    f = f_new;
    res.trajectory.push_back(f);
    res.iterations = it + 1;
    if (rel < tol) break;
  }
  res.theta = std::move(theta);
  return res;
}

// ---------------------------------------------------------------------------
// Fit reports and the multi-start driver
// ---------------------------------------------------------------------------

template <class Params>
struct FitReport {
  Params params;
  double final_loss = 0.0;
  std::vector<double> loss_trajectory;  // winning start; entry 0 is its initial loss
  double constraint_residual = 0.0;
  double wall_time = 0.0;  // seconds, all starts
  int start_index = 0;
  int iterations = 0;
  std::vector<double> start_losses;  // NaN where a start failed
  bool include_press = false;
};

namespace detail {

inline void check_fit_config(const FitConfig& c) {
  if (c.max_iters < 1) throw UsageError("max_iters must be >= 1");
  if (!(c.tol > 0.0)) throw UsageError("tol must be positive");
  if (c.n_starts < 1) throw UsageError("n_starts must be >= 1");
}

inline const Matrix& observed_production(const RateSeries& s) {
  if (!s.production) throw DataError("fitting needs observed production columns");
  return *s.production;
}

inline double mean_step(const RateSeries& s) {
  if (s.n_steps() < 2) throw DataError("fitting needs at least two time steps");
  return (s.times[s.n_steps() - 1] - s.times[0]) / static_cast<double>(s.n_steps() - 1);
}

/// Time constants are optimized through the decay factor over a mean step,
/// beta = e^{-step/tau}; the recursion is linear in it, where the loss is
/// nearly flat in tau itself once tau << step.
struct TauCoordinate {
  double step = 1.0;
  double lo = 0.0, hi = 1.0;

  explicit TauCoordinate(double mean_step) : step(mean_step) {
    lo = std::max(std::exp(-step / kTauMin), std::numeric_limits<double>::min());
    hi = 1.0 - 1e-15;
  }
  double to_beta(double tau) const { return std::clamp(std::exp(-step / tau), lo, hi); }
  double to_tau(double beta) const { return -step / std::log(beta); }
  /// dtau/dbeta
  double jacobian(double beta) const {
    const double tau = to_tau(beta);
    return tau * tau / (step * beta);
  }
  double clamp(double beta) const { return std::clamp(beta, lo, hi); }
};

inline double log_uniform_tau(Rng& rng) { return std::exp(rng.uniform(std::log(0.1), std::log(10.0))); }

/// Largest |dp/dt| over the series times the mean step, or 1 when BHP is flat.
inline double bhp_drive_scale(const RateSeries& s, double tau_scale) {
  if (!s.bhp) return 1.0;
  double m = 0.0;
  for (Index t = 1; t < s.n_steps(); ++t) {
    const double dt = s.times[t] - s.times[t - 1];
    m = std::max(m, ((s.bhp->row(t) - s.bhp->row(t - 1)).cwiseAbs().maxCoeff()) / dt);
  }
  return m > 0.0 ? m * tau_scale : 1.0;
}

/// H[idx, idx] += scale * J^T J
inline void add_gauss_newton_block(Matrix& H, const std::vector<Index>& idx, const Matrix& J, double scale) {
  const Matrix block = scale * (J.transpose() * J);
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = 0; b < idx.size(); ++b)
      H(idx[a], idx[b]) += block(static_cast<Index>(a), static_cast<Index>(b));
}

template <class Problem>
auto run_multistart(const Problem& problem, const FitConfig& config, const std::vector<Vector>& starts) {
  using Params = typename Problem::Params;
  const auto t0 = std::chrono::steady_clock::now();
  FitReport<Params> report;
  report.include_press = problem.includes_press();
  std::optional<SolverResult> best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::string last_error;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    try {
      SolverResult r = minimize_projected(problem, starts[k], config.max_iters, config.tol);
      const double l = r.trajectory.back();
      report.start_losses.push_back(l);
      if (l < best_loss) {  // ties keep the lower start index
        best_loss = l;
        best = std::move(r);
        report.start_index = static_cast<int>(k);
      }
    } catch (const NumericalError& e) {
      report.start_losses.push_back(std::numeric_limits<double>::quiet_NaN());
      last_error = e.what();
    }
  }
  if (!best) throw NumericalError("all " + std::to_string(starts.size()) + " starts failed: " + last_error);
  report.params = problem.unpack(best->theta);
  report.final_loss = best->trajectory.back();
  report.loss_trajectory = std::move(best->trajectory);
  report.iterations = best->iterations;
  report.constraint_residual = problem.constraint_residual(best->theta);
  report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CRMP
// ---------------------------------------------------------------------------

/// Internal coordinates: [decay factor beta_j (N_pro) | gains row-major-by-injector
/// (N_inj*N_pro) | q0 / rate_scale (N_pro) | J * bhp_scale / rate_scale (N_pro,
/// when BHP is fitted)].
class CrmpProblem {
 public:
  using Params = CrmpParams;

  CrmpProblem(const RateSeries& series, const FitConfig& config)
      : series_(series),
        observed_(detail::observed_production(series)),
        weights_(loss_weights(observed_)),
        mode_(config.gain_constraint),
        with_j_(config.include_press && series.bhp.has_value()),
        ni_(series.injection.cols()),
        np_(observed_.cols()) {
    tau_scale_ = detail::mean_step(series);
    tc_ = detail::TauCoordinate(tau_scale_);
    rate_scale_ = observed_.size() ? observed_.cwiseAbs().maxCoeff() : 1.0;
    if (!(rate_scale_ > 0.0)) rate_scale_ = 1.0;
    j_scale_ = detail::bhp_drive_scale(series, tau_scale_) / rate_scale_;
    layout_.mode = mode_;
    layout_.lo = Vector::Zero(size());
    layout_.hi = Vector::Constant(size(), std::numeric_limits<double>::infinity());
    layout_.lo.head(np_).setConstant(tc_.lo);
    layout_.hi.head(np_).setConstant(tc_.hi);
    for (Index i = 0; i < ni_; ++i) {
      std::vector<Index> row;
      for (Index j = 0; j < np_; ++j) row.push_back(np_ + i * np_ + j);
      layout_.rows.push_back(std::move(row));
    }
  }

  Index size() const { return np_ * (with_j_ ? 3 : 2) + ni_ * np_; }
  bool includes_press() const { return with_j_; }

  Vector pack(const CrmpParams& p) const {
    Vector th(size());
    Index k = 0;
    for (Index j = 0; j < np_; ++j) th[k++] = tc_.to_beta(p.tau[j]);
    for (Index i = 0; i < ni_; ++i)
      for (Index j = 0; j < np_; ++j) th[k++] = p.gains(i, j);
    for (Index j = 0; j < np_; ++j) th[k++] = p.q0[j] / rate_scale_;
    if (with_j_) {
      for (Index j = 0; j < np_; ++j) th[k++] = p.j_index ? (*p.j_index)[j] * j_scale_ : 0.0;
    }
    return th;
  }

  CrmpParams unpack(const Vector& th) const {
    CrmpParams p;
    p.tau.resize(np_);
    p.gains.resize(ni_, np_);
    p.q0.resize(np_);
    Index k = 0;
    for (Index j = 0; j < np_; ++j) p.tau[j] = tc_.to_tau(th[k++]);
    for (Index i = 0; i < ni_; ++i)
      for (Index j = 0; j < np_; ++j) p.gains(i, j) = th[k++];
    for (Index j = 0; j < np_; ++j) p.q0[j] = th[k++] * rate_scale_;
    if (with_j_) {
      Vector jv(np_);
      for (Index j = 0; j < np_; ++j) jv[j] = th[k++] / j_scale_;
      p.j_index = jv;
    }
    return p;
  }

  double loss(const Vector& th) const { return weighted_loss(crmp_predict(unpack(th), series_), observed_, weights_); }

  double loss_gradient(const Vector& th, Vector& g) const { return evaluate(th, g, nullptr); }

  /// Loss and gradient; also the Gauss-Newton Hessian when H is given.
  double evaluate(const Vector& th, Vector& g, Matrix* H) const {
    const auto [pred, b] = crmp_predict_with_gradients(unpack(th), series_);
    const Index n = series_.n_steps();
    const double c = 2.0 / static_cast<double>(n * np_);
    const Index per = ni_ + (with_j_ ? 3 : 2);
    g.setZero(size());
    if (H) H->setZero(size(), size());
    Matrix jac(n, per);
    std::vector<Index> idx(static_cast<std::size_t>(per));
    for (Index j = 0; j < np_; ++j) {
      Index col = 0;
      auto put = [&](Index k, const auto& column, double factor) {
        jac.col(col) = column * factor;
        idx[static_cast<std::size_t>(col++)] = k;
      };
      put(j, b.d_tau.col(j), tc_.jacobian(th[j]));
      for (Index i = 0; i < ni_; ++i) put(np_ + i * np_ + j, b.d_gains[static_cast<std::size_t>(i)].col(j), 1.0);
      put(np_ + ni_ * np_ + j, b.d_q0.col(j), rate_scale_);
      if (with_j_) put(2 * np_ + ni_ * np_ + j, b.d_j->col(j), 1.0 / j_scale_);

      const double cw = c * weights_.weight[j];
      const Vector gj = jac.transpose() * (pred.col(j) - observed_.col(j)) * cw;
      for (Index a = 0; a < per; ++a) g[idx[static_cast<std::size_t>(a)]] = gj[a];
      if (H) detail::add_gauss_newton_block(*H, idx, jac, cw);
    }
    return weighted_loss(pred, observed_, weights_);
  }

  const ConstraintLayout& layout() const { return layout_; }

  void project(Vector& th) const {
    for (Index j = 0; j < np_; ++j) th[j] = tc_.clamp(th[j]);
    for (Index i = 0; i < ni_; ++i) {
      auto row = th.segment(np_ + i * np_, np_);
      const Vector v = row;
      row = mode_ == GainConstraint::equality ? project_simplex(v) : project_capped_simplex(v);
    }
    for (Index k = np_ + ni_ * np_; k < size(); ++k) th[k] = std::max(th[k], 0.0);
  }

  double constraint_residual(const Vector& th) const { return gain_row_residual(unpack(th).gains, mode_); }

  CrmpParams initial_guess(Rng& rng) const {
    CrmpParams p;
    p.tau.resize(np_);
    for (Index j = 0; j < np_; ++j) p.tau[j] = detail::log_uniform_tau(rng);
    p.gains = Matrix::Constant(ni_, np_, 1.0 / static_cast<double>(np_));
    p.q0 = observed_.row(0).transpose().cwiseMax(0.0);
    if (with_j_) p.j_index = Vector::Zero(np_);
    return p;
  }

 private:
  RateSeries series_;
  Matrix observed_;
  LossWeights weights_;
  GainConstraint mode_;
  bool with_j_;
  Index ni_, np_;
  detail::TauCoordinate tc_{1.0};
  double tau_scale_ = 1.0, rate_scale_ = 1.0, j_scale_ = 1.0;
  ConstraintLayout layout_;
};

namespace detail {

template <class Problem, class Params>
std::vector<Vector> make_starts(const Problem& problem, const FitConfig& config, const std::optional<Params>& init) {
  std::vector<Vector> starts;
  for (int k = 0; k < config.n_starts; ++k) {
    if (k == 0 && init) {
      starts.push_back(problem.pack(*init));
    } else {
      Rng rng = Rng::stream(config.seed, static_cast<std::uint64_t>(k));
      starts.push_back(problem.pack(problem.initial_guess(rng)));
    }
  }
  return starts;
}

}  // namespace detail

/// Fits CRMP to the observed production of `series`. J is fitted only when
/// config.include_press is set and the series carries BHP.
inline FitReport<CrmpParams> fit_crmp(const RateSeries& series, const WellField& field, const FitConfig& config,
                                      const std::optional<CrmpParams>& init = std::nullopt) {
  detail::check_fit_config(config);
  validate(series, field);
  const CrmpProblem problem(series, config);
  if (init && (init->n_inj() != field.n_inj() || init->n_pro() != field.n_pro())) {
    throw DataError("initial CRMP parameters do not match the well field");
  }
  return detail::run_multistart(problem, config, detail::make_starts(problem, config, init));
}

// ---------------------------------------------------------------------------
// CRMT
// ---------------------------------------------------------------------------

/// Tank fit on net injection and net production. In equality mode the
/// support fraction is pinned to 1; in inequality mode it lives in [0, 1].
class CrmtProblem {
 public:
  using Params = CrmtParams;

  CrmtProblem(const RateSeries& series, const FitConfig& config)
      : series_(series), mode_(config.gain_constraint) {
    observed_ = Matrix(detail::observed_production(series).rowwise().sum());
    weights_ = loss_weights(observed_);
    tau_scale_ = detail::mean_step(series);
    tc_ = detail::TauCoordinate(tau_scale_);
    rate_scale_ = observed_.size() ? observed_.cwiseAbs().maxCoeff() : 1.0;
    if (!(rate_scale_ > 0.0)) rate_scale_ = 1.0;
    layout_.mode = mode_;
    layout_.lo = Vector{{tc_.lo, 0.0, 0.0}};
    layout_.hi = Vector{{tc_.hi, 1.0, std::numeric_limits<double>::infinity()}};
    layout_.rows = {{1}};
  }

  Index size() const { return 3; }
  bool includes_press() const { return false; }

  Vector pack(const CrmtParams& p) const { return Vector{{tc_.to_beta(p.tau), p.f_field, p.q0 / rate_scale_}}; }
  CrmtParams unpack(const Vector& th) const { return {tc_.to_tau(th[0]), th[1], th[2] * rate_scale_}; }

  double loss(const Vector& th) const {
    return weighted_loss(Matrix(crmt_predict(unpack(th), series_)), observed_, weights_);
  }

  double loss_gradient(const Vector& th, Vector& g) const { return evaluate(th, g, nullptr); }

  double evaluate(const Vector& th, Vector& g, Matrix* H) const {
    const auto [pred, b] = crmt_predict_with_gradients(unpack(th), series_);
    const double c = 2.0 * weights_.weight[0] / static_cast<double>(series_.n_steps());
    Matrix jac(pred.size(), 3);
    jac.col(0) = b.d_tau * tc_.jacobian(th[0]);
    jac.col(1) = b.d_f;
    jac.col(2) = b.d_q0 * rate_scale_;
    g = jac.transpose() * (pred - observed_.col(0)) * c;
    if (H) *H = c * (jac.transpose() * jac);
    return weighted_loss(Matrix(pred), observed_, weights_);
  }

  const ConstraintLayout& layout() const { return layout_; }

  void project(Vector& th) const {
    th[0] = tc_.clamp(th[0]);
    th[1] = mode_ == GainConstraint::equality ? 1.0 : std::clamp(th[1], 0.0, 1.0);
    th[2] = std::max(th[2], 0.0);
  }

  double constraint_residual(const Vector& th) const {
    return mode_ == GainConstraint::equality ? std::abs(th[1] - 1.0) : std::max(0.0, th[1] - 1.0);
  }

  CrmtParams initial_guess(Rng& rng) const {
    return {detail::log_uniform_tau(rng), 1.0, std::max(0.0, observed_(0, 0))};
  }

 private:
  RateSeries series_;
  Matrix observed_;
  LossWeights weights_;
  GainConstraint mode_;
  detail::TauCoordinate tc_{1.0};
  double tau_scale_ = 1.0, rate_scale_ = 1.0;
  ConstraintLayout layout_;
};

inline FitReport<CrmtParams> fit_crmt(const RateSeries& series, const WellField& field, const FitConfig& config,
                                      const std::optional<CrmtParams>& init = std::nullopt) {
  detail::check_fit_config(config);
  validate(series, field);
  const CrmtProblem problem(series, config);
  return detail::run_multistart(problem, config, detail::make_starts(problem, config, init));
}

// ---------------------------------------------------------------------------
// CRMIP
// ---------------------------------------------------------------------------

/// Internal coordinates: four blocks of N_inj*N_pro (injector-major) for the
/// decay factors, gains, q0 and, when fitted, J; scaled like CrmpProblem.
class CrmipProblem {
 public:
  using Params = CrmipParams;

  CrmipProblem(const RateSeries& series, const FitConfig& config)
      : series_(series),
        observed_(detail::observed_production(series)),
        weights_(loss_weights(observed_)),
        mode_(config.gain_constraint),
        with_j_(config.include_press && series.bhp.has_value()),
        ni_(series.injection.cols()),
        np_(observed_.cols()) {
    tau_scale_ = detail::mean_step(series);
    tc_ = detail::TauCoordinate(tau_scale_);
    rate_scale_ = observed_.size() ? observed_.cwiseAbs().maxCoeff() : 1.0;
    if (!(rate_scale_ > 0.0)) rate_scale_ = 1.0;
    j_scale_ = detail::bhp_drive_scale(series, tau_scale_) / rate_scale_;
    const Index m = block();
    layout_.mode = mode_;
    layout_.lo = Vector::Zero(size());
    layout_.hi = Vector::Constant(size(), std::numeric_limits<double>::infinity());
    layout_.lo.head(m).setConstant(tc_.lo);
    layout_.hi.head(m).setConstant(tc_.hi);
    for (Index i = 0; i < ni_; ++i) {
      std::vector<Index> row;
      for (Index j = 0; j < np_; ++j) row.push_back(m + i * np_ + j);
      layout_.rows.push_back(std::move(row));
    }
  }

  Index block() const { return ni_ * np_; }
  Index size() const { return block() * (with_j_ ? 4 : 3); }
  bool includes_press() const { return with_j_; }

  Vector pack(const CrmipParams& p) const {
    Vector th(size());
    const Index m = block();
    for (Index i = 0; i < ni_; ++i) {
      for (Index j = 0; j < np_; ++j) {
        const Index k = i * np_ + j;
        th[k] = tc_.to_beta(p.tau(i, j));
        th[m + k] = p.gains(i, j);
        th[2 * m + k] = p.q0(i, j) / rate_scale_;
        if (with_j_) th[3 * m + k] = p.j_index ? (*p.j_index)(i, j) * j_scale_ : 0.0;
      }
    }
    return th;
  }

  CrmipParams unpack(const Vector& th) const {
    CrmipParams p;
    const Index m = block();
    p.tau.resize(ni_, np_);
    p.gains.resize(ni_, np_);
    p.q0.resize(ni_, np_);
    if (with_j_) p.j_index = Matrix(ni_, np_);
    for (Index i = 0; i < ni_; ++i) {
      for (Index j = 0; j < np_; ++j) {
        const Index k = i * np_ + j;
        p.tau(i, j) = tc_.to_tau(th[k]);
        p.gains(i, j) = th[m + k];
        p.q0(i, j) = th[2 * m + k] * rate_scale_;
        if (with_j_) (*p.j_index)(i, j) = th[3 * m + k] / j_scale_;
      }
    }
    return p;
  }

  double loss(const Vector& th) const {
    return weighted_loss(crmip_predict(unpack(th), series_).totals, observed_, weights_);
  }

  double loss_gradient(const Vector& th, Vector& g) const { return evaluate(th, g, nullptr); }

  double evaluate(const Vector& th, Vector& g, Matrix* H) const {
    const auto [pred, b] = crmip_predict_with_gradients(unpack(th), series_);
    const Index n = series_.n_steps(), m = block();
    const double c = 2.0 / static_cast<double>(n * np_);
    const Index per = ni_ * (with_j_ ? 4 : 3);
    g.setZero(size());
    if (H) H->setZero(size(), size());
    Matrix jac(n, per);
    std::vector<Index> idx(static_cast<std::size_t>(per));
    for (Index j = 0; j < np_; ++j) {
      Index col = 0;
      auto put = [&](Index k, const auto& column, double factor) {
        jac.col(col) = column * factor;
        idx[static_cast<std::size_t>(col++)] = k;
      };
      for (Index i = 0; i < ni_; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const Index k = i * np_ + j;
        put(k, b.d_tau[ui].col(j), tc_.jacobian(th[k]));
        put(m + k, b.d_gains[ui].col(j), 1.0);
        put(2 * m + k, b.d_q0[ui].col(j), rate_scale_);
        if (with_j_) put(3 * m + k, (*b.d_j)[ui].col(j), 1.0 / j_scale_);
      }
      const double cw = c * weights_.weight[j];
      const Vector gj = jac.transpose() * (pred.totals.col(j) - observed_.col(j)) * cw;
      for (Index a = 0; a < per; ++a) g[idx[static_cast<std::size_t>(a)]] = gj[a];
      if (H) detail::add_gauss_newton_block(*H, idx, jac, cw);
    }
    return weighted_loss(pred.totals, observed_, weights_);
  }

  const ConstraintLayout& layout() const { return layout_; }

  void project(Vector& th) const {
    const Index m = block();
    for (Index k = 0; k < m; ++k) th[k] = tc_.clamp(th[k]);
    for (Index i = 0; i < ni_; ++i) {
      auto row = th.segment(m + i * np_, np_);
      const Vector v = row;
      row = mode_ == GainConstraint::equality ? project_simplex(v) : project_capped_simplex(v);
    }
    for (Index k = 2 * m; k < size(); ++k) th[k] = std::max(th[k], 0.0);
  }

  double constraint_residual(const Vector& th) const { return gain_row_residual(unpack(th).gains, mode_); }

  CrmipParams initial_guess(Rng& rng) const {
    CrmipParams p;
    p.tau.resize(ni_, np_);
    for (Index i = 0; i < ni_; ++i)
      for (Index j = 0; j < np_; ++j) p.tau(i, j) = detail::log_uniform_tau(rng);
    p.gains = Matrix::Constant(ni_, np_, 1.0 / static_cast<double>(np_));
    p.q0 = (observed_.row(0).cwiseMax(0.0) / static_cast<double>(ni_)).replicate(ni_, 1);
    if (with_j_) p.j_index = Matrix::Zero(ni_, np_);
    return p;
  }

 private:
  RateSeries series_;
  Matrix observed_;
  LossWeights weights_;
  GainConstraint mode_;
  bool with_j_;
  Index ni_, np_;
  detail::TauCoordinate tc_{1.0};
  double tau_scale_ = 1.0, rate_scale_ = 1.0, j_scale_ = 1.0;
  ConstraintLayout layout_;
};

inline FitReport<CrmipParams> fit_crmip(const RateSeries& series, const WellField& field, const FitConfig& config,
                                        const std::optional<CrmipParams>& init = std::nullopt) {
  detail::check_fit_config(config);
  validate(series, field);
  const CrmipProblem problem(series, config);
  if (init && (init->n_inj() != field.n_inj() || init->n_pro() != field.n_pro())) {
    throw DataError("initial CRMIP parameters do not match the well field");
  }
  return detail::run_multistart(problem, config, detail::make_starts(problem, config, init));
}

}  // namespace floodnet
