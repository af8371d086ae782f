#pragma once

/**
 * @file crm.hpp
 * @brief Capacitance-resistance models: CRMT (tank), CRMP (producer control
 * volumes) and CRMIP (injector-producer bundles).
 *
 * Every producer drainage volume behaves like an RC circuit driven by the
 * injectors:
 *
 *   q_j(t_n) = q_j(t_{n-1}) e^{-dt_n/tau_j}
 *            + (1 - e^{-dt_n/tau_j}) [ sum_i f_ij I_i(t_n) - J_j tau_j dp_j / dt_n ]
 *
 * with tau = c_t V_p / J the time constant of the volume, f_ij the fraction of
 * injector i's rate allocated to producer j, J_j the productivity index and
 * dp_j = p_wf,j(t_n) - p_wf,j(t_{n-1}). Injection is held constant and BHP
 * varies linearly across each step. Compressibility and pore volume only enter
 * through tau.
 *
 * Row 0 of every prediction is the initial rate q(t0); rows n >= 1 apply the
 * recursion with injection row n. Exponentials are always evaluated in the
 * decaying form e^{-dt/tau}.
 */

#include "floodnet/core.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace floodnet {

/// Smallest admissible time constant (days) during fitting.
inline constexpr double kTauMin = 1e-4;

struct CrmtParams {
  double tau = 1.0;      // days
  double f_field = 1.0;  // share of net injection supporting the tank
  double q0 = 0.0;
};

struct CrmpParams {
  Vector tau;                    // [N_pro]
  Matrix gains;                  // [N_inj x N_pro], f_ij
  Vector q0;                     // [N_pro]
  std::optional<Vector> j_index;  // [N_pro]

  Index n_inj() const noexcept { return gains.rows(); }
  Index n_pro() const noexcept { return gains.cols(); }
};

struct CrmipParams {
  Matrix tau;                    // [N_inj x N_pro]
  Matrix gains;                  // [N_inj x N_pro]
  Matrix q0;                     // [N_inj x N_pro], q_ij(t0)
  std::optional<Matrix> j_index;  // [N_inj x N_pro]

  Index n_inj() const noexcept { return gains.rows(); }
  Index n_pro() const noexcept { return gains.cols(); }
};

/// Partials of every predicted sample q_j(t_n) with respect to the CRMP
/// parameters. Each producer depends only on its own tau_j, f_.j, q0_j, J_j,
/// so the cross-producer partials are zero and are not stored.
struct GradientBundle {
  Matrix d_tau;                 // [n x N_pro]   dq_j(t_n)/dtau_j
  std::vector<Matrix> d_gains;  // N_inj x [n x N_pro]   dq_j(t_n)/df_ij
  Matrix d_q0;                  // [n x N_pro]   dq_j(t_n)/dq0_j
  std::optional<Matrix> d_j;    // [n x N_pro]   dq_j(t_n)/dJ_j
};

/// Partials for CRMIP: entry [i](n, j) is dq_j(t_n)/d(theta_ij).
struct CrmipGradientBundle {
  std::vector<Matrix> d_tau;
  std::vector<Matrix> d_gains;
  std::vector<Matrix> d_q0;
  std::optional<std::vector<Matrix>> d_j;
};

struct CrmtGradients {
  Vector d_tau;
  Vector d_f;
  Vector d_q0;
};

/// Productivity-index drive for one step: J_j and the BHP change over it.
struct BhpTerm {
  double j_index = 0.0;
  double delta_pwf = 0.0;
};

/// One step of the producer recursion.
inline double crmp_step(double q_prev, double dt, double tau, std::span<const double> gains_col,
                        std::span<const double> inj_now, std::optional<BhpTerm> bhp = std::nullopt) {
  if (!(tau > 0.0)) throw NumericalError("time constant must be positive, got " + std::to_string(tau));
  if (!(dt > 0.0)) throw NumericalError("time step must be positive, got " + std::to_string(dt));
  if (gains_col.size() != inj_now.size()) throw DataError("gain/injection length mismatch");
  const double decay = std::exp(-dt / tau);
  double drive = 0.0;
  for (std::size_t i = 0; i < gains_col.size(); ++i) drive += gains_col[i] * inj_now[i];
  if (bhp) drive -= bhp->j_index * tau * bhp->delta_pwf / dt;
  return q_prev * decay + (1.0 - decay) * drive;
}

namespace detail {

inline void check_crmp_shapes(const CrmpParams& p, const RateSeries& s) {
  const Index np = p.gains.cols();
  if (p.gains.rows() != s.injection.cols()) {
    throw DataError("gain matrix has " + std::to_string(p.gains.rows()) + " injector rows, series has " +
                    std::to_string(s.injection.cols()) + " injectors");
  }
  if (p.tau.size() != np || p.q0.size() != np || (p.j_index && p.j_index->size() != np)) {
    throw DataError("CRMP parameter vectors do not match the producer count");
  }
  if (s.bhp && s.bhp->cols() != np) throw DataError("BHP columns do not match the producer count");
  for (Index j = 0; j < np; ++j) {
    if (!(p.tau[j] > 0.0)) throw NumericalError("tau[" + std::to_string(j) + "] must be positive");
  }
}

inline void check_crmip_shapes(const CrmipParams& p, const RateSeries& s) {
  const Index ni = p.gains.rows(), np = p.gains.cols();
  if (ni != s.injection.cols()) throw DataError("CRMIP injector count does not match the series");
  auto same = [&](const Matrix& m) { return m.rows() == ni && m.cols() == np; };
  if (!same(p.tau) || !same(p.q0) || (p.j_index && !same(*p.j_index))) {
    throw DataError("CRMIP parameter matrices must all be [N_inj x N_pro]");
  }
  if (s.bhp && s.bhp->cols() != np) throw DataError("BHP columns do not match the producer count");
  if ((p.tau.array() <= 0.0).any()) throw NumericalError("CRMIP tau entries must be positive");
}

inline bool uses_bhp(const RateSeries& s, bool has_j) { return has_j && s.bhp.has_value(); }

/// e^{-dt/tau}, recomputed only when dt changes between calls.
class DecayCache {
 public:
  explicit DecayCache(double tau) : tau_(tau) {}
  double operator()(double dt) {
    if (dt != dt_) {
      dt_ = dt;
      value_ = std::exp(-dt / tau_);
    }
    return value_;
  }

 private:
  double tau_;
  double dt_ = -1.0;
  double value_ = 0.0;
};

}  // namespace detail

/// Iterates the producer recursion over the series. Row 0 is q_start (params.q0
/// when absent).
inline Matrix crmp_predict(const CrmpParams& params, const RateSeries& series,
                           const std::optional<Vector>& q_start = std::nullopt) {
  detail::check_crmp_shapes(params, series);
  const Index n = series.n_steps(), ni = params.n_inj(), np = params.n_pro();
  const Vector& start = q_start ? *q_start : params.q0;
  if (start.size() != np) throw DataError("q_start length does not match the producer count");
  const bool bhp = detail::uses_bhp(series, params.j_index.has_value());

  Matrix q(n, np);
  if (n == 0) return q;
  q.row(0) = start.transpose();
  for (Index j = 0; j < np; ++j) {
    const double tau = params.tau[j];
    detail::DecayCache decay_of(tau);
    for (Index t = 1; t < n; ++t) {
      const double dt = series.times[t] - series.times[t - 1];
      const double decay = decay_of(dt);
      double drive = 0.0;
      for (Index i = 0; i < ni; ++i) drive += params.gains(i, j) * series.injection(t, i);
      if (bhp) drive -= (*params.j_index)[j] * tau * ((*series.bhp)(t, j) - (*series.bhp)(t - 1, j)) / dt;
      q(t, j) = q(t - 1, j) * decay + (1.0 - decay) * drive;
    }
  }
  return q;
}

/// The recursion unrolled in terms of q(t0): every step's drive is convolved
/// with the exponential kernel e^{-(t_n - t_k)/tau}. O(n^2); used as an
/// independent check on crmp_predict.
inline Matrix crmp_predict_closed_form(const CrmpParams& params, const RateSeries& series) {
  detail::check_crmp_shapes(params, series);
  const Index n = series.n_steps(), ni = params.n_inj(), np = params.n_pro();
  const bool bhp = detail::uses_bhp(series, params.j_index.has_value());
  const Vector& t = series.times;

  // drive(k, j) for k >= 1
  Matrix drive = Matrix::Zero(n, np);
  for (Index j = 0; j < np; ++j) {
    for (Index k = 1; k < n; ++k) {
      const double dt = t[k] - t[k - 1];
      double d = 0.0;
      for (Index i = 0; i < ni; ++i) d += params.gains(i, j) * series.injection(k, i);
      if (bhp) d -= (*params.j_index)[j] * params.tau[j] * ((*series.bhp)(k, j) - (*series.bhp)(k - 1, j)) / dt;
      drive(k, j) = d;
    }
  }

  Matrix q(n, np);
  for (Index j = 0; j < np; ++j) {
    const double tau = params.tau[j];
    for (Index m = 0; m < n; ++m) {
      double acc = params.q0[j] * std::exp(-(t[m] - t[0]) / tau);
      for (Index k = 1; k <= m; ++k) {
        const double dt = t[k] - t[k - 1];
        acc += std::exp(-(t[m] - t[k]) / tau) * (1.0 - std::exp(-dt / tau)) * drive(k, j);
      }
      q(m, j) = acc;
    }
  }
  return q;
}

/// Whole-field tank: one time constant, net injection (sum over injectors)
/// scaled by f_field, no BHP term.
inline Vector crmt_predict(const CrmtParams& params, const RateSeries& series) {
  if (!(params.tau > 0.0)) throw NumericalError("tank time constant must be positive");
  const Index n = series.n_steps();
  Vector q(n);
  if (n == 0) return q;
  q[0] = params.q0;
  detail::DecayCache decay_of(params.tau);
  for (Index t = 1; t < n; ++t) {
    const double dt = series.times[t] - series.times[t - 1];
    const double decay = decay_of(dt);
    const double net = series.injection.row(t).sum();
    q[t] = q[t - 1] * decay + (1.0 - decay) * params.f_field * net;
  }
  return q;
}

struct CrmipPrediction {
  std::vector<Matrix> per_pair;  // N_inj x [n x N_pro]: q_ij(t_n)
  Matrix totals;                 // [n x N_pro]: q_j(t_n) = sum_i q_ij(t_n)
};

/// Every injector-producer bundle runs its own recursion; producer rates are
/// the sum over bundles ending at that producer.
inline CrmipPrediction crmip_predict(const CrmipParams& params, const RateSeries& series) {
  detail::check_crmip_shapes(params, series);
  const Index n = series.n_steps(), ni = params.n_inj(), np = params.n_pro();
  const bool bhp = detail::uses_bhp(series, params.j_index.has_value());

  CrmipPrediction out;
  out.per_pair.assign(static_cast<std::size_t>(ni), Matrix::Zero(n, np));
  out.totals = Matrix::Zero(n, np);
  if (n == 0) return out;
  for (Index i = 0; i < ni; ++i) {
    Matrix& q = out.per_pair[static_cast<std::size_t>(i)];
    for (Index j = 0; j < np; ++j) {
      const double tau = params.tau(i, j);
      detail::DecayCache decay_of(tau);
      q(0, j) = params.q0(i, j);
      for (Index t = 1; t < n; ++t) {
        const double dt = series.times[t] - series.times[t - 1];
        const double decay = decay_of(dt);
        double drive = params.gains(i, j) * series.injection(t, i);
        if (bhp) drive -= (*params.j_index)(i, j) * tau * ((*series.bhp)(t, j) - (*series.bhp)(t - 1, j)) / dt;
        q(t, j) = q(t - 1, j) * decay + (1.0 - decay) * drive;
      }
    }
    out.totals += q;
  }
  return out;
}

/// Prediction together with forward-mode sensitivities. Each partial obeys its
/// own linear recursion obtained by differentiating the producer step.
inline std::pair<Matrix, GradientBundle> crmp_predict_with_gradients(const CrmpParams& params,
                                                                     const RateSeries& series) {
  detail::check_crmp_shapes(params, series);
  const Index n = series.n_steps(), ni = params.n_inj(), np = params.n_pro();
  const bool bhp = detail::uses_bhp(series, params.j_index.has_value());

  Matrix q(n, np);
  GradientBundle g;
  g.d_tau = Matrix::Zero(n, np);
  g.d_q0 = Matrix::Zero(n, np);
  g.d_gains.assign(static_cast<std::size_t>(ni), Matrix::Zero(n, np));
  if (params.j_index) g.d_j = Matrix::Zero(n, np);
  if (n == 0) return {q, g};

  for (Index j = 0; j < np; ++j) {
    const double tau = params.tau[j];
    const double jj = params.j_index ? (*params.j_index)[j] : 0.0;
    detail::DecayCache decay_of(tau);
    q(0, j) = params.q0[j];
    g.d_q0(0, j) = 1.0;
    for (Index t = 1; t < n; ++t) {
      const double dt = series.times[t] - series.times[t - 1];
      const double decay = decay_of(dt);
      const double ddecay = decay * dt / (tau * tau);  // d(decay)/dtau
      const double rise = 1.0 - decay;
      double drive = 0.0;
      for (Index i = 0; i < ni; ++i) drive += params.gains(i, j) * series.injection(t, i);
      double slope = 0.0;  // dp/dt over the step
      if (bhp) {
        slope = ((*series.bhp)(t, j) - (*series.bhp)(t - 1, j)) / dt;
        drive -= jj * tau * slope;
      }
      const double prev = q(t - 1, j);
      q(t, j) = prev * decay + rise * drive;

      g.d_tau(t, j) = g.d_tau(t - 1, j) * decay + prev * ddecay - ddecay * drive - rise * jj * slope;
      g.d_q0(t, j) = g.d_q0(t - 1, j) * decay;
      for (Index i = 0; i < ni; ++i) {
        Matrix& dg = g.d_gains[static_cast<std::size_t>(i)];
        dg(t, j) = dg(t - 1, j) * decay + rise * series.injection(t, i);
      }
      if (g.d_j) {
        (*g.d_j)(t, j) = (*g.d_j)(t - 1, j) * decay - (bhp ? rise * tau * slope : 0.0);
      }
    }
  }
  return {q, g};
}

inline GradientBundle crmp_gradients(const CrmpParams& params, const RateSeries& series) {
  return crmp_predict_with_gradients(params, series).second;
}

inline std::pair<CrmipPrediction, CrmipGradientBundle> crmip_predict_with_gradients(
    const CrmipParams& params, const RateSeries& series) {
  detail::check_crmip_shapes(params, series);
  const Index n = series.n_steps(), ni = params.n_inj(), np = params.n_pro();
  const bool bhp = detail::uses_bhp(series, params.j_index.has_value());
  const auto uni = static_cast<std::size_t>(ni);

  CrmipPrediction pred;
  pred.per_pair.assign(uni, Matrix::Zero(n, np));
  pred.totals = Matrix::Zero(n, np);
  CrmipGradientBundle g;
  g.d_tau.assign(uni, Matrix::Zero(n, np));
  g.d_gains.assign(uni, Matrix::Zero(n, np));
  g.d_q0.assign(uni, Matrix::Zero(n, np));
  if (params.j_index) g.d_j = std::vector<Matrix>(uni, Matrix::Zero(n, np));
  if (n == 0) return {pred, g};

  for (std::size_t ui = 0; ui < uni; ++ui) {
    const auto i = static_cast<Index>(ui);
    Matrix& q = pred.per_pair[ui];
    for (Index j = 0; j < np; ++j) {
      const double tau = params.tau(i, j);
      const double jj = params.j_index ? (*params.j_index)(i, j) : 0.0;
      detail::DecayCache decay_of(tau);
      q(0, j) = params.q0(i, j);
      g.d_q0[ui](0, j) = 1.0;
      for (Index t = 1; t < n; ++t) {
        const double dt = series.times[t] - series.times[t - 1];
        const double decay = decay_of(dt);
        const double ddecay = decay * dt / (tau * tau);
        const double rise = 1.0 - decay;
        double drive = params.gains(i, j) * series.injection(t, i);
        double slope = 0.0;
        if (bhp) {
          slope = ((*series.bhp)(t, j) - (*series.bhp)(t - 1, j)) / dt;
          drive -= jj * tau * slope;
        }
        const double prev = q(t - 1, j);
        q(t, j) = prev * decay + rise * drive;
        g.d_tau[ui](t, j) = g.d_tau[ui](t - 1, j) * decay + prev * ddecay - ddecay * drive - rise * jj * slope;
        g.d_q0[ui](t, j) = g.d_q0[ui](t - 1, j) * decay;
        g.d_gains[ui](t, j) = g.d_gains[ui](t - 1, j) * decay + rise * series.injection(t, i);
        if (g.d_j) (*g.d_j)[ui](t, j) = (*g.d_j)[ui](t - 1, j) * decay - (bhp ? rise * tau * slope : 0.0);
      }
    }
    pred.totals += q;
  }
  return {pred, g};
}

inline std::pair<Vector, CrmtGradients> crmt_predict_with_gradients(const CrmtParams& params,
                                                                    const RateSeries& series) {
  if (!(params.tau > 0.0)) throw NumericalError("tank time constant must be positive");
  const Index n = series.n_steps();
  Vector q(n);
  CrmtGradients g{Vector::Zero(n), Vector::Zero(n), Vector::Zero(n)};
  if (n == 0) return {q, g};
  q[0] = params.q0;
  g.d_q0[0] = 1.0;
  detail::DecayCache decay_of(params.tau);
  for (Index t = 1; t < n; ++t) {
    const double dt = series.times[t] - series.times[t - 1];
    const double decay = decay_of(dt);
    const double ddecay = decay * dt / (params.tau * params.tau);
    const double net = series.injection.row(t).sum();
    const double drive = params.f_field * net;
    q[t] = q[t - 1] * decay + (1.0 - decay) * drive;
    g.d_tau[t] = g.d_tau[t - 1] * decay + (q[t - 1] - drive) * ddecay;
    g.d_f[t] = g.d_f[t - 1] * decay + (1.0 - decay) * net;
    g.d_q0[t] = g.d_q0[t - 1] * decay;
  }
  return {q, g};
}

/// Predicts `future` as the continuation of `history`: the recursion is seeded
/// with the last history prediction, not with q0.
inline Matrix crmp_forecast(const CrmpParams& params, const RateSeries& history, const RateSeries& future) {
  const Matrix all = crmp_predict(params, concatenate(history, future));
  return all.bottomRows(future.n_steps());
}

/// Embeds CRMP parameters in CRMIP: tau tied across injectors, q0 (and J)
/// split evenly over the bundles of each producer.
inline CrmipParams crmip_from_crmp(const CrmpParams& p) {
  const Index ni = p.n_inj();
  CrmipParams out;
  out.tau = p.tau.transpose().replicate(ni, 1);
  out.gains = p.gains;
  out.q0 = (p.q0.transpose() / static_cast<double>(ni)).replicate(ni, 1);
  if (p.j_index) out.j_index = Matrix((p.j_index->transpose() / static_cast<double>(ni)).replicate(ni, 1));
  return out;
}

}  // namespace floodnet
