#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace floodnet;
using namespace floodnet::testing;

namespace {

// Long-double reference for one producer, written straight from the step
// formula with no shared code.
std::vector<long double> reference_producer(const CrmpParams& p, const RateSeries& s, Index j) {
  const Index n = s.n_steps();
  std::vector<long double> q(static_cast<std::size_t>(n));
  q[0] = p.q0[j];
  const bool bhp = p.j_index && s.bhp;
  for (Index t = 1; t < n; ++t) {
    const long double dt = static_cast<long double>(s.times[t]) - s.times[t - 1];
    const long double tau = p.tau[j];
    const long double d = std::exp(-dt / tau);
    long double drive = 0.0L;
    for (Index i = 0; i < p.n_inj(); ++i) drive += static_cast<long double>(p.gains(i, j)) * s.injection(t, i);
    if (bhp) {
      const long double dp = static_cast<long double>((*s.bhp)(t, j)) - (*s.bhp)(t - 1, j);
      drive -= static_cast<long double>((*p.j_index)[j]) * tau * dp / dt;
    }
    q[static_cast<std::size_t>(t)] = q[static_cast<std::size_t>(t - 1)] * d + (1.0L - d) * drive;
  }
  return q;
}

RateSeries constant_injection(Index ni, Index n, double rate, double dt = 1.0) {
  RateSeries s;
  s.times = Vector::LinSpaced(n, 0.0, dt * static_cast<double>(n - 1));
  s.injection = Matrix::Constant(n, ni, rate);
  return s;
}

}  // namespace

TEST(CrmpStep, ZeroInputGivesZero) {
  const std::vector<double> g{0.0, 0.0}, inj{300.0, 400.0};
  EXPECT_EQ(crmp_step(0.0, 1.0, 2.0, g, inj), 0.0);
}

TEST(CrmpStep, SteadyStateLimit) {
  const std::vector<double> g{1.0}, inj{500.0};
  EXPECT_NEAR(crmp_step(0.0, 100.0, 0.1, g, inj), 500.0, 500.0 * 1e-12);
}

TEST(CrmpStep, MatchesScalarOracle) {
  const std::vector<double> g{0.5, 0.5}, inj{200.0, 100.0};
  const long double d = std::exp(-0.5L);
  const long double expected = 100.0L * d + (1.0L - d) * 150.0L;
  EXPECT_NEAR(crmp_step(100.0, 1.0, 2.0, g, inj), static_cast<double>(expected), 1e-12 * 100.0);
}

TEST(CrmpStep, BhpTermAndErrors) {
  const std::vector<double> g{1.0}, inj{100.0};
  const double d = std::exp(-0.5);
  const double expected = 10.0 * d + (1.0 - d) * (100.0 - 3.0 * 2.0 * (-4.0) / 1.0);
  EXPECT_NEAR(crmp_step(10.0, 1.0, 2.0, g, inj, BhpTerm{3.0, -4.0}), expected, 1e-12);
  EXPECT_THROW(crmp_step(0.0, 1.0, 0.0, g, inj), NumericalError);
  EXPECT_THROW(crmp_step(0.0, 0.0, 1.0, g, inj), NumericalError);
  EXPECT_THROW(crmp_step(0.0, -1.0, 1.0, g, inj), NumericalError);
}

TEST(CrmpPredict, MatchesLongDoubleReference) {
  Rng rng(11);
  for (int c = 0; c < 20; ++c) {
    const bool bhp = c % 2 == 1;
    const RateSeries s = random_series(rng, 3, 2, 30, bhp);
    const CrmpParams p = random_crmp(rng, 3, 2, bhp);
    const Matrix q = crmp_predict(p, s);
    for (Index j = 0; j < 2; ++j) {
      const auto ref = reference_producer(p, s, j);
      for (Index t = 0; t < s.n_steps(); ++t) {
        const double r = static_cast<double>(ref[static_cast<std::size_t>(t)]);
        EXPECT_NEAR(q(t, j), r, 1e-11 * std::max(1.0, std::abs(r)));
      }
    }
  }
}

TEST(CrmpPredict, ConstantInjectionReachesSteadyState) {
  CrmpParams p;
  p.tau = Vector{{2.0, 5.0}};
  p.gains = Matrix{{0.3, 0.7}, {0.6, 0.4}};
  p.q0 = Vector{{0.0, 900.0}};
  const Matrix q = crmp_predict(p, constant_injection(2, 400, 250.0));
  EXPECT_NEAR(q(399, 0), 0.9 * 250.0, 1e-9);
  EXPECT_NEAR(q(399, 1), 1.1 * 250.0, 1e-9);
}

TEST(CrmpPredict, ZeroInjectionDecaysByExpMinusOne) {
  CrmpParams p;
  p.tau = Vector{{1.0, 1.0}};
  p.gains = Matrix::Zero(1, 2);
  p.q0 = Vector{{10.0, 20.0}};
  RateSeries s = constant_injection(1, 4, 0.0);
  const Matrix q = crmp_predict(p, s);
  const double e = std::exp(-1.0);
  for (Index t = 1; t < 4; ++t) {
    EXPECT_NEAR(q(t, 0), q(t - 1, 0) * e, 1e-14);
    EXPECT_NEAR(q(t, 1), q(t - 1, 1) * e, 1e-14);
  }
  EXPECT_NEAR(q(3, 0), 10.0 * std::exp(-3.0), 1e-13);
}

TEST(CrmpPredict, QStartOverridesQ0) {
  Rng rng(2);
  const RateSeries s = random_series(rng, 2, 2, 10, false);
  const CrmpParams p = random_crmp(rng, 2, 2, false);
  const Vector start{{7.0, 8.0}};
  const Matrix q = crmp_predict(p, s, start);
  EXPECT_EQ(q(0, 0), 7.0);
  EXPECT_EQ(q(0, 1), 8.0);
  EXPECT_THROW(crmp_predict(p, s, Vector{{1.0}}), DataError);
}

TEST(CrmpPredict, ShapeMismatchRejected) {
  Rng rng(5);
  const RateSeries s = random_series(rng, 3, 2, 10, false);
  CrmpParams p = random_crmp(rng, 2, 2, false);
  EXPECT_THROW(crmp_predict(p, s), DataError);
  p = random_crmp(rng, 3, 2, false);
  p.tau = Vector{{1.0}};
  EXPECT_THROW(crmp_predict(p, s), DataError);
}

TEST(CrmpPredict, BhpIgnoredWithoutBhpColumns) {
  Rng rng(8);
  const RateSeries s = random_series(rng, 2, 2, 15, false);
  CrmpParams p = random_crmp(rng, 2, 2, true);
  CrmpParams no_j = p;
  no_j.j_index.reset();
  EXPECT_EQ(crmp_predict(p, s), crmp_predict(no_j, s));
}

TEST(ClosedForm, SingleStepEqualsRecursion) {
  Rng rng(4);
  const RateSeries s = random_series(rng, 3, 2, 2, true);
  const CrmpParams p = random_crmp(rng, 3, 2, true);
  EXPECT_LE(rel_diff(crmp_predict_closed_form(p, s), crmp_predict(p, s)), 1e-14);
}

TEST(ClosedForm, MatchesRecursionOnRandomConfigurations) {
  Rng rng(12);
  for (int c = 0; c < 50; ++c) {
    const bool bhp = c % 2 == 0;
    const RateSeries s = random_series(rng, 5, 4, 60, bhp);
    const CrmpParams p = random_crmp(rng, 5, 4, bhp);
    EXPECT_LE(rel_diff(crmp_predict(p, s), crmp_predict_closed_form(p, s)), 1e-10) << "config " << c;
  }
}

TEST(ClosedForm, ZeroGainsIsPureDecay) {
  Rng rng(13);
  const RateSeries s = random_series(rng, 2, 3, 20, false);
  CrmpParams p = random_crmp(rng, 2, 3, false);
  p.gains.setZero();
  const Matrix q = crmp_predict_closed_form(p, s);
  for (Index t = 0; t < s.n_steps(); ++t)
    for (Index j = 0; j < 3; ++j)
      EXPECT_NEAR(q(t, j), p.q0[j] * std::exp(-(s.times[t] - s.times[0]) / p.tau[j]), 1e-12 * p.q0[j]);
}

TEST(CrmpProperties, PositivityWithoutBhp) {
  Rng rng(14);
  for (int c = 0; c < 20; ++c) {
    const RateSeries s = random_series(rng, 4, 3, 40, false);
    const CrmpParams p = random_crmp(rng, 4, 3, false);
    EXPECT_GE(crmp_predict(p, s).minCoeff(), 0.0);
  }
}

TEST(CrmpProperties, GeometricContractionUnderConstantInjection) {
  CrmpParams p;
  p.tau = Vector{{0.7, 3.0, 12.0}};
  p.gains = Matrix{{0.2, 0.5, 0.3}, {0.1, 0.1, 0.8}};
  p.q0 = Vector{{1000.0, 0.0, 40.0}};
  const RateSeries s = constant_injection(2, 50, 300.0, 0.5);
  const Matrix q = crmp_predict(p, s);
  for (Index j = 0; j < 3; ++j) {
    const double target = p.gains.col(j).sum() * 300.0;
    for (Index t = 0; t < 50; ++t) {
      const double bound = std::exp(-(s.times[t] - s.times[0]) / p.tau[j]) * std::abs(p.q0[j] - target);
      EXPECT_LE(std::abs(q(t, j) - target), bound * (1.0 + 1e-12) + 1e-12);
    }
  }
}

TEST(CrmpProperties, SuperpositionInInjection) {
  Rng rng(15);
  const RateSeries s1 = random_series(rng, 3, 2, 25, false);
  RateSeries s2 = s1, s12 = s1, s0 = s1;
  for (Index k = 0; k < s2.injection.size(); ++k) s2.injection.data()[k] = rng.uniform(0.0, 800.0);
  s12.injection = s1.injection + s2.injection;
  s0.injection.setZero();
  const CrmpParams p = random_crmp(rng, 3, 2, false);
  const Matrix base = crmp_predict(p, s0);
  const Matrix lhs = crmp_predict(p, s12) - base;
  const Matrix rhs = (crmp_predict(p, s1) - base) + (crmp_predict(p, s2) - base);
  EXPECT_LE(rel_diff(lhs, rhs), 1e-12);
}

TEST(Crmt, SteadyStateAndPureDecay) {
  RateSeries s = constant_injection(3, 300, 100.0);
  const Vector q = crmt_predict(CrmtParams{4.0, 1.0, 0.0}, s);
  EXPECT_NEAR(q[299], 300.0, 1e-9);
  const Vector d = crmt_predict(CrmtParams{4.0, 0.0, 50.0}, s);
  for (Index t = 0; t < 300; ++t) EXPECT_NEAR(d[t], 50.0 * std::exp(-static_cast<double>(t) / 4.0), 1e-12);
  EXPECT_THROW(crmt_predict(CrmtParams{0.0, 1.0, 0.0}, s), NumericalError);
}

TEST(Crmt, EqualsOneByOneCrmpOnNetInjection) {
  Rng rng(16);
  RateSeries s = random_series(rng, 4, 1, 50, false);
  const CrmtParams t{3.3, 0.8, 120.0};
  RateSeries net = s;
  net.injection = s.injection.rowwise().sum();
  CrmpParams p;
  p.tau = Vector{{t.tau}};
  p.gains = Matrix{{t.f_field}};
  p.q0 = Vector{{t.q0}};
  EXPECT_LE(rel_diff(crmt_predict(t, s), crmp_predict(p, net)), 1e-14);
}

TEST(Crmip, TiedTauReducesToCrmp) {
  Rng rng(17);
  for (int c = 0; c < 50; ++c) {
    const bool bhp = c % 2 == 1;
    const RateSeries s = random_series(rng, 5, 4, 60, bhp);
    const CrmpParams p = random_crmp(rng, 5, 4, bhp);
    EXPECT_LE(rel_diff(crmip_predict(crmip_from_crmp(p), s).totals, crmp_predict(p, s)), 1e-10) << "config " << c;
  }
}

TEST(Crmip, ZeroGainsAndQ0GiveZero) {
  Rng rng(18);
  const RateSeries s = random_series(rng, 3, 2, 20, false);
  CrmipParams p = random_crmip(rng, 3, 2, false);
  p.gains.setZero();
  p.q0.setZero();
  EXPECT_EQ(max_abs(crmip_predict(p, s).totals), 0.0);
}

TEST(Crmip, OneByOneIsCrmp) {
  Rng rng(19);
  const RateSeries s = random_series(rng, 1, 1, 30, true);
  const CrmipParams ip = random_crmip(rng, 1, 1, true);
  CrmpParams p;
  p.tau = ip.tau.col(0);
  p.gains = ip.gains;
  p.q0 = ip.q0.col(0);
  p.j_index = Vector(ip.j_index->col(0));
  EXPECT_EQ(crmip_predict(ip, s).totals, crmp_predict(p, s));
}

TEST(Crmip, TotalsAreSumOfPairs) {
  Rng rng(20);
  const RateSeries s = random_series(rng, 3, 2, 20, true);
  const auto pred = crmip_predict(random_crmip(rng, 3, 2, true), s);
  ASSERT_EQ(pred.per_pair.size(), 3u);
  Matrix sum = Matrix::Zero(20, 2);
  for (const auto& m : pred.per_pair) sum += m;
  EXPECT_LE(rel_diff(sum, pred.totals), 1e-14);
}

TEST(Gradients, Q0PartialIsDecayFromStart) {
  Rng rng(21);
  const RateSeries s = random_series(rng, 2, 3, 25, false);
  const CrmpParams p = random_crmp(rng, 2, 3, false);
  const GradientBundle g = crmp_gradients(p, s);
  for (Index t = 0; t < s.n_steps(); ++t)
    for (Index j = 0; j < 3; ++j)
      EXPECT_NEAR(g.d_q0(t, j), std::exp(-(s.times[t] - s.times[0]) / p.tau[j]), 1e-13);
}

TEST(Gradients, ZeroInjectionHasZeroGainPartials) {
  Rng rng(22);
  RateSeries s = random_series(rng, 3, 2, 20, false);
  s.injection.setZero();
  const GradientBundle g = crmp_gradients(random_crmp(rng, 3, 2, false), s);
  for (const auto& m : g.d_gains) EXPECT_EQ(max_abs(m), 0.0);
}

TEST(Gradients, CrmpMatchesFiniteDifferences) {
  Rng rng(23);
  for (int c = 0; c < 10; ++c) {
    const bool bhp = c % 2 == 0;
    const RateSeries s = random_series(rng, 3, 2, 40, bhp);
    EXPECT_LT(crmp_gradient_error(random_crmp(rng, 3, 2, bhp), s), 1e-6) << "config " << c;
  }
}

TEST(Gradients, CrmipMatchesFiniteDifferences) {
  Rng rng(24);
  const RateSeries s = random_series(rng, 2, 2, 30, true);
  const CrmipParams p = random_crmip(rng, 2, 2, true);
  const auto [pred, g] = crmip_predict_with_gradients(p, s);
  const double scale = std::max(1.0, max_abs(pred.totals));
  double worst = 0.0;
  for (Index i = 0; i < 2; ++i) {
    for (Index j = 0; j < 2; ++j) {
      const auto ui = static_cast<std::size_t>(i);
      auto fd = [&](auto field) {
        CrmipParams start = p;
        return central_difference(
            [&](double v) {
              CrmipParams x = p;
              field(x) = v;
              return Matrix(crmip_predict(x, s).totals.col(j));
            },
            field(start));
      };
      worst = std::max(worst, gradient_error(g.d_tau[ui].col(j), fd([&](CrmipParams& x) -> double& { return x.tau(i, j); }), scale));
      worst = std::max(worst, gradient_error(g.d_gains[ui].col(j), fd([&](CrmipParams& x) -> double& { return x.gains(i, j); }), scale));
      worst = std::max(worst, gradient_error(g.d_q0[ui].col(j), fd([&](CrmipParams& x) -> double& { return x.q0(i, j); }), scale));
      worst = std::max(worst, gradient_error((*g.d_j)[ui].col(j), fd([&](CrmipParams& x) -> double& { return (*x.j_index)(i, j); }), scale));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Gradients, CrmtMatchesFiniteDifferences) {
  Rng rng(25);
  const RateSeries s = random_series(rng, 3, 1, 40, false);
  const CrmtParams p{2.5, 0.7, 80.0};
  const auto [q, g] = crmt_predict_with_gradients(p, s);
  const double scale = max_abs(q);
  auto col = [&](auto set, double x0) {
    return central_difference(
        [&](double v) {
          CrmtParams x = p;
          set(x, v);
          return Matrix(crmt_predict(x, s));
        },
        x0);
  };
  EXPECT_LT(gradient_error(g.d_tau, col([](CrmtParams& x, double v) { x.tau = v; }, p.tau), scale), 1e-6);
  EXPECT_LT(gradient_error(g.d_f, col([](CrmtParams& x, double v) { x.f_field = v; }, p.f_field), scale), 1e-6);
  EXPECT_LT(gradient_error(g.d_q0, col([](CrmtParams& x, double v) { x.q0 = v; }, p.q0), scale), 1e-6);
}

TEST(Forecast, ContinuesFromTrainingSegment) {
  Rng rng(26);
  const RateSeries s = random_series(rng, 2, 2, 30, false);
  const CrmpParams p = random_crmp(rng, 2, 2, false);
  const auto [train, test] = split(s, TrainTestSplit{20});
  const Matrix full = crmp_predict(p, s);
  EXPECT_EQ(crmp_forecast(p, train, test), full.bottomRows(10));
}
