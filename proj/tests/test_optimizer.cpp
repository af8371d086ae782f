#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace floodnet;
using namespace floodnet::testing;

namespace {

// Table 4.2 gains, rows scaled to unit sums, on a 60-step stepped schedule.
struct Recovery {
  CrmpParams truth;
  RateSeries series;
  WellField field = WellField::numbered(5, 4);
};

Recovery reference_recovery(Index n_steps = 60) {
  ScenarioSpec spec = streak_preset(0, n_steps);
  spec.truth.gains = row_normalized(streak_reference_gains());
  return {spec.truth, generate(spec)};
}

RateSeries with_production(RateSeries s, const CrmpParams& truth) {
  s.production = crmp_predict(truth, s);
  return s;
}

FitConfig quick(int starts = 4) {
  FitConfig c;
  c.n_starts = starts;
  return c;
}

template <class P>
void expect_monotone(const FitReport<P>& r) {
  ASSERT_FALSE(r.loss_trajectory.empty());
  EXPECT_EQ(r.final_loss, r.loss_trajectory.back());
  for (std::size_t k = 1; k < r.loss_trajectory.size(); ++k) {
    EXPECT_LE(r.loss_trajectory[k], r.loss_trajectory[k - 1]) << "iteration " << k;
  }
}

void expect_feasible(const CrmpParams& p, GainConstraint mode) {
  EXPECT_GE(p.tau.minCoeff(), kTauMin);
  EXPECT_GE(p.gains.minCoeff(), 0.0);
  EXPECT_GE(p.q0.minCoeff(), 0.0);
  if (p.j_index) {
    EXPECT_GE(p.j_index->minCoeff(), 0.0);
  }
  EXPECT_LE(gain_row_residual(p.gains, mode), 1e-6);
}

}  // namespace

TEST(Loss, ZeroOnExactMatch) {
  Rng rng(1);
  Matrix obs(30, 3);
  for (Index k = 0; k < obs.size(); ++k) obs.data()[k] = rng.uniform(0.0, 100.0);
  EXPECT_EQ(loss(obs, obs), 0.0);
}

TEST(Loss, ConstantOffsetOracle) {
  Rng rng(2);
  Matrix obs(40, 3);
  for (Index k = 0; k < obs.size(); ++k) obs.data()[k] = rng.uniform(0.0, 100.0);
  const Vector c{{1.5, -3.0, 0.25}};
  Matrix pred = obs;
  for (Index j = 0; j < 3; ++j) pred.col(j).array() += c[j];
  double expected = 0.0;
  for (Index j = 0; j < 3; ++j) {
    const double mean = obs.col(j).mean();
    const double var = (obs.col(j).array() - mean).square().sum() / 40.0;
    expected += c[j] * c[j] / var;
  }
  expected /= 3.0;
  EXPECT_NEAR(loss(pred, obs), expected, 1e-12 * expected);
}

TEST(Loss, ScaleInvariant) {
  Rng rng(3);
  Matrix obs(25, 2), pred(25, 2);
  for (Index k = 0; k < obs.size(); ++k) {
    obs.data()[k] = rng.uniform(0.0, 100.0);
    pred.data()[k] = rng.uniform(0.0, 100.0);
  }
  const double base = loss(pred, obs);
  EXPECT_NEAR(loss(pred * 37.5, obs * 37.5), base, 1e-12 * base);
}

TEST(Loss, ZeroVarianceColumnFallsBackToMse) {
  Matrix obs(4, 2);
  obs << 5, 1, 5, 2, 5, 3, 5, 4;
  const LossWeights w = loss_weights(obs);
  ASSERT_EQ(w.degenerate_columns, std::vector<Index>{0});
  EXPECT_EQ(w.weight[0], 1.0);
  Matrix pred = obs;
  pred.col(0).array() += 2.0;
  EXPECT_NEAR(loss(pred, obs), 4.0 / 2.0, 1e-15);
  EXPECT_THROW(loss(pred, Matrix::Zero(3, 2)), DataError);
}

TEST(Projection, Examples) {
  EXPECT_EQ(project_simplex(Vector{{0.25, 0.25, 0.25, 0.25}}), (Vector{{0.25, 0.25, 0.25, 0.25}}));
  EXPECT_LE((project_simplex(Vector{{0.8, 0.8}}) - Vector{{0.5, 0.5}}).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(project_simplex(Vector{{2.0, 0.0}}), (Vector{{1.0, 0.0}}));
  EXPECT_EQ(check_projection(Vector{{0.8, 0.8}}, project_simplex(Vector{{0.8, 0.8}}), false), "");
  EXPECT_EQ(check_projection(Vector{{2.0, 0.0}}, project_simplex(Vector{{2.0, 0.0}}), false), "");
  EXPECT_EQ(project_capped_simplex(Vector{{0.2, -0.1}}), (Vector{{0.2, 0.0}}));
}

TEST(Projection, MatchesBruteForceOracle) {
  Rng rng(4);
  for (int k = 0; k < 150; ++k) {
    const Index n = 1 + k % 3;
    Vector v(n);
    for (Index i = 0; i < n; ++i) v[i] = rng.uniform(-1.0, 2.0);
    EXPECT_EQ(check_projection(v, project_simplex(v), false), "") << v.transpose();
    if (n <= 2) {
      EXPECT_EQ(check_projection(v, project_capped_simplex(v), true), "") << v.transpose();
    }
  }
}

TEST(Projection, Idempotent) {
  Rng rng(5);
  Matrix g(6, 4);
  for (Index k = 0; k < g.size(); ++k) g.data()[k] = rng.uniform(-1.0, 2.0);
  for (auto mode : {GainConstraint::equality, GainConstraint::inequality}) {
    const Matrix once = project_gain_rows(g, mode);
    EXPECT_LE(max_abs(project_gain_rows(once, mode) - once), 1e-15);
    EXPECT_LE(gain_row_residual(once, mode), 1e-12);
  }
}

TEST(FitCrmp, RecoversReferenceGains) {
  const Recovery r = reference_recovery();
  const auto rep = fit_crmp(r.series, r.field, FitConfig{});
  EXPECT_LT(max_abs(rep.params.gains - r.truth.gains), 0.05);
  EXPECT_LT(rep.final_loss, 1e-4);
  expect_monotone(rep);
  expect_feasible(rep.params, GainConstraint::equality);
  EXPECT_EQ(rep.start_losses.size(), 8u);
}

TEST(FitCrmp, InitAtTruthIsFixedPoint) {
  const Recovery r = reference_recovery();
  FitConfig c;
  c.n_starts = 1;
  const auto rep = fit_crmp(r.series, r.field, c, r.truth);
  EXPECT_LE(rep.iterations, 2);
  EXPECT_LE(rep.final_loss, 1e-20);
  EXPECT_LT(max_abs(rep.params.gains - r.truth.gains), 1e-9);
}

TEST(FitCrmp, SingleWellGainPinnedByEquality) {
  Rng rng(6);
  CrmpParams truth;
  truth.tau = Vector{{3.0}};
  truth.gains = Matrix{{1.0}};
  truth.q0 = Vector{{50.0}};
  const RateSeries s = with_production(random_series(rng, 1, 1, 50, false), truth);
  const auto rep = fit_crmp(s, WellField::numbered(1, 1), quick());
  EXPECT_EQ(rep.params.gains(0, 0), 1.0);
  EXPECT_NEAR(rep.params.tau[0], 3.0, 1e-6);
}

TEST(FitCrmp, InequalityModeKeepsRowsAtMostOne) {
  Rng rng(7);
  CrmpParams truth = random_crmp(rng, 3, 2, false);
  truth.gains *= 0.7;
  const RateSeries s = with_production(random_series(rng, 3, 2, 60, false), truth);
  FitConfig c = quick();
  c.gain_constraint = GainConstraint::inequality;
  const auto rep = fit_crmp(s, WellField::numbered(3, 2), c);
  expect_feasible(rep.params, GainConstraint::inequality);
  EXPECT_LT(max_abs(rep.params.gains - truth.gains), 0.02);
}

TEST(FitCrmp, FitsProductivityIndexWithBhp) {
  Rng rng(8);
  RateSeries s = random_series(rng, 3, 2, 80, true);
  CrmpParams truth = random_crmp(rng, 3, 2, false);
  truth.j_index = Vector{{0.8, 0.3}};
  s = with_production(s, truth);
  FitConfig c = quick();
  c.include_press = true;
  const auto rep = fit_crmp(s, WellField::numbered(3, 2), c);
  ASSERT_TRUE(rep.params.j_index.has_value());
  EXPECT_TRUE(rep.include_press);
  expect_feasible(rep.params, GainConstraint::equality);
  EXPECT_LT(rep.final_loss, 1e-8);
  EXPECT_LT(max_abs(*rep.params.j_index - *truth.j_index), 0.05);
}

TEST(FitCrmp, PressureFlagWithoutBhpColumnsFitsNoJ) {
  const Recovery r = reference_recovery();
  FitConfig c = quick(2);
  c.include_press = true;
  const auto rep = fit_crmp(r.series, r.field, c);
  EXPECT_FALSE(rep.params.j_index.has_value());
  EXPECT_FALSE(rep.include_press);
}

TEST(FitCrmp, DeterministicAndMoreStartsNeverWorse) {
  const ScenarioSpec spec = homogeneous_preset(1);
  const RateSeries s = split(generate(spec), TrainTestSplit{kDefaultSplit}).first;
  double prev = std::numeric_limits<double>::infinity();
  for (int n : {1, 2, 4, 8}) {
    const auto a = fit_crmp(s, spec.field, quick(n));
    const auto b = fit_crmp(s, spec.field, quick(n));
    EXPECT_EQ(a.final_loss, b.final_loss);
    EXPECT_EQ(a.params.gains, b.params.gains);
    EXPECT_EQ(a.loss_trajectory, b.loss_trajectory);
    EXPECT_EQ(a.start_index, b.start_index);
    EXPECT_LE(a.final_loss, prev) << n << " starts";
    prev = a.final_loss;
    expect_monotone(a);
    expect_feasible(a.params, GainConstraint::equality);
  }
}

TEST(FitCrmp, ConfigAndDataErrors) {
  const Recovery r = reference_recovery();
  FitConfig c;
  c.n_starts = 0;
  EXPECT_THROW(fit_crmp(r.series, r.field, c), UsageError);
  c = {};
  c.max_iters = 0;
  EXPECT_THROW(fit_crmp(r.series, r.field, c), UsageError);
  c = {};
  c.tol = 0.0;
  EXPECT_THROW(fit_crmp(r.series, r.field, c), UsageError);
  RateSeries no_prod = r.series;
  no_prod.production.reset();
  EXPECT_THROW(fit_crmp(no_prod, r.field, FitConfig{}), DataError);
  EXPECT_THROW(fit_crmp(r.series, WellField::numbered(4, 4), FitConfig{}), ValidationError);
}

TEST(FitCrmt, RecoversTankParameters) {
  Rng rng(9);
  RateSeries s = random_series(rng, 3, 1, 80, false, true);
  const CrmtParams truth{4.0, 0.85, 300.0};
  s.production = Matrix(crmt_predict(truth, s));
  FitConfig c = quick();
  c.gain_constraint = GainConstraint::inequality;
  const auto rep = fit_crmt(s, WellField::numbered(3, 1), c);
  EXPECT_NEAR(rep.params.tau, truth.tau, 0.1 * truth.tau);
  EXPECT_NEAR(rep.params.f_field, truth.f_field, 0.02);
  expect_monotone(rep);
}

TEST(FitCrmt, EqualityModePinsSupportFraction) {
  Rng rng(10);
  RateSeries s = random_series(rng, 2, 1, 50, false);
  s.production = Matrix(crmt_predict(CrmtParams{2.0, 1.0, 10.0}, s));
  const auto rep = fit_crmt(s, WellField::numbered(2, 1), quick());
  EXPECT_EQ(rep.params.f_field, 1.0);
  EXPECT_NEAR(rep.params.tau, 2.0, 1e-6);
}

TEST(FitCrmip, NoWorseThanCrmpOnSameData) {
  ScenarioSpec spec = streak_preset(2, 80);
  spec.noise_std = 0.02;
  const RateSeries s = generate(spec);
  const auto crmp = fit_crmp(s, spec.field, quick());
  const auto crmip = fit_crmip(s, spec.field, quick(), crmip_from_crmp(crmp.params));
  EXPECT_LE(crmip.final_loss, crmp.final_loss);
  EXPECT_LE(gain_row_residual(crmip.params.gains, GainConstraint::equality), 1e-6);
  EXPECT_GE(crmip.params.gains.minCoeff(), 0.0);
  EXPECT_GE(crmip.params.tau.minCoeff(), kTauMin);
  EXPECT_GE(crmip.params.q0.minCoeff(), 0.0);
  expect_monotone(crmip);
}

TEST(FitCrmip, RichClassFromRandomStartsToo) {
  ScenarioSpec spec = homogeneous_preset(0, 80);
  const RateSeries s = generate(spec);
  const auto crmp = fit_crmp(s, spec.field, FitConfig{});
  const auto crmip = fit_crmip(s, spec.field, FitConfig{});
  EXPECT_LE(crmip.final_loss, crmp.final_loss * (1.0 + 1e-9));
}

TEST(FitCrmip, OneByOneMatchesTank) {
  Rng rng(11);
  const RateSeries s = random_series(rng, 1, 1, 30, false);
  CrmipParams ip;
  ip.tau = Matrix{{2.2}};
  ip.gains = Matrix{{0.9}};
  ip.q0 = Matrix{{40.0}};
  const Matrix a = crmip_predict(ip, s).totals;
  const Vector b = crmt_predict(CrmtParams{2.2, 0.9, 40.0}, s);
  EXPECT_LE(rel_diff(a, b), 1e-14);
}
