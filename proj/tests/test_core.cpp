#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace floodnet;
using floodnet::testing::random_series;

namespace {

RateSeries three_step() {
  RateSeries s;
  s.times = Vector{{0.0, 1.0, 2.0}};
  s.injection = Matrix{{100.0, 200.0}, {110.0, 190.0}, {120.0, 180.0}};
  s.production = Matrix{{50.0}, {60.0}, {70.0}};
  return s;
}

RateSeries ten_step() {
  Rng rng(3);
  RateSeries s = random_series(rng, 2, 3, 10, true);
  Matrix prod(10, 3);
  for (Index k = 0; k < prod.size(); ++k) prod.data()[k] = rng.uniform(0.0, 500.0);
  s.production = prod;
  return s;
}

}  // namespace

TEST(WellField, RejectsEmptyAndDuplicateNames) {
  EXPECT_THROW(WellField({}, {"P1"}), DataError);
  EXPECT_THROW(WellField({"I1"}, {}), DataError);
  EXPECT_THROW(WellField({"I1", "I1"}, {"P1"}), DataError);
  EXPECT_THROW(WellField({"I1"}, {"P1", "P2", "P1"}), DataError);
  EXPECT_NO_THROW(WellField({"A"}, {"A"}));
}

TEST(WellField, NumberedNames) {
  const WellField f = WellField::numbered(2, 3);
  EXPECT_EQ(f.injectors(), (std::vector<std::string>{"I1", "I2"}));
  EXPECT_EQ(f.producers(), (std::vector<std::string>{"P1", "P2", "P3"}));
  EXPECT_EQ(f.n_inj(), 2);
  EXPECT_EQ(f.n_pro(), 3);
}

TEST(Validate, MatchingSeriesReturnedUnchanged) {
  const RateSeries s = three_step();
  EXPECT_EQ(validate(s, WellField::numbered(2, 1)), s);
}

TEST(Validate, NonMonotoneTimesReportIndex) {
  RateSeries s = three_step();
  s.times = Vector{{0.0, 1.0, 1.0}};
  try {
    validate(s, WellField::numbered(2, 1));
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.row(), 2);
    EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos) << e.what();
  }
}

TEST(Validate, NegativeInjectionReportsCell) {
  RateSeries s = three_step();
  s.injection(1, 0) = -5.0;
  try {
    validate(s, WellField::numbered(2, 1));
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.row(), 1);
    EXPECT_EQ(e.col(), 0);
    EXPECT_NE(std::string(e.what()).find("(row 1, col 0)"), std::string::npos) << e.what();
  }
}

TEST(Validate, DimensionMismatch) {
  const RateSeries s = three_step();
  EXPECT_THROW(validate(s, WellField::numbered(3, 1)), ValidationError);
  EXPECT_THROW(validate(s, WellField::numbered(2, 2)), ValidationError);
  RateSeries short_prod = s;
  short_prod.production = Matrix::Zero(2, 1);
  EXPECT_THROW(validate(short_prod, WellField::numbered(2, 1)), ValidationError);
}

TEST(Validate, NonFiniteValuesRejected) {
  RateSeries s = three_step();
  (*s.production)(2, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(validate(s, WellField::numbered(2, 1)), ValidationError);
  s = three_step();
  s.times[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(validate(s, WellField::numbered(2, 1)), ValidationError);
}

TEST(Validate, Idempotent) {
  const RateSeries s = ten_step();
  const WellField f = WellField::numbered(2, 3);
  const RateSeries once = validate(s, f);
  EXPECT_EQ(validate(once, f), once);
}

TEST(Split, LengthArithmetic) {
  const auto [a, b] = split(ten_step(), TrainTestSplit{7});
  EXPECT_EQ(a.n_steps(), 7);
  EXPECT_EQ(b.n_steps(), 3);
  EXPECT_TRUE(a.bhp.has_value());
  EXPECT_TRUE(b.production.has_value());
}

TEST(Split, BoundaryIndicesRejected) {
  const RateSeries s = ten_step();
  EXPECT_THROW(split(s, TrainTestSplit{0}), UsageError);
  EXPECT_THROW(split(s, TrainTestSplit{10}), UsageError);
  EXPECT_THROW(split(s, TrainTestSplit{-3}), UsageError);
}

TEST(Split, ConcatenateRoundTripIsExactForEveryIndex) {
  const RateSeries s = ten_step();
  for (Index k = 1; k < s.n_steps(); ++k) {
    const auto [a, b] = split(s, TrainTestSplit{k});
    EXPECT_EQ(concatenate(a, b), s) << "split index " << k;
  }
}

TEST(Slice, RowsAndBounds) {
  const RateSeries s = ten_step();
  const RateSeries m = slice(s, 2, 5);
  ASSERT_EQ(m.n_steps(), 5);
  EXPECT_EQ(m.times[0], s.times[2]);
  EXPECT_EQ(m.injection.row(4), s.injection.row(6));
  EXPECT_THROW(slice(s, 8, 5), UsageError);
}

TEST(TimeGrid, Nonuniformity) {
  EXPECT_EQ(time_grid_nonuniformity(Vector{{0.0, 1.0, 2.0, 3.0}}), 0.0);
  EXPECT_GT(time_grid_nonuniformity(Vector{{0.0, 1.0, 2.5}}), 0.1);
}

TEST(RngTest, DeterministicAndInRange) {
  Rng a(42), b(42);
  for (int k = 0; k < 1000; ++k) {
    const double u = a.uniform();
    EXPECT_EQ(u, b.uniform());
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const auto i = a.integer(3, 7);
    b.integer(3, 7);
    EXPECT_GE(i, 3);
    EXPECT_LE(i, 7);
  }
  Rng s0 = Rng::stream(1, 0), s1 = Rng::stream(1, 1);
  EXPECT_NE(s0.next_u64(), s1.next_u64());
}

TEST(RngTest, NormalMoments) {
  Rng r(9);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int k = 0; k < n; ++k) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.03);
  EXPECT_NEAR(sq / n, 1.0, 0.05);
}
