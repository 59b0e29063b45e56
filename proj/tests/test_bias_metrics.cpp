#include "fairfront/bias_metrics.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace fairfront;

namespace {

const CostFunction kAbs{ CostKind::abs };
const CostFunction kSq{ CostKind::square };

GroupedScores two(std::vector<double> a, std::vector<double> b)
{
  return GroupedScores({ std::move(a), std::move(b) }, { 0.5, 0.5 });
}

std::vector<double> atoms(std::mt19937_64& rng, int n, bool ties)
{
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::uniform_int_distribution<int> G(0, 8);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v)
    x = ties ? G(rng) / 8.0 : U(rng);
  return v;
}

} // namespace

TEST(GroupedScores, Validation)
{
  EXPECT_THROW(GroupedScores({ { 1.0 } }, { 1.0 }), std::invalid_argument);
  EXPECT_THROW(GroupedScores({ { 1.0 }, {} }, { 0.5, 0.5 }), std::invalid_argument);
  EXPECT_THROW(GroupedScores({ { 1.0 }, { 2.0 } }, { 0.5, 0.6 }), std::invalid_argument);
}

TEST(ClassifierBias, AcceptanceRateGap)
{
  // P(Z0 > 0.5) = 0.6, P(Z1 > 0.5) = 0.4
  auto g = two({ 0, 0, 0, 0, 1, 1, 1, 1, 1, 1 }, { 0, 0, 0, 0, 0, 0, 1, 1, 1, 1 });
  EXPECT_NEAR(classifier_bias(g, 0.5, kAbs), 0.2, 1e-15);
  auto same = two({ 0.2, 0.7 }, { 0.2, 0.7 });
  for (double t : { -1.0, 0.2, 0.5, 0.7, 3.0 })
    EXPECT_EQ(classifier_bias(same, t, kAbs), 0.0);
  EXPECT_EQ(classifier_bias(two({ 0 }, { 1 }), 0.5, kAbs), 1.0);
  GroupedScores three({ { 0 }, { 1 }, { 2 } }, { 0.4, 0.3, 0.3 });
  EXPECT_THROW(classifier_bias(three, 0.5, kAbs), std::invalid_argument);
}

TEST(ClassifierBias, AbsLogRatioUsesRates)
{
  auto g = two({ 0, 1 }, { 0, 0, 0, 1 });
  EXPECT_NEAR(classifier_bias(g, 0.5, CostFunction{ CostKind::abs_log_ratio }), std::log(2.0), 1e-14);
}

TEST(CostBias, PointMassesUniformThresholds)
{
  auto g = two({ 0.25 }, { 0.75 });
  EXPECT_NEAR(cost_bias(g, kAbs, ThresholdMeasure::uniform01()), 0.5, 1e-15);
  EXPECT_NEAR(cost_bias(g, kSq, ThresholdMeasure::uniform01()), 0.5, 1e-15);
  EXPECT_EQ(cost_bias(two({ 0.1, 0.4 }, { 0.1, 0.4 }), kAbs, ThresholdMeasure::uniform01()), 0.0);
}

TEST(CostBias, EqualsW1OnUnitInterval)
{
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 200; ++rep) {
    auto g = two(atoms(rng, 8, rep % 2 == 0), atoms(rng, 8, rep % 3 == 0));
    EXPECT_NEAR(cost_bias(g, kAbs, ThresholdMeasure::uniform01()),
                wasserstein1(g.group(0), g.group(1)), 1e-12);
  }
}

TEST(CostBias, FubiniOverThresholdAtoms)
{
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 100; ++rep) {
    auto g = two(atoms(rng, 7, true), atoms(rng, 5, false));
    auto tv = atoms(rng, 6, rep % 2 == 0);
    EmpiricalDistribution mu(tv);
    double direct = 0.0;
    for (std::size_t j = 0; j < mu.size(); ++j)
      direct += mu.weights()[j] * classifier_bias(g, mu.values()[j], kAbs);
    EXPECT_NEAR(direct, cost_bias(g, kAbs, ThresholdMeasure::empirical(mu)), 1e-15);
  }
}

TEST(CostBias, PooledMeasureIsProbabilityMixture)
{
  GroupedScores g({ { 0.0 }, { 1.0 } }, { 0.25, 0.75 });
  // F0 - F1 = 1 on [0, 1); pooled atom at 0 carries 0.25, at 1 the gap is 0.
  EXPECT_NEAR(cost_bias(g, kAbs, ThresholdMeasure::pooled_scores()), 0.25, 1e-15);
}

TEST(CostBias, TransportFormForGaussianGroups)
{
  std::mt19937_64 rng(1);
  std::normal_distribution<double> N(0.0, 1.0);
  const int m = 100000;
  std::vector<double> z0(m), z1(m), t(m);
  for (int i = 0; i < m; ++i) {
    z0[i] = N(rng);
    z1[i] = 0.7 + 1.3 * N(rng);
    t[i] = N(rng);
  }
  auto g = two(z0, z1);
  EmpiricalDistribution mu(t);
  const double lhs = cost_bias(g, kSq, ThresholdMeasure::empirical(mu));
  std::vector<double> push0(m), push1(m);
  for (int i = 0; i < m; ++i) {
    push0[i] = g.group(0).cdf(t[i]);
    push1[i] = g.group(1).cdf(t[i]);
  }
  const double rhs = transport_cost(EmpiricalDistribution(push0), EmpiricalDistribution(push1), kSq);
  EXPECT_NEAR(lhs, rhs, 2e-2);
}

TEST(InvariantBias, ExampleWithAtomAtZero)
{
  const int n = 5000;
  std::vector<double> z0(n, 0.0), z1(n);
  for (int i = 0; i < n; ++i)
    z1[i] = (i + 1.0) / n;
  auto g = two(z0, z1);
  const auto pooled = g.pooled();
  EXPECT_NEAR(invariant_bias(g, pooled), 0.75, 0.01);
  EXPECT_NEAR(invariant_bias_direct(g, pooled), invariant_bias(g, pooled), 1e-10);
  EXPECT_NEAR(detail::invariant_bias_right_continuous(g, pooled), 0.25, 0.01);
}

TEST(InvariantBias, IdenticalGroupsGiveZero)
{
  auto g = two({ 0.1, 0.1, 0.5 }, { 0.1, 0.1, 0.5 });
  EXPECT_NEAR(invariant_bias(g), 0.0, 1e-15);
}

TEST(InvariantBias, TwoPathsAgreeWithAtoms)
{
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 100; ++rep) {
    auto g = GroupedScores({ atoms(rng, 9, true), atoms(rng, 6, rep % 2 == 0) }, { 0.3, 0.7 });
    const auto pooled = g.pooled();
    EXPECT_NEAR(invariant_bias(g, pooled), invariant_bias_direct(g, pooled), 1e-10);
  }
}

TEST(InvariantBias, InvariantUnderMonotoneTransforms)
{
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    auto a = atoms(rng, 8, true), b = atoms(rng, 8, false);
    const double base = invariant_bias(two(a, b));
    for (auto tr : { +[](double t) { return t * t * t; }, +[](double t) { return 1.0 / (1.0 + std::exp(-t)); } }) {
      auto ta = a, tb = b;
      for (auto& v : ta)
        v = tr(v);
      for (auto& v : tb)
        v = tr(v);
      EXPECT_NEAR(invariant_bias(two(ta, tb)), base, 1e-12);
    }
  }
}

TEST(MultiAttributeBias, ReductionsAndPointMasses)
{
  auto g = two({ 0.1, 0.2 }, { 0.6 });
  const PairwiseMetric w1{};
  const double one = 1.0;
  EXPECT_NEAR(multi_attribute_bias(g, w1, { &one, 1 }), wasserstein1(g.group(0), g.group(1)), 1e-15);

  GroupedScores same({ { 0.3 }, { 0.3 }, { 0.3 } }, { 0.5, 0.25, 0.25 });
  const std::vector<double> w{ 0.5, 0.5 };
  EXPECT_EQ(multi_attribute_bias(same, w1, w), 0.0);

  GroupedScores three({ { 0.0 }, { 1.0 }, { 2.0 } }, { 0.4, 0.3, 0.3 });
  EXPECT_NEAR(multi_attribute_bias(three, w1, w), 1.5, 1e-15);

  const std::vector<double> bad{ 1.0 };
  EXPECT_THROW(multi_attribute_bias(three, w1, bad), std::invalid_argument);

  PairwiseMetric cb{ PairwiseMetric::Kind::cost_bias, kAbs, ThresholdMeasure::uniform01() };
  GroupedScores unit({ { 0.0 }, { 1.0 }, { 0.5 } }, { 0.4, 0.3, 0.3 });
  EXPECT_NEAR(multi_attribute_bias(unit, cb, w), 0.5 * 1.0 + 0.5 * 0.5, 1e-15);
}
