#include "fairfront/data.hpp"
#include "fairfront/encoders.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace fairfront;

namespace {

Ensemble small_model(std::size_t n = 600, int rounds = 12, std::uint64_t seed = 1)
{
  const auto d = generate_m1(n, seed);
  GbdtParams p;
  p.rounds = rounds;
  p.depth = 3;
  p.early_stop_rounds = 0;
  return train_gbdt(d.X, d.y, {}, p);
}

ModelFn raw_fn(const Ensemble& e)
{
  return [&e](std::span<const double> x) { return e.predict_raw(x); };
}

std::vector<double> row_of(const RowMatrix& X, Eigen::Index i)
{
  return { X.row(i).data(), X.row(i).data() + X.cols() };
}

} // namespace

TEST(Additive, ShapeAndIdentityBasis)
{
  RowMatrix X(4, 2);
  X << 1, 5, 2, 7, 3, 6, 4, 9;
  const auto set = additive_encoders(X, 1, Basis::monomial);
  const auto raw = set.raw(X, nullptr);
  EXPECT_TRUE(raw == X);
  const auto W = set.matrix(X, nullptr);
  EXPECT_EQ(W.cols(), 3);
  for (Eigen::Index i = 0; i < W.rows(); ++i)
    EXPECT_EQ(W(i, 0), 1.0);
  EXPECT_NEAR(W.col(1).mean(), 0.0, 1e-15);
  const double var = W.col(2).squaredNorm() / 3.0;
  EXPECT_NEAR(var, 1.0, 1e-12);
}

TEST(Additive, LegendreMapsRangeToUnitInterval)
{
  EXPECT_DOUBLE_EQ(legendre(2, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(legendre(3, -1.0), -1.0);
  EXPECT_NEAR(legendre(2, 0.3), 0.5 * (3 * 0.09 - 1), 1e-15);
  RowMatrix X(3, 1);
  X << 2, 4, 6;
  const auto raw = additive_encoders(X, 2, Basis::legendre).raw(X, nullptr);
  EXPECT_DOUBLE_EQ(raw(2, 0), 1.0);  // P1 at the top of the range
  EXPECT_DOUBLE_EQ(raw(2, 1), 1.0);  // P2(1)
  EXPECT_DOUBLE_EQ(raw(1, 1), -0.5); // P2(0)
  EXPECT_THROW(additive_encoders(X, 0, Basis::legendre), std::invalid_argument);
}

TEST(Additive, ConstantFeatureDropped)
{
  RowMatrix X(3, 2);
  X << 1, 3, 1, 4, 1, 5;
  const auto set = additive_encoders(X, 2, Basis::legendre);
  EXPECT_EQ(set.n_columns(), 2u);
  EXPECT_EQ(set.provenance[0].feature, 1);
}

TEST(Units, OriginalThetaGivesSameScores)
{
  const auto d = generate_m1(200, 3);
  const auto set = additive_encoders(d.X, 2, Basis::legendre);
  const auto W = set.matrix(d.X, nullptr), R = set.raw(d.X, nullptr);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> N(0, 1);
  Eigen::VectorXd theta(static_cast<Eigen::Index>(set.dim()));
  for (auto& v : theta)
    v = N(rng);
  const auto orig = set.to_original_units(theta);
  for (Eigen::Index i = 0; i < W.rows(); ++i) {
    const double a = W.row(i).dot(theta);
    const double b = orig[0] + R.row(i).dot(orig.tail(orig.size() - 1));
    EXPECT_NEAR(a, b, 1e-10);
  }
  EXPECT_NEAR((set.from_original_units(orig) - theta).norm(), 0.0, 1e-10);
}

TEST(TreePca, SingleTreeComponentIsCentredOutput)
{
  const auto e = small_model(400, 1);
  const auto d = generate_m1(300, 9);
  const auto set = tree_pca_encoders(e, d.X, 1);
  const auto raw = set.raw(d.X, &e);
  const auto T = e.per_tree_outputs(d.X);
  const double mean = T.col(0).mean();
  ASSERT_EQ(std::get<TreePcaBlock>(set.blocks[0]).loadings(0, 0), 1.0);
  for (Eigen::Index i = 0; i < raw.rows(); ++i)
    EXPECT_NEAR(raw(i, 0), T(i, 0) - mean, 1e-15);
}

TEST(TreePca, ZeroComponentsAndErrors)
{
  const auto e = small_model();
  const auto d = generate_m1(100, 2);
  const auto set = tree_pca_encoders(e, d.X, 0);
  EXPECT_EQ(set.dim(), 1u);
  const auto W = set.matrix(d.X, &e);
  EXPECT_EQ(W.cols(), 1);
  EXPECT_THROW(tree_pca_encoders(e, d.X, e.n_trees() + 1), std::invalid_argument);
  EXPECT_THROW(tree_pca_encoders(Ensemble{}, d.X, 0), std::invalid_argument);
}

TEST(TreePca, ComponentsOrthogonalAndSignFixed)
{
  const auto e = small_model(800, 25);
  const auto d = generate_m1(500, 4);
  const auto set = tree_pca_encoders(e, d.X, 10);
  const auto W = set.matrix(d.X, &e);
  for (Eigen::Index a = 1; a < W.cols(); ++a)
    for (Eigen::Index b = a + 1; b < W.cols(); ++b)
      EXPECT_LT(std::abs(W.col(a).dot(W.col(b))) / (W.col(a).norm() * W.col(b).norm()), 1e-8);
  const auto& p = std::get<TreePcaBlock>(set.blocks[0]);
  for (Eigen::Index k = 0; k < p.loadings.cols(); ++k) {
    Eigen::Index arg;
    p.loadings.col(k).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(p.loadings(arg, k), 0.0);
    EXPECT_NEAR(p.loadings.col(k).norm(), 1.0, 1e-12);
  }
  for (std::size_t k = 1; k < p.eigenvalues.size(); ++k)
    EXPECT_GE(p.eigenvalues[k - 1], p.eigenvalues[k]);
}

TEST(TreePca, SubsampleCapStillProjectsAllRecords)
{
  const auto e = small_model(500, 8);
  const auto d = generate_m1(400, 5);
  const auto set = tree_pca_encoders(e, d.X, 3, { 100, 7 });
  const auto& p = std::get<TreePcaBlock>(set.blocks[0]);
  EXPECT_EQ(p.fitted_records, 100u);
  EXPECT_EQ(set.matrix(d.X, &e).rows(), 400);
}

TEST(Encoders, ReevaluationAndJsonRoundTripAreBitExact)
{
  const auto e = small_model();
  const auto d = generate_m1(300, 6);
  auto set = concat(additive_encoders(d.X, 2, Basis::legendre), tree_pca_encoders(e, d.X, 4));
  set = concat(set, shapley_encoders(e, d.X, sample_background(d.X, 32, 1)));
  const auto W1 = set.matrix(d.X, &e), W2 = set.matrix(d.X, &e);
  EXPECT_TRUE(W1 == W2);
  const auto back = encoder_set_from_json(nlohmann::json::parse(to_json(set).dump()));
  EXPECT_TRUE(back.matrix(d.X, &e) == W1);
  EXPECT_EQ(back.names, set.names);
}

TEST(Shapley, AdditiveModelAndEfficiency)
{
  RowMatrix bg(3, 2);
  bg << 0, 1, 2, 5, 4, 0;
  const ModelFn f = [](std::span<const double> x) { return x[0] + x[1]; };
  const std::vector<double> x{ 3.0, -1.0 };
  const auto phi = shapley_values(f, x, bg);
  EXPECT_NEAR(phi[0], 3.0 - 2.0, 1e-12);
  EXPECT_NEAR(phi[1], -1.0 - 2.0, 1e-12);
}

TEST(Shapley, ProductGameHandValue)
{
  RowMatrix bg(2, 2);
  bg << 0, 0, 1, 1;
  const ModelFn f = [](std::span<const double> x) { return x[0] * x[1]; };
  const auto phi = shapley_values(f, std::vector<double>{ 1.0, 1.0 }, bg);
  EXPECT_NEAR(phi[0], 0.25, 1e-15);
  EXPECT_NEAR(phi[1], 0.25, 1e-15);
}

TEST(Shapley, TooManyFeaturesDirectsToSampling)
{
  RowMatrix bg = RowMatrix::Zero(1, 17);
  const ModelFn f = [](std::span<const double>) { return 0.0; };
  try {
    shapley_values(f, std::vector<double>(17, 0.0), bg);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("shapley_values_mc"), std::string::npos);
  }
  EXPECT_THROW(shapley_values(f, std::vector<double>(2, 0.0), RowMatrix(0, 2)), std::invalid_argument);
}

TEST(Shapley, TreeAlgorithmMatchesBruteForce)
{
  const auto e = small_model(500, 6, 3);
  const auto d = generate_m1(40, 8);
  const auto bg = sample_background(d.X, 13, 2);
  const auto fast = tree_shapley_values(e, d.X, bg);
  const auto f = raw_fn(e);
  double mean_bg = 0.0;
  for (Eigen::Index b = 0; b < bg.rows(); ++b)
    mean_bg += e.predict_raw(row_of(bg, b));
  mean_bg /= static_cast<double>(bg.rows());
  for (Eigen::Index i = 0; i < 10; ++i) {
    const auto x = row_of(d.X, i);
    const auto phi = shapley_values(f, x, bg);
    for (std::size_t k = 0; k < phi.size(); ++k)
      EXPECT_NEAR(fast(i, static_cast<Eigen::Index>(k)), phi[k], 1e-10);
    EXPECT_NEAR(fast.row(i).sum(), e.predict_raw(x) - mean_bg, 1e-10);
  }
}

TEST(Shapley, MonteCarloApproachesExact)
{
  const auto e = small_model(500, 6, 3);
  const auto d = generate_m1(5, 8);
  const auto bg = sample_background(d.X, 5, 2);
  const auto x = row_of(d.X, 0);
  const auto exact = shapley_values(raw_fn(e), x, bg);
  const auto mc = shapley_values_mc(raw_fn(e), x, bg, 20000, 3);
  for (std::size_t k = 0; k < exact.size(); ++k)
    EXPECT_NEAR(mc[k], exact[k], 0.03);
}

TEST(Shapley, NullPlayerColumnIsZero)
{
  // model trained without variation in feature 2 never splits on it
  auto d = generate_m1(500, 4);
  d.X.col(2).setConstant(1.0);
  GbdtParams p;
  p.rounds = 10;
  p.early_stop_rounds = 0;
  const auto e = train_gbdt(d.X, d.y, {}, p);
  auto q = generate_m1(100, 5);
  const auto set = shapley_encoders(e, q.X, sample_background(q.X, 20, 1));
  const auto raw = set.raw(q.X, &e);
  EXPECT_LE(raw.col(2).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Shapley, HeuristicRebalancingIsAdditive)
{
  const auto e = small_model(500, 8);
  const auto d = generate_m1(120, 6);
  const auto bg = sample_background(d.X, 24, 3);
  const auto set = shapley_encoders(e, d.X, bg);
  const auto raw = set.raw(d.X, &e);
  const auto W = set.matrix(d.X, &e);
  const Eigen::VectorXd base = e.predict_raw(d.X);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> U(-1, 2);
  for (int rep = 0; rep < 5; ++rep) {
    // theta_i on the centred attribution phi_i - c_i; theta_0 cancels in f - mean f
    Eigen::VectorXd t(static_cast<Eigen::Index>(set.n_columns()));
    for (auto& v : t)
      v = U(rng);
    Eigen::VectorXd theta(static_cast<Eigen::Index>(set.dim()));
    theta[0] = U(rng);
    for (Eigen::Index k = 0; k < t.size(); ++k)
      theta[k + 1] = t[k] * set.scale[static_cast<std::size_t>(k)];
    const Eigen::VectorXd f = base - W * theta;
    const double mean_f = f.mean();
    for (Eigen::Index i = 0; i < d.X.rows(); ++i) {
      double sum = 0.0;
      for (Eigen::Index k = 0; k < t.size(); ++k)
        sum += (1.0 - t[k]) * (raw(i, k) - set.center[static_cast<std::size_t>(k)]);
      EXPECT_NEAR(sum, f[i] - mean_f, 1e-8);
    }
  }
}

TEST(Reconstruct, IdentityAndLinearity)
{
  ExplanationSet base{ RowMatrix::Random(4, 3), 0.5 };
  std::vector<ExplanationSet> enc{ { RowMatrix::Random(4, 3), 0.1 }, { RowMatrix::Random(4, 3), -0.2 } };
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(2), a(2), b(2);
  a << 0.3, -1.2;
  b << 2.0, 0.7;
  EXPECT_TRUE(reconstruct_explanations(base, enc, zero).values == base.values);
  const auto ra = reconstruct_explanations(base, enc, a), rb = reconstruct_explanations(base, enc, b);
  const auto rab = reconstruct_explanations(base, enc, a + b);
  EXPECT_LT((rab.values - (ra.values + rb.values - base.values)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_THROW(reconstruct_explanations(base, enc, Eigen::VectorXd::Zero(3)), std::invalid_argument);
  std::vector<ExplanationSet> bad{ { RowMatrix::Random(3, 3), 0 }, { RowMatrix::Random(4, 3), 0 } };
  EXPECT_THROW(reconstruct_explanations(base, bad, a), std::invalid_argument);
}

TEST(Reconstruct, MatchesDirectShapleyOfPerturbedModel)
{
  const auto e = small_model(500, 6);
  const auto d = generate_m1(150, 7);
  const auto bg = sample_background(d.X, 9, 4);
  const auto set = concat(additive_encoders(d.X, 2, Basis::legendre), tree_pca_encoders(e, d.X, 3));
  const auto expl = explain_encoders(set, d.X, bg, &e);
  ASSERT_EQ(expl.size(), set.dim());
  const ExplanationSet base{ tree_shapley_values(e, d.X, bg), 0.0 };
  Eigen::VectorXd theta(static_cast<Eigen::Index>(set.dim()));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> N(0, 0.5);
  for (auto& v : theta)
    v = N(rng);
  const auto rec = reconstruct_explanations(base, expl, theta);
  const ModelFn f_theta = [&](std::span<const double> x) {
    RowMatrix one(1, static_cast<Eigen::Index>(x.size()));
    for (std::size_t k = 0; k < x.size(); ++k)
      one(0, static_cast<Eigen::Index>(k)) = x[k];
    return e.predict_raw(x) - set.matrix(one, &e).row(0).dot(theta);
  };
  for (Eigen::Index i = 0; i < 6; ++i) {
    const auto phi = shapley_values(f_theta, row_of(d.X, i), bg);
    for (std::size_t k = 0; k < phi.size(); ++k)
      EXPECT_NEAR(rec.values(i, static_cast<Eigen::Index>(k)), phi[k], 1e-8);
  }
}
