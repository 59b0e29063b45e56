#include "fairfront/data.hpp"
#include "fairfront/encoders.hpp"
#include "fairfront/frontier.hpp"
#include "fairfront/gbdt.hpp"
#include "fairfront/optimizer.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace fairfront;

namespace {

struct Problem
{
  Ensemble model;
  EncoderSet enc;
  MitigationData data;
};

Problem m1_problem(std::size_t n, std::size_t components, std::uint64_t seed)
{
  Problem p;
  const auto d = generate_m1(n, seed);
  GbdtParams gp;
  gp.rounds = 60;
  gp.early_stop_rounds = 0;
  p.model = train_gbdt(d.X, d.y, {}, gp);
  p.enc = tree_pca_encoders(p.model, d.X, components);
  p.data = { LinearFamily(p.model.predict_raw(d.X), p.enc.matrix(d.X, &p.model)), d.y, d.g, 2, {} };
  const auto raw = p.data.family.base_scores;
  for (Eigen::Index i = 0; i < raw.size(); ++i)
    p.data.teacher.push_back(sigmoid(raw[i]));
  return p;
}

ObjectiveBatch sample_batch(const MitigationData& d, std::size_t n, std::uint64_t seed, bool pooled)
{
  std::mt19937_64 rng(seed);
  const auto groups = d.group_index();
  std::vector<std::size_t> all(d.y.size());
  std::iota(all.begin(), all.end(), std::size_t{ 0 });
  ObjectiveBatch b;
  b.perf = detail::draw(rng, all, n);
  BiasBatch bb;
  bb.group0 = detail::draw(rng, groups[0], n);
  bb.group1 = detail::draw(rng, groups[1], n);
  if (pooled) {
    bb.pooled = detail::draw(rng, all, n);
    bb.kde = detail::draw(rng, all, n);
  }
  bb.seed = 3;
  b.bias = { bb };
  b.bias_weights = { 1.0 };
  return b;
}

SweepConfig small_config()
{
  SweepConfig c;
  c.n_omegas = 3;
  c.n_epochs = 3;
  c.n_batches = 4;
  c.n_perf = 128;
  c.n_bias = 128;
  c.learning_rate = 0.05;
  c.seed = 11;
  return c;
}

} // namespace

TEST(DistillLoss, Values)
{
  EXPECT_EQ(distill_loss(0.3, 0.3), 0.0);
  EXPECT_NEAR(distill_loss(1.0, 0.5), std::log(2.0), 1e-5);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(0, 1);
  for (int i = 0; i < 1000; ++i)
    EXPECT_GE(distill_loss(U(rng), U(rng)), 0.0);
  EXPECT_TRUE(std::isfinite(distill_loss(0.0, 1.0)));
}

TEST(PenalizedObjective, OriginEqualsBaseModel)
{
  auto p = m1_problem(600, 5, 1);
  const auto batch = sample_batch(p.data, 200, 2, false);
  BiasEstimatorSpec spec;
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(p.data.family.dim());
  const auto ov = penalized_objective(p.data, spec, zero, 0.4, 1.0, ObjectiveForm::penalized, LossKind::cross_entropy, batch);
  double ce = 0.0;
  for (auto i : batch.perf) {
    const double q = sigmoid(p.data.family.base_scores[static_cast<Eigen::Index>(i)]);
    ce -= p.data.y[i] ? std::log(q) : std::log(1 - q);
  }
  ce /= static_cast<double>(batch.perf.size());
  std::vector<double> u0, u1;
  for (auto i : batch.bias[0].group0)
    u0.push_back(sigmoid(p.data.family.base_scores[static_cast<Eigen::Index>(i)]));
  for (auto i : batch.bias[0].group1)
    u1.push_back(sigmoid(p.data.family.base_scores[static_cast<Eigen::Index>(i)]));
  const double b = estimate(spec, { u0, u1, {}, {} });
  EXPECT_NEAR(ov.value, 0.6 * ce + 0.4 * b, 1e-12);
}

TEST(PenalizedObjective, CalibrationSymmetryAtOrigin)
{
  // constant encoder only, f* = 0, balanced labels: the loss gradient vanishes
  const std::size_t n = 10;
  MitigationData d{ LinearFamily(Eigen::VectorXd::Zero(n), RowMatrix::Ones(n, 1)), {}, {}, 2, {} };
  for (std::size_t i = 0; i < n; ++i) {
    d.y.push_back(static_cast<int>(i % 2));
    d.g.push_back(static_cast<int>(i < 5));
  }
  const auto batch = full_batch(d);
  const auto ov = penalized_objective(d, BiasEstimatorSpec{}, Eigen::VectorXd::Zero(1), 0.0, 1.0,
                                      ObjectiveForm::penalized, LossKind::cross_entropy, batch);
  EXPECT_NEAR(ov.grad[0], 0.0, 1e-15);
}

TEST(PenalizedObjective, GradientMatchesFiniteDifferences)
{
  auto p = m1_problem(800, 44, 3);
  ASSERT_EQ(p.data.family.dim(), 45);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> N(0.0, 0.05);
  const std::vector<EstimatorVariant> variants{ EstimatorVariant::threshold_discrete_trapezoid,
                                                EstimatorVariant::energy, EstimatorVariant::invariant_mc };
  int probe = 0;
  for (auto form : { ObjectiveForm::penalized, ObjectiveForm::lagrangian })
    for (auto loss : { LossKind::cross_entropy, LossKind::distill })
      for (auto v : variants) {
        BiasEstimatorSpec spec;
        spec.variant = v;
        spec.unbiased_square = probe % 2 == 0;
        const auto batch = sample_batch(p.data, 150, static_cast<std::uint64_t>(probe), true);
        Eigen::VectorXd theta(45);
        for (auto& t : theta)
          t = N(rng);
        auto f = [&](const Eigen::VectorXd& th) {
          return penalized_objective(p.data, spec, th, 0.4, 2.5, form, loss, batch, false).value;
        };
        const auto ov = penalized_objective(p.data, spec, theta, 0.4, 2.5, form, loss, batch);
        EXPECT_LT(oracle::max_rel_err(ov.grad, oracle::central_diff(f, theta)), 1e-5)
          << to_string(v) << ' ' << to_string(form) << ' ' << to_string(loss);
        ++probe;
      }
}

TEST(Sweep, OmegaZeroDoesNotIncreaseLoss)
{
  double before = 0.0, after = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = m1_problem(800, 8, seed);
    SweepConfig c = small_config();
    c.omegas = { 0.0 };
    c.seed = seed;
    c.learning_rate = 0.02;
    const auto r = sgd_sweep(p.data, BiasEstimatorSpec{}, c);
    before += r.base_loss;
    after += r.trace.back().train_loss;
  }
  EXPECT_LE(after / 5, before / 5 + 1e-6);
}

TEST(Sweep, ZeroEpochsReturnsOrigin)
{
  auto p = m1_problem(300, 4, 1);
  SweepConfig c = small_config();
  c.n_epochs = 0;
  const auto r = sgd_sweep(p.data, BiasEstimatorSpec{}, c);
  EXPECT_TRUE(r.trace.empty());
  ASSERT_EQ(r.candidates.size(), 3u);
  for (const auto& cand : r.candidates)
    EXPECT_EQ(cand.theta.norm(), 0.0);
}

TEST(Sweep, EmptyGroupRejectedBeforeAnyStep)
{
  auto p = m1_problem(300, 4, 1);
  for (auto& v : p.data.g)
    v = 0;
  EXPECT_THROW(sgd_sweep(p.data, BiasEstimatorSpec{}, small_config()), std::invalid_argument);
}

TEST(Sweep, SnapshotsRespectBoxAndMask)
{
  auto p = m1_problem(500, 6, 2);
  p.data.family.theta_lo.setConstant(-0.02);
  p.data.family.theta_hi.setConstant(0.03);
  SweepConfig c = small_config();
  c.learning_rate = 1.0;
  c.fixed_mask.assign(7, 0);
  c.fixed_mask[2] = 1;
  const auto r = sgd_sweep(p.data, BiasEstimatorSpec{}, c);
  ASSERT_EQ(r.trace.size(), 9u);
  for (const auto& row : r.trace) {
    EXPECT_EQ(row.theta[2], 0.0);
    for (Eigen::Index k = 0; k < row.theta.size(); ++k) {
      EXPECT_GE(row.theta[k], -0.02);
      EXPECT_LE(row.theta[k], 0.03);
    }
  }
  c.fixed_mask.resize(3);
  EXPECT_THROW(sgd_sweep(p.data, BiasEstimatorSpec{}, c), std::invalid_argument);
}

TEST(Sweep, ReproducibleTrace)
{
  auto p = m1_problem(500, 6, 5);
  const auto a = sgd_sweep(p.data, BiasEstimatorSpec{}, small_config());
  const auto b = sgd_sweep(p.data, BiasEstimatorSpec{}, small_config());
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t k = 0; k < a.trace.size(); ++k) {
    EXPECT_TRUE(a.trace[k].theta == b.trace[k].theta);
    EXPECT_EQ(a.trace[k].train_loss, b.trace[k].train_loss);
  }
  auto c = small_config();
  c.seed = 12;
  const auto d = sgd_sweep(p.data, BiasEstimatorSpec{}, c);
  EXPECT_FALSE(d.trace.back().theta == a.trace.back().theta);
}

TEST(Sweep, ConfigValidationAndGrid)
{
  SweepConfig c;
  EXPECT_EQ(c.omega_grid(3.0).size(), 21u);
  EXPECT_DOUBLE_EQ(c.omega_grid(3.0).back(), 1.0);
  c.form = ObjectiveForm::lagrangian;
  EXPECT_DOUBLE_EQ(c.omega_grid(3.0).back(), 3.0);
  EXPECT_DOUBLE_EQ(c.omega_grid(3.0)[1], 3.0 / 20);
  c.omegas = { 0.2, 0.1 };
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.omegas = { 0.1 };
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Sweep, PrecomputeOnce)
{
  const auto d = generate_m1(600, 3);
  GbdtParams gp;
  gp.rounds = 20;
  gp.early_stop_rounds = 0;
  const auto model = train_gbdt(d.X, d.y, {}, gp);
  const auto enc = tree_pca_encoders(model, d.X, 5);
  const std::size_t before = enc.evaluations;
  MitigationData md{ LinearFamily(model.predict_raw(d.X), enc.matrix(d.X, &model)), d.y, d.g, 2, {} };
  EXPECT_EQ(enc.evaluations, before + 1);
  // the inner loop only sees the cached matrices; the encoders are not touched again
  sgd_sweep(md, BiasEstimatorSpec{}, small_config());
  EXPECT_EQ(enc.evaluations, before + 1);
}

TEST(Sweep, LargestOmegaHalvesTrainBias)
{
  auto p = m1_problem(2000, 12, 7);
  SweepConfig c;
  c.n_omegas = 5;
  c.n_epochs = 10;
  c.learning_rate = 0.05;
  c.n_perf = c.n_bias = 512;
  c.scale = OmegaScale::loss_bias_ratio;
  const auto r = sgd_sweep(p.data, BiasEstimatorSpec{}, c);
  std::vector<Candidate> last;
  for (const auto& cand : r.candidates)
    if (cand.omega == r.omegas.back())
      last.push_back(cand);
  const auto pts = evaluate(last, p.data.family, p.data.y, p.data.g, 2, "tree-pca", "train");
  const auto base = evaluate({ Candidate{ 0, 0, Eigen::VectorXd::Zero(p.data.family.dim()) } }, p.data.family,
                             p.data.y, p.data.g, 2, "base", "train");
  double best = INFINITY;
  for (const auto& pt : pts)
    best = std::min(best, pt.m.w1);
  EXPECT_LE(best, 0.5 * base[0].m.w1);
}

TEST(Trace, CsvLayout)
{
  std::vector<TraceRow> rows{ { 0.5, 1, Eigen::Vector2d(0.1, -2.0), 0.25, 0.125 } };
  const auto path = (std::filesystem::temp_directory_path() / "fairfront_trace.csv").string();
  write_trace_csv(rows, 2, path);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "omega,epoch,theta_0,theta_1,train_loss,train_bias_estimate\n"
                      "0.5,1,0.10000000000000001,-2,0.25,0.125\n");
}
