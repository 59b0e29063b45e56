#include "fairfront/data.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace fairfront;

namespace {

struct Moments
{
  double mean{ 0 }, var{ 0 };
};

Moments column_moments(const Dataset& d, int col, int group)
{
  std::vector<double> v;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.g[i] == group)
      v.push_back(d.X(static_cast<Eigen::Index>(i), col));
  Moments m;
  for (double x : v)
    m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v)
    m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(v.size() - 1);
  return m;
}

std::string tmp_path(const std::string& name)
{
  auto dir = std::filesystem::temp_directory_path() / "fairfront_test_data";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

void write_text(const std::string& path, const std::string& text)
{
  std::ofstream(path) << text;
}

} // namespace

TEST(Generators, M1Moments)
{
  const auto d = generate_m1(20000, 7);
  EXPECT_EQ(d.size(), 20000u);
  EXPECT_NEAR(d.group_probs()[1], 0.5, 0.02);
  EXPECT_NEAR(column_moments(d, 0, 1).mean, 5.0, 0.05);
  EXPECT_NEAR(column_moments(d, 0, 0).mean, 4.5, 0.05);
  EXPECT_NEAR(column_moments(d, 0, 1).var, 1.5, 0.08);
  EXPECT_NEAR(column_moments(d, 4, 1).var, 0.25, 0.05);
  EXPECT_NEAR(column_moments(d, 2, 0).mean, 5.0 - 0.8, 0.05);
}

TEST(Generators, M2Moments)
{
  const auto d = generate_m2(20000, 11);
  EXPECT_NEAR(d.group_probs()[0], 0.5, 0.02);
  EXPECT_NEAR(column_moments(d, 3, 0).mean, 5.025, 0.05);
  EXPECT_NEAR(column_moments(d, 3, 1).var, 0.25, 0.05);
  EXPECT_NEAR(column_moments(d, 0, 1).var, 1.25, 0.08);
}

TEST(Generators, LabelsFollowLogisticModel)
{
  // P(Y = 1 | G) differs between groups because group 0 has lower means
  const auto d = generate_m1(20000, 3);
  double y0 = 0, y1 = 0, n0 = 0, n1 = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    (d.g[i] ? y1 : y0) += d.y[i];
    (d.g[i] ? n1 : n0) += 1;
  }
  EXPECT_GT(y1 / n1, y0 / n0 + 0.15);
}

TEST(Generators, SeedReproducible)
{
  const auto a = generate_m2(500, 5), b = generate_m2(500, 5), c = generate_m2(500, 6);
  EXPECT_TRUE(a.X == b.X);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.g, b.g);
  EXPECT_FALSE(a.X == c.X);
  EXPECT_THROW(generate_m1(1, 0), std::invalid_argument);
}

TEST(Split, HalvesAndDeterminism)
{
  const auto d = generate_m1(20000, 1);
  auto [tr, te] = split(d, 0.5, 9);
  EXPECT_EQ(tr.size(), 10000u);
  EXPECT_EQ(te.size(), 10000u);
  auto [tr2, te2] = split(d, 0.5, 9);
  EXPECT_TRUE(tr.X == tr2.X);
  EXPECT_EQ(te.y, te2.y);
  auto [tr3, te3] = split(d, 0.5, 10);
  EXPECT_FALSE(tr.X == tr3.X);
  EXPECT_THROW(split(d, 1.0, 0), std::invalid_argument);
}

TEST(Split, EveryGroupOnBothSides)
{
  // one rare group with two members must be separated
  Dataset d = generate_m1(50, 2);
  for (auto& v : d.g)
    v = 0;
  d.g[3] = 1;
  d.g[40] = 1;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto [a, b] = split(d, 0.5, seed);
    EXPECT_EQ(a.group_counts()[1], 1u);
    EXPECT_EQ(b.group_counts()[1], 1u);
  }
  d.g[40] = 0;
  EXPECT_THROW(split(d, 0.5, 0), std::invalid_argument);
}

TEST(Csv, RoundTripIsBitExact)
{
  const auto d = generate_m1(300, 4);
  const auto path = tmp_path("round.csv");
  write_csv(d, path);
  const auto r = load_csv(path);
  EXPECT_TRUE(r.X == d.X);
  EXPECT_EQ(r.y, d.y);
  EXPECT_EQ(r.g, d.g);
  EXPECT_EQ(r.feature_names, d.feature_names);
  EXPECT_TRUE(std::filesystem::exists(path + ".json"));
}

TEST(Csv, GroupRemapMajorityFirst)
{
  const auto path = tmp_path("remap.csv");
  write_text(path, "a,y,g\n1,0,7\n2,1,3\n3,1,3\n4,0,3\n5,0,9\n");
  const auto d = load_csv(path);
  EXPECT_EQ(d.n_groups, 3);
  EXPECT_EQ(d.group_codes[0], 3);
  EXPECT_EQ(d.g, (std::vector<int>{ 1, 0, 0, 0, 2 }));
  CsvOptions opt;
  opt.majority_label = 9;
  const auto e = load_csv(path, opt);
  EXPECT_EQ(e.group_codes[0], 9);
  EXPECT_EQ(e.g[4], 0);
}

TEST(Csv, FixedGroupOrder)
{
  const auto path = tmp_path("fixed.csv");
  write_text(path, "a,y,g\n1,0,7\n2,1,3\n3,1,3\n");
  CsvOptions opt;
  opt.group_codes = { 7, 3, 9 };
  const auto d = load_csv(path, opt);
  EXPECT_EQ(d.n_groups, 3);
  EXPECT_EQ(d.g, (std::vector<int>{ 0, 1, 1 }));
  opt.group_codes = { 3 };
  EXPECT_THROW(load_csv(path, opt), std::runtime_error);
}

TEST(Csv, Diagnostics)
{
  const auto path = tmp_path("bad.csv");
  write_text(path, "a,y,g\n1,0,0\n2,2,1\n");
  try {
    load_csv(path);
    FAIL() << "expected a non-binary label error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("'y'"), std::string::npos);
  }
  write_text(path, "a,y,g\nfoo,0,0\n");
  EXPECT_THROW(load_csv(path), std::runtime_error);
  write_text(path, "a,y\n1,0\n");
  EXPECT_THROW(load_csv(path), std::runtime_error);
  write_text(path, "a,y,g\n1,0\n");
  EXPECT_THROW(load_csv(path), std::runtime_error);
  EXPECT_THROW(load_csv(tmp_path("missing_file.csv")), std::runtime_error);
}

TEST(Preprocessing, ImputesWithTrainMeans)
{
  const auto path = tmp_path("missing.csv");
  write_text(path, "a,b,y,g\n1,,0,0\n3,4,1,1\n,8,0,0\n");
  const auto d = load_csv(path);
  EXPECT_TRUE(std::isnan(d.X(0, 1)));
  const auto p = fit_preprocessing(d, false);
  EXPECT_DOUBLE_EQ(p.impute_means[0], 2.0);
  EXPECT_DOUBLE_EQ(p.impute_means[1], 6.0);
  const auto f = apply_preprocessing(d, p);
  EXPECT_DOUBLE_EQ(f.X(0, 1), 6.0);
  EXPECT_DOUBLE_EQ(f.X(2, 0), 2.0);
  EXPECT_EQ(f.prep.imputed, (std::vector<std::size_t>{ 1, 1 }));
  for (Eigen::Index i = 0; i < f.X.rows(); ++i)
    for (Eigen::Index j = 0; j < f.X.cols(); ++j)
      EXPECT_TRUE(std::isfinite(f.X(i, j)));
}

TEST(Preprocessing, StandardisationUsesTrainOnly)
{
  const auto d = generate_m1(2000, 8);
  auto [tr, te] = split(d, 0.5, 1);
  const auto p = fit_preprocessing(tr, true);
  // recompute from the train split by hand
  for (std::size_t j = 0; j < tr.n_features(); ++j) {
    const Eigen::VectorXd col = tr.X.col(static_cast<Eigen::Index>(j));
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() / static_cast<double>(col.size() - 1));
    EXPECT_NEAR(p.center[j], mean, 1e-12);
    EXPECT_NEAR(p.scale[j], sd, 1e-12);
  }
  const auto st = apply_preprocessing(tr, p);
  const auto se = apply_preprocessing(te, p);
  EXPECT_NEAR(st.X.col(0).mean(), 0.0, 1e-12);
  EXPECT_GT(std::abs(se.X.col(0).mean()), 1e-6);
  const auto q = fit_preprocessing(te, true);
  EXPECT_NE(q.center[0], p.center[0]);
}
