#pragma once

// Datasets: synthetic generators, numeric CSV ingestion and output,
// deterministic splitting, and train-fitted imputation/standardisation.

#include "fairfront/relaxed_estimators.hpp"

#include <boost/math/distributions/normal.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairfront {

struct Preprocessing
{
  std::vector<double> impute_means;  // per feature, from the train split
  std::vector<std::size_t> imputed;  // missing cells filled, per feature
  std::vector<double> center, scale; // empty unless standardised
};

struct Dataset
{
  RowMatrix X;
  std::vector<int> y;
  std::vector<int> g;
  int n_groups{ 2 };
  std::vector<std::string> feature_names;
  std::string label_name{ "y" };
  std::string group_name{ "g" };
  std::vector<long long> group_codes; // original label of each group index
  Preprocessing prep;

  std::size_t size() const { return y.size(); }
  std::size_t n_features() const { return static_cast<std::size_t>(X.cols()); }

  std::vector<double> row(std::size_t i) const
  {
    std::vector<double> r(n_features());
    for (std::size_t j = 0; j < r.size(); ++j)
      r[j] = X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return r;
  }

  std::vector<std::size_t> group_counts() const
  {
    std::vector<std::size_t> c(static_cast<std::size_t>(n_groups), 0);
    for (int v : g)
      ++c[static_cast<std::size_t>(v)];
    return c;
  }

  std::vector<double> group_probs() const
  {
    auto c = group_counts();
    std::vector<double> p(c.size());
    for (std::size_t k = 0; k < c.size(); ++k)
      p[k] = static_cast<double>(c[k]) / static_cast<double>(size());
    return p;
  }

  Dataset subset(std::span<const std::size_t> idx) const
  {
    Dataset d;
    d.X.resize(static_cast<Eigen::Index>(idx.size()), X.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      d.X.row(static_cast<Eigen::Index>(k)) = X.row(static_cast<Eigen::Index>(idx[k]));
      d.y.push_back(y[idx[k]]);
      d.g.push_back(g[idx[k]]);
    }
    d.n_groups = n_groups;
    d.feature_names = feature_names;
    d.label_name = label_name;
    d.group_name = group_name;
    d.group_codes = group_codes;
    d.prep = prep;
    return d;
  }
};

namespace detail {

//! Uniform on (0, 1) from the top 53 bits.
inline double open_uniform(std::mt19937_64& rng)
{
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

//! Standard normal by inversion of the CDF.
inline double inverse_cdf_normal(std::mt19937_64& rng)
{
  static const boost::math::normal_distribution<double> unit(0.0, 1.0);
  return boost::math::quantile(unit, open_uniform(rng));
}

struct GaussianModel
{
  double mu;
  std::array<double, 5> a;
  std::array<double, 5> var0, var1; // variance given G = 0 / G = 1
};

inline Dataset generate(const GaussianModel& m, std::size_t n, std::uint64_t seed)
{
  if (n < 2)
    throw std::invalid_argument("generate: need at least 2 records");
  std::mt19937_64 rng(seed);
  Dataset d;
  d.X.resize(static_cast<Eigen::Index>(n), 5);
  d.y.resize(n);
  d.g.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int G = open_uniform(rng) < 0.5 ? 0 : 1;
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      const double mean = m.mu - m.a[j] * (1 - G);
      const double sd = std::sqrt(G ? m.var1[j] : m.var0[j]);
      const double x = mean + sd * inverse_cdf_normal(rng);
      d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = x;
      sum += x;
    }
    d.g[i] = G;
    d.y[i] = open_uniform(rng) < sigmoid(2.0 * (sum - 24.5)) ? 1 : 0;
  }
  d.n_groups = 2;
  d.feature_names = { "x1", "x2", "x3", "x4", "x5" };
  d.group_codes = { 0, 1 };
  return d;
}

inline std::string trim(const std::string& s)
{
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos)
    return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"')
      quoted = !quoted;
    else if (c == ',' && !quoted) {
      out.push_back(trim(cur));
      cur.clear();
    } else
      cur += c;
  }
  out.push_back(trim(cur));
  return out;
}

inline std::string fmt17(double v)
{
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

} // namespace detail

//! Data model 1: positive bias contributions dominate.
inline Dataset generate_m1(std::size_t n, std::uint64_t seed)
{
  return detail::generate({ 5.0,
                            { 10.0 / 20, -4.0 / 20, 16.0 / 20, 1.0 / 20, -3.0 / 20 },
                            { 0.5, 1.0, 1.0, 1.0, 1.0 },
                            { 1.5, 1.0, 1.0, 0.5, 0.25 } },
                          n, seed);
}

//! Data model 2: x1 and x4 push bias in both directions.
inline Dataset generate_m2(std::size_t n, std::uint64_t seed)
{
  return detail::generate({ 5.0,
                            { 0.25, 0.10, 0.40, -0.025, 0.075 },
                            { 0.5, 1.0, 1.0, 1.0, 1.0 },
                            { 1.25, 1.0, 1.0, 0.25, 1.0 } },
                          n, seed);
}

struct CsvOptions
{
  std::string label_column{ "y" };
  std::string group_column{ "g" };
  std::optional<long long> majority_label; // group code mapped to 0
  bool use_sidecar{ true };                 // reuse the group order of a written dataset
  std::vector<long long> group_codes;       // fixed order, e.g. from the training file
};

//! Reads a header + numeric CSV; empty cells become NaN (impute later).
inline Dataset load_csv(const std::string& path, const CsvOptions& opt = {})
{
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("load_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("load_csv: " + path + " has no header row");
  const auto header = detail::split_csv_line(line);
  int label_col = -1, group_col = -1;
  std::vector<int> feat_cols;
  Dataset d;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == opt.label_column)
      label_col = static_cast<int>(c);
    else if (header[c] == opt.group_column)
      group_col = static_cast<int>(c);
    else {
      feat_cols.push_back(static_cast<int>(c));
      d.feature_names.push_back(header[c]);
    }
  }
  if (label_col < 0)
    throw std::runtime_error("load_csv: missing label column '" + opt.label_column + "'");
  if (group_col < 0)
    throw std::runtime_error("load_csv: missing group column '" + opt.group_column + "'");
  d.label_name = opt.label_column;
  d.group_name = opt.group_column;

  std::vector<std::vector<double>> rows;
  std::vector<long long> raw_groups;
  std::size_t row_no = 1;
  auto fail = [&](const std::string& what, std::size_t col) -> void {
    throw std::runtime_error("load_csv: " + path + " row " + std::to_string(row_no) + ", column '" +
                             header[col] + "': " + what);
  };
  while (std::getline(in, line)) {
    ++row_no;
    if (detail::trim(line).empty())
      continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error("load_csv: " + path + " row " + std::to_string(row_no) + ": expected " +
                               std::to_string(header.size()) + " cells, found " +
                               std::to_string(cells.size()));
    auto parse = [&](std::size_t c, bool allow_missing) {
      const auto& s = cells[c];
      if (s.empty()) {
        if (!allow_missing)
          fail("missing value", c);
        return std::numeric_limits<double>::quiet_NaN();
      }
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (end != s.c_str() + s.size() || !std::isfinite(v))
        fail("non-numeric cell '" + s + "'", c);
      return v;
    };
    const double yv = parse(static_cast<std::size_t>(label_col), false);
    if (yv != 0.0 && yv != 1.0)
      fail("label must be 0 or 1", static_cast<std::size_t>(label_col));
    const double gv = parse(static_cast<std::size_t>(group_col), false);
    if (gv != std::floor(gv))
      fail("group must be integer-coded", static_cast<std::size_t>(group_col));
    std::vector<double> r;
    for (int c : feat_cols)
      r.push_back(parse(static_cast<std::size_t>(c), true));
    rows.push_back(std::move(r));
    d.y.push_back(static_cast<int>(yv));
    raw_groups.push_back(static_cast<long long>(gv));
  }
  if (rows.empty())
    throw std::runtime_error("load_csv: " + path + " has no data rows");

  // Remap group codes: 0 is the majority (or the requested) group.
  std::map<long long, std::size_t> counts;
  for (auto c : raw_groups)
    ++counts[c];
  std::vector<std::pair<long long, std::size_t>> order(counts.begin(), counts.end());
  std::stable_sort(order.begin(), order.end(), [](auto& a, auto& b) { return a.second > b.second; });
  if (opt.use_sidecar && !opt.majority_label) {
    std::ifstream side(path + ".json");
    if (side) {
      std::vector<long long> codes;
      try {
        codes = nlohmann::json::parse(side).at("group_codes").get<std::vector<long long>>();
      } catch (const std::exception&) {
        codes.clear();
      }
      std::vector<long long> seen;
      for (auto& p : order)
        seen.push_back(p.first);
      auto sorted_codes = codes;
      std::sort(sorted_codes.begin(), sorted_codes.end());
      std::sort(seen.begin(), seen.end());
      if (sorted_codes == seen) {
        order.clear();
        for (auto c : codes)
          order.emplace_back(c, counts[c]);
      }
    }
  }
  if (!opt.group_codes.empty()) {
    for (auto& p : order)
      if (std::find(opt.group_codes.begin(), opt.group_codes.end(), p.first) == opt.group_codes.end())
        throw std::runtime_error("load_csv: " + path + " has group code " + std::to_string(p.first) +
                                 " not present in the fitted group order");
    order.clear();
    for (auto c : opt.group_codes)
      order.emplace_back(c, counts[c]);
  } else if (opt.majority_label) {
    auto it = std::find_if(order.begin(), order.end(), [&](auto& p) { return p.first == *opt.majority_label; });
    if (it == order.end())
      throw std::runtime_error("load_csv: majority label not present in group column");
    std::rotate(order.begin(), it, it + 1);
  }
  std::map<long long, int> remap;
  for (std::size_t k = 0; k < order.size(); ++k) {
    remap[order[k].first] = static_cast<int>(k);
    d.group_codes.push_back(order[k].first);
  }
  d.n_groups = static_cast<int>(order.size());
  for (auto c : raw_groups)
    d.g.push_back(remap[c]);

  d.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(feat_cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < feat_cols.size(); ++j)
      d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return d;
}

inline nlohmann::json preprocessing_json(const Dataset& d)
{
  nlohmann::json j;
  j["features"] = d.feature_names;
  j["label_column"] = d.label_name;
  j["group_column"] = d.group_name;
  j["group_codes"] = d.group_codes;
  j["n_records"] = d.size();
  j["group_counts"] = d.group_counts();
  j["impute_means"] = d.prep.impute_means;
  j["imputed_cells"] = d.prep.imputed;
  j["center"] = d.prep.center;
  j["scale"] = d.prep.scale;
  return j;
}

//! Writes features, label and group (original codes) plus a JSON sidecar.
inline void write_csv(const Dataset& d, const std::string& path)
{
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("write_csv: cannot open " + path);
  for (const auto& f : d.feature_names)
    out << f << ',';
  out << d.label_name << ',' << d.group_name << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.n_features(); ++j) {
      const double v = d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (!std::isnan(v))
        out << detail::fmt17(v);
      out << ',';
    }
    const auto gi = static_cast<std::size_t>(d.g[i]);
    out << d.y[i] << ',' << (gi < d.group_codes.size() ? d.group_codes[gi] : d.g[i]) << '\n';
  }
  std::ofstream side(path + ".json");
  side << preprocessing_json(d).dump(2) << '\n';
}

//! Deterministic shuffle split; every group keeps a record on both sides.
inline std::pair<Dataset, Dataset> split(const Dataset& d, double fraction, std::uint64_t seed)
{
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("split: fraction must lie in (0, 1)");
  const std::size_t n = d.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{ 0 });
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train == n)
    throw std::invalid_argument("split: fraction leaves an empty side");
  std::vector<std::size_t> a(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  // repair: swap so that each group appears in both halves
  for (int k = 0; k < d.n_groups; ++k) {
    auto has = [&](const std::vector<std::size_t>& v) {
      return std::any_of(v.begin(), v.end(), [&](auto i) { return d.g[i] == k; });
    };
    auto count = [&](const std::vector<std::size_t>& v) {
      return std::count_if(v.begin(), v.end(), [&](auto i) { return d.g[i] == k; });
    };
    for (auto* pair : { &a, &b }) {
      auto& to = *pair;
      auto& from = pair == &a ? b : a;
      if (has(to) || count(from) < 2)
        continue;
      const auto src = std::find_if(from.begin(), from.end(), [&](auto i) { return d.g[i] == k; });
      const auto dst = std::find_if(to.begin(), to.end(), [&](auto i) {
        return std::count_if(to.begin(), to.end(), [&](auto j) { return d.g[j] == d.g[i]; }) > 1;
      });
      if (dst == to.end())
        continue;
      std::iter_swap(src, dst);
    }
    if (!has(a) || !has(b))
      throw std::invalid_argument("split: group " + std::to_string(k) + " cannot populate both splits");
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return { d.subset(a), d.subset(b) };
}

//! Mean-imputation (and optional standardisation) fitted on `train`.
inline Preprocessing fit_preprocessing(const Dataset& train, bool standardize)
{
  Preprocessing p;
  const auto m = train.n_features();
  p.impute_means.assign(m, 0.0);
  p.imputed.assign(m, 0);
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const double v = train.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (!std::isnan(v)) {
        s += v;
        ++c;
      }
    }
    p.impute_means[j] = c ? s / static_cast<double>(c) : 0.0;
  }
  if (standardize) {
    p.center = p.impute_means;
    p.scale.assign(m, 1.0);
    for (std::size_t j = 0; j < m; ++j) {
      double ss = 0.0;
      std::size_t c = 0;
      for (std::size_t i = 0; i < train.size(); ++i) {
        double v = train.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (std::isnan(v))
          v = p.impute_means[j];
        ss += (v - p.center[j]) * (v - p.center[j]);
        ++c;
      }
      const double sd = c > 1 ? std::sqrt(ss / static_cast<double>(c - 1)) : 0.0;
      p.scale[j] = sd > 0.0 ? sd : 1.0;
    }
  }
  return p;
}

inline Dataset apply_preprocessing(Dataset d, const Preprocessing& p)
{
  if (p.impute_means.size() != d.n_features())
    throw std::invalid_argument("apply_preprocessing: feature count mismatch");
  d.prep = p;
  d.prep.imputed.assign(d.n_features(), 0);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.n_features(); ++j) {
      double& v = d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (std::isnan(v)) {
        v = p.impute_means[j];
        ++d.prep.imputed[j];
      }
      if (!p.center.empty())
        v = (v - p.center[j]) / p.scale[j];
    }
  return d;
}

} // namespace fairfront
