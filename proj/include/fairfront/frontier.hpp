#pragma once

// Exact held-out evaluation of candidate models and efficient-frontier extraction.

#include "fairfront/bias_metrics.hpp"
#include "fairfront/optimizer.hpp"
#include "fairfront/parallel.hpp"
#include "fairfront/relaxed_estimators.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairfront {

struct Metrics
{
  double ce{ 0.0 };
  double auc{ 0.0 };
  double w1{ 0.0 };
  double ks{ 0.0 };
  double inv{ 0.0 };
};

struct FrontierPoint
{
  std::string method;
  double omega{ 0.0 };
  std::size_t epoch{ 0 };
  std::string split{ "test" };
  Metrics m;
  std::vector<double> theta;
};

//! Mann-Whitney AUC with midranks for ties.
inline double auc_score(std::span<const double> p, std::span<const int> y)
{
  if (p.size() != y.size())
    throw std::invalid_argument("auc_score: size mismatch");
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), std::size_t{ 0 });
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] < p[b]; });
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && p[idx[j]] == p[idx[i]])
      ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (y[idx[k]]) {
        rank_sum += mid;
        pos += 1.0;
      }
    i = j;
  }
  const double neg = static_cast<double>(p.size()) - pos;
  if (pos == 0.0 || neg == 0.0)
    return 0.5;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

//! Binary cross-entropy of probabilities clamped to [1e-15, 1 - 1e-15].
inline double cross_entropy(std::span<const double> p, std::span<const int> y)
{
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], 1e-15, 1.0 - 1e-15);
    acc -= y[i] ? std::log(q) : std::log1p(-q);
  }
  return acc / static_cast<double>(p.size());
}

//! All metrics for per-record probabilities. K > 2 averages the pairs (0, k)
//! with protected-proportion weights.
inline Metrics score_metrics(std::span<const double> p, std::span<const int> y, std::span<const int> g, int n_groups)
{
  if (p.size() != y.size() || p.size() != g.size())
    throw std::invalid_argument("score_metrics: size mismatch");
  Metrics m;
  m.ce = cross_entropy(p, y);
  m.auc = auc_score(p, y);
  std::vector<std::vector<double>> by(static_cast<std::size_t>(n_groups));
  for (std::size_t i = 0; i < p.size(); ++i)
    by[static_cast<std::size_t>(g[i])].push_back(p[i]);
  for (std::size_t k = 0; k < by.size(); ++k)
    if (by[k].empty())
      throw std::invalid_argument("score_metrics: group " + std::to_string(k) + " has no records");
  double total = 0.0;
  for (std::size_t k = 1; k < by.size(); ++k)
    total += static_cast<double>(by[k].size());
  const EmpiricalDistribution d0(by[0]);
  for (std::size_t k = 1; k < by.size(); ++k) {
    const double w = static_cast<double>(by[k].size()) / total;
    const EmpiricalDistribution dk(by[k]);
    const double n0 = static_cast<double>(by[0].size()), nk = static_cast<double>(by[k].size());
    GroupedScores pair({ by[0], by[k] }, { n0 / (n0 + nk), nk / (n0 + nk) });
    m.w1 += w * wasserstein1(d0, dk);
    m.ks += w * ks_distance(d0, dk);
    m.inv += w * invariant_bias(pair);
  }
  return m;
}

//! Exact metrics of every candidate on the records of `family`.
inline std::vector<FrontierPoint> evaluate(const std::vector<Candidate>& candidates,
                                           const LinearFamily& family,
                                           std::span<const int> y,
                                           std::span<const int> g,
                                           int n_groups,
                                           const std::string& method,
                                           const std::string& split = "test")
{
  const auto n = static_cast<std::size_t>(family.n_records());
  if (y.size() != n || g.size() != n)
    throw std::invalid_argument("evaluate: labels/groups not aligned with the family");
  std::vector<FrontierPoint> out(candidates.size());
  parallel_for(candidates.size(), [&](std::size_t c) {
    const auto& cand = candidates[c];
    if (cand.theta.size() != family.dim())
      throw std::invalid_argument("evaluate: candidate theta dimension mismatch");
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i)
      p[i] = family.score(i, cand.theta);
    auto& fp = out[c];
    fp.method = method;
    fp.omega = cand.omega;
    fp.epoch = cand.epoch;
    fp.split = split;
    fp.m = score_metrics(p, y, g, n_groups);
    fp.theta.assign(cand.theta.data(), cand.theta.data() + cand.theta.size());
  });
  return out;
}

enum class FrontierAxes
{
  ce_w1,  // cross-entropy against W1 bias
  auc_ks  // 1 - AUC against KS bias
};

inline std::pair<double, double> axes_of(const FrontierPoint& p, FrontierAxes a)
{
  return a == FrontierAxes::ce_w1 ? std::pair{ p.m.w1, p.m.ce } : std::pair{ p.m.ks, 1.0 - p.m.auc };
}

//! Indices of points not weakly dominated, by bias ascending; duplicates collapse
//! to the first occurrence. With convex_hull, only lower-convex-envelope vertices remain.
inline std::vector<std::size_t> pareto_filter(const std::vector<FrontierPoint>& pts,
                                              FrontierAxes axes = FrontierAxes::ce_w1,
                                              bool convex_hull = false)
{
  std::vector<std::size_t> idx(pts.size());
  std::iota(idx.begin(), idx.end(), std::size_t{ 0 });
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) {
    const auto pa = axes_of(pts[a], axes), pb = axes_of(pts[b], axes);
    return pa.first != pb.first ? pa.first < pb.first : pa.second < pb.second;
  });
  std::vector<std::size_t> keep;
  double best_loss = INFINITY;
  for (std::size_t i : idx) {
    const auto [b, l] = axes_of(pts[i], axes);
    if (l < best_loss) {
      keep.push_back(i);
      best_loss = l;
    }
  }
  if (!convex_hull || keep.size() < 3)
    return keep;
  std::vector<std::size_t> hull;
  for (std::size_t i : keep) {
    while (hull.size() >= 2) {
      const auto [x1, y1] = axes_of(pts[hull[hull.size() - 2]], axes);
      const auto [x2, y2] = axes_of(pts[hull.back()], axes);
      const auto [x3, y3] = axes_of(pts[i], axes);
      if ((x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1) <= 0.0)
        hull.pop_back();
      else
        break;
    }
    hull.push_back(i);
  }
  return hull;
}

//! Lowest frontier loss reachable at bias <= b (staircase), +inf if none.
inline double frontier_loss_at(const std::vector<FrontierPoint>& pts, const std::vector<std::size_t>& frontier,
                               double b, FrontierAxes axes = FrontierAxes::ce_w1)
{
  double best = INFINITY;
  for (std::size_t i : frontier) {
    const auto [x, l] = axes_of(pts[i], axes);
    if (x <= b)
      best = std::min(best, l);
  }
  return best;
}

namespace detail {

inline std::string g17(double v)
{
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string theta_json(const std::vector<double>& t)
{
  std::string s = "[";
  for (std::size_t k = 0; k < t.size(); ++k)
    s += (k ? "," : "") + g17(t[k]);
  return s + "]";
}

} // namespace detail

inline const char* kFrontierHeader = "method,omega,epoch,split,ce,auc,w1_bias,ks_bias,inv_bias,on_frontier,theta_json";

inline std::string frontier_csv(const std::vector<FrontierPoint>& pts)
{
  // frontier membership per (method, split)
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pts.size(); ++i)
    groups[{ pts[i].method, pts[i].split }].push_back(i);
  std::vector<char> on(pts.size(), 0);
  for (const auto& [key, members] : groups) {
    std::vector<FrontierPoint> sub;
    for (auto i : members)
      sub.push_back(pts[i]);
    for (auto k : pareto_filter(sub))
      on[members[k]] = 1;
  }
  std::ostringstream out;
  out << kFrontierHeader << '\n';
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& p = pts[i];
    out << p.method << ',' << detail::g17(p.omega) << ',' << p.epoch << ',' << p.split << ','
        << detail::g17(p.m.ce) << ',' << detail::g17(p.m.auc) << ',' << detail::g17(p.m.w1) << ','
        << detail::g17(p.m.ks) << ',' << detail::g17(p.m.inv) << ',' << int(on[i]) << ",\""
        << detail::theta_json(p.theta) << "\"\n";
  }
  return out.str();
}

//! Parses text written by frontier_csv; on_frontier is recomputed, not read.
inline std::vector<FrontierPoint> frontier_from_csv(const std::string& text)
{
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kFrontierHeader)
    throw std::runtime_error("frontier_from_csv: unexpected header");
  std::vector<FrontierPoint> pts;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty())
      continue;
    std::vector<std::string> cells(1);
    bool quoted = false;
    for (char c : line) {
      if (c == '"')
        quoted = !quoted;
      else if (c == ',' && !quoted)
        cells.emplace_back();
      else
        cells.back() += c;
    }
    if (cells.size() != 11)
      throw std::runtime_error("frontier_from_csv: row " + std::to_string(row) + " has " +
                               std::to_string(cells.size()) + " cells");
    FrontierPoint p;
    try {
      p.method = cells[0];
      p.omega = std::stod(cells[1]);
      p.epoch = std::stoul(cells[2]);
      p.split = cells[3];
      p.m = { std::stod(cells[4]), std::stod(cells[5]), std::stod(cells[6]), std::stod(cells[7]), std::stod(cells[8]) };
      p.theta = nlohmann::json::parse(cells[10]).get<std::vector<double>>();
    } catch (const std::exception& e) {
      throw std::runtime_error("frontier_from_csv: row " + std::to_string(row) + ": " + e.what());
    }
    pts.push_back(std::move(p));
  }
  return pts;
}

inline void write_frontier_csv(const std::vector<FrontierPoint>& pts, const std::string& path)
{
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("write_frontier_csv: cannot open " + path);
  out << frontier_csv(pts);
}

//! Two panels (CE vs W1, AUC vs KS), one polyline per method through its frontier.
inline std::string frontier_svg(const std::vector<FrontierPoint>& pts, const std::string& split = "test")
{
  const char* palette[] = { "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b" };
  std::vector<std::string> methods;
  for (const auto& p : pts)
    if (p.split == split && std::find(methods.begin(), methods.end(), p.method) == methods.end())
      methods.push_back(p.method);
  const double W = 420, H = 320, pad = 50;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 2 * W << "\" height=\"" << H + 40
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int panel = 0; panel < 2; ++panel) {
    const auto axes = panel == 0 ? FrontierAxes::ce_w1 : FrontierAxes::auc_ks;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& p : pts) {
      if (p.split != split)
        continue;
      auto [b, l] = axes_of(p, axes);
      if (panel == 1)
        l = 1.0 - l;
      x0 = std::min(x0, b);
      x1 = std::max(x1, b);
      y0 = std::min(y0, l);
      y1 = std::max(y1, l);
    }
    if (!(x1 > x0))
      x1 = x0 + 1e-9;
    if (!(y1 > y0))
      y1 = y0 + 1e-9;
    const double ox = panel * W;
    auto X = [&](double v) { return ox + pad + (v - x0) / (x1 - x0) * (W - 1.5 * pad); };
    auto Y = [&](double v) { return H - pad + 10 - (v - y0) / (y1 - y0) * (H - 1.5 * pad); };
    svg << "<g>\n<rect x=\"" << ox + pad << "\" y=\"" << pad / 2 + 10 << "\" width=\"" << W - 1.5 * pad
        << "\" height=\"" << H - 1.5 * pad << "\" fill=\"none\" stroke=\"#444\"/>\n";
    svg << "<text x=\"" << ox + W / 2 << "\" y=\"" << H + 20 << "\" text-anchor=\"middle\">"
        << (panel == 0 ? "W1 bias" : "KS bias") << "</text>\n";
    svg << "<text x=\"" << ox + 12 << "\" y=\"" << H / 2 << "\" transform=\"rotate(-90 " << ox + 12 << ' ' << H / 2
        << ")\" text-anchor=\"middle\">" << (panel == 0 ? "cross-entropy" : "AUC") << "</text>\n";
    svg << "<text x=\"" << ox + pad << "\" y=\"" << H + 5 << "\">" << detail::g17(x0).substr(0, 8) << "</text>"
        << "<text x=\"" << ox + W - pad << "\" y=\"" << H + 5 << "\" text-anchor=\"end\">"
        << detail::g17(x1).substr(0, 8) << "</text>\n";
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      std::vector<FrontierPoint> sub;
      for (const auto& p : pts)
        if (p.method == methods[mi] && p.split == split)
          sub.push_back(p);
      const char* colour = palette[mi % 6];
      for (const auto& p : sub) {
        auto [b, l] = axes_of(p, axes);
        if (panel == 1)
          l = 1.0 - l;
        svg << "<circle cx=\"" << X(b) << "\" cy=\"" << Y(l) << "\" r=\"1.6\" fill=\"" << colour
            << "\" fill-opacity=\"0.35\"/>\n";
      }
      svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
      for (auto k : pareto_filter(sub, axes)) {
        auto [b, l] = axes_of(sub[k], axes);
        if (panel == 1)
          l = 1.0 - l;
        svg << X(b) << ',' << Y(l) << ' ';
      }
      svg << "\"/>\n";
      if (panel == 0)
        svg << "<text x=\"" << W - pad - 4 << "\" y=\"" << pad / 2 + 24 + 14 * mi << "\" text-anchor=\"end\" fill=\""
            << colour << "\">" << methods[mi] << "</text>\n";
    }
    svg << "</g>\n";
  }
  // embedded data table, byte-stable across runs
  svg << "<desc id=\"data\"><![CDATA[\n" << frontier_csv(pts) << "]]></desc>\n</svg>\n";
  return svg.str();
}

inline nlohmann::json to_json(const std::vector<Candidate>& cands)
{
  auto arr = nlohmann::json::array();
  for (const auto& c : cands)
    arr.push_back({ { "omega", c.omega },
                    { "epoch", c.epoch },
                    { "theta", std::vector<double>(c.theta.data(), c.theta.data() + c.theta.size()) } });
  return arr;
}

inline std::vector<Candidate> candidates_from_json(const nlohmann::json& arr)
{
  std::vector<Candidate> out;
  for (const auto& j : arr) {
    Candidate c;
    c.omega = j.at("omega").get<double>();
    c.epoch = j.at("epoch").get<std::size_t>();
    const auto t = j.at("theta").get<std::vector<double>>();
    c.theta = Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
    out.push_back(std::move(c));
  }
  return out;
}

} // namespace fairfront
