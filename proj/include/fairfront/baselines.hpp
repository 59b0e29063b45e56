#pragma once

// Comparison post-processors: random-search predictor rescaling and the
// explainable optimal-transport projection.

#include "fairfront/bias_metrics.hpp"
#include "fairfront/frontier.hpp"
#include "fairfront/gbdt.hpp"
#include "fairfront/parallel.hpp"
#include "fairfront/relaxed_estimators.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairfront {

//! T(x, a, x*) = a (x - x*) + x*.
inline double rescale_transform(double x, double a, double x_star)
{
  return a * (x - x_star) + x_star;
}

struct RescaleBounds
{
  double a_lo{ 0.0 };
  double a_hi{ 3.0 };
  double x_extend{ 0.05 }; // x* ranges over mean -/+ x_extend * (distance to min / max)
};

struct RescaleCandidate
{
  std::vector<double> a;
  std::vector<double> x_star;
  double train_ce{ 0.0 };
  double train_w1{ 0.0 };
};

struct RescaleResult
{
  std::vector<std::size_t> features;
  std::vector<double> omegas;
  std::vector<RescaleCandidate> candidates; // candidate 0 is the identity
  std::vector<std::size_t> best;            // best candidate per omega
};

inline RowMatrix apply_rescaling(const RowMatrix& X,
                                 std::span<const std::size_t> features,
                                 const RescaleCandidate& c)
{
  RowMatrix out = X;
  for (std::size_t k = 0; k < features.size(); ++k) {
    const auto j = static_cast<Eigen::Index>(features[k]);
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      out(i, j) = rescale_transform(out(i, j), c.a[k], c.x_star[k]);
  }
  return out;
}

inline std::vector<double> rescaled_probabilities(const Ensemble& model,
                                                  const RowMatrix& X,
                                                  std::span<const std::size_t> features,
                                                  const RescaleCandidate& c)
{
  const Eigen::VectorXd raw = model.predict_raw(apply_rescaling(X, features, c));
  std::vector<double> p(static_cast<std::size_t>(raw.size()));
  for (Eigen::Index i = 0; i < raw.size(); ++i)
    p[static_cast<std::size_t>(i)] = sigmoid(raw[i]);
  return p;
}

//! Default omegas for rescaling: 0, 0.5, ..., 10.
inline std::vector<double> rescaling_omegas(std::size_t n = 21, double step = 0.5)
{
  std::vector<double> w(n);
  for (std::size_t j = 0; j < n; ++j)
    w[j] = step * static_cast<double>(j);
  return w;
}

//! Random search over (a, x*) scored by CE + omega * W1 on the given data.
inline RescaleResult random_search_rescaling(const Ensemble& model,
                                             const RowMatrix& X,
                                             std::span<const int> y,
                                             std::span<const int> g,
                                             int n_groups,
                                             std::vector<std::size_t> features,
                                             std::vector<double> omegas,
                                             std::size_t n_iter,
                                             const RescaleBounds& bounds = {},
                                             std::uint64_t seed = 0)
{
  const auto n = static_cast<std::size_t>(X.rows());
  if (y.size() != n || g.size() != n)
    throw std::invalid_argument("random_search_rescaling: labels/groups not aligned with X");
  if (!(bounds.a_lo <= bounds.a_hi) || !(bounds.x_extend >= 0.0))
    throw std::invalid_argument("random_search_rescaling: bad bounds");
  for (auto j : features)
    if (j >= static_cast<std::size_t>(X.cols()))
      throw std::invalid_argument("random_search_rescaling: feature index out of range");
  if (omegas.empty())
    omegas = rescaling_omegas();

  RescaleResult res;
  res.features = features;
  res.omegas = omegas;
  const std::size_t m = features.size();
  std::vector<double> mean(m), lo(m), hi(m);
  for (std::size_t k = 0; k < m; ++k) {
    const auto col = X.col(static_cast<Eigen::Index>(features[k]));
    mean[k] = col.mean();
    lo[k] = mean[k] - bounds.x_extend * (mean[k] - col.minCoeff());
    hi[k] = mean[k] + bounds.x_extend * (col.maxCoeff() - mean[k]);
  }

  RescaleCandidate identity{ std::vector<double>(m, 1.0), mean, 0.0, 0.0 };
  res.candidates.push_back(identity);
  if (m > 0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t it = 0; it < n_iter; ++it) {
      RescaleCandidate c;
      for (std::size_t k = 0; k < m; ++k) {
        c.a.push_back(bounds.a_lo + (bounds.a_hi - bounds.a_lo) * unit(rng));
        c.x_star.push_back(lo[k] + (hi[k] - lo[k]) * unit(rng));
      }
      res.candidates.push_back(std::move(c));
    }
  }

  parallel_for(res.candidates.size(), [&](std::size_t c) {
    auto& cand = res.candidates[c];
    const auto p = rescaled_probabilities(model, X, features, cand);
    const auto met = score_metrics(p, y, g, n_groups);
    cand.train_ce = met.ce;
    cand.train_w1 = met.w1;
  });

  for (double w : omegas) {
    std::size_t best = 0;
    double best_obj = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < res.candidates.size(); ++c) {
      const double obj = res.candidates[c].train_ce + w * res.candidates[c].train_w1;
      if (obj < best_obj) {
        best_obj = obj;
        best = c;
      }
    }
    res.best.push_back(best);
  }
  return res;
}

//! Exact metrics of every probed rescaling on (X, y, g). theta lists a then x*;
//! omega is the largest omega selecting the candidate, -1 if none does;
//! epoch holds the candidate index.
inline std::vector<FrontierPoint> evaluate_rescaling(const Ensemble& model,
                                                     const RescaleResult& res,
                                                     const RowMatrix& X,
                                                     std::span<const int> y,
                                                     std::span<const int> g,
                                                     int n_groups,
                                                     const std::string& split = "test")
{
  std::vector<FrontierPoint> out(res.candidates.size());
  parallel_for(res.candidates.size(), [&](std::size_t c) {
    const auto& cand = res.candidates[c];
    auto& fp = out[c];
    fp.method = "rescale";
    fp.omega = -1.0;
    for (std::size_t j = 0; j < res.best.size(); ++j)
      if (res.best[j] == c)
        fp.omega = res.omegas[j];
    fp.epoch = c;
    fp.split = split;
    fp.m = score_metrics(rescaled_probabilities(model, X, res.features, cand), y, g, n_groups);
    fp.theta = cand.a;
    fp.theta.insert(fp.theta.end(), cand.x_star.begin(), cand.x_star.end());
  });
  return out;
}

//! (sum_k' p_k' F_k'^[-1]) o F_k applied to one score of group k.
inline double ot_repair_score(const GroupedScores& fit, double score, std::size_t k)
{
  const double u = fit.group(k).cdf(score);
  if (u <= 0.0)
    throw std::invalid_argument("ot_repair: score below the support of its group");
  double acc = 0.0;
  for (std::size_t j = 0; j < fit.n_groups(); ++j)
    acc += fit.probs()[j] * fit.group(j).quantile(std::min(u, 1.0));
  return acc;
}

//! Barycentric repair of per-record scores using their own group CDFs.
inline std::vector<double> ot_repair(std::span<const double> scores, std::span<const int> groups, int n_groups)
{
  const auto fit = GroupedScores::from_labels(scores, groups, n_groups);
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    out[i] = ot_repair_score(fit, scores[i], static_cast<std::size_t>(groups[i]));
  return out;
}

//! Repaired scores grouped like the input.
inline std::vector<std::vector<double>> ot_repair(const std::vector<std::vector<double>>& by_group)
{
  const GroupedScores fit(by_group);
  std::vector<std::vector<double>> out(by_group.size());
  for (std::size_t k = 0; k < by_group.size(); ++k)
    for (double s : by_group[k])
      out[k].push_back(ot_repair_score(fit, s, k));
  return out;
}

struct OtProjectionOptions
{
  GbdtParams gbdt{ 8, 1000, 0.02, 1.0, 1.0, 10, 1.0, 0 };
  double valid_fraction{ 0.2 }; // records held out for early stopping
  std::vector<double> thetas;   // default: 15 evenly spaced values in [0, 1]
  std::uint64_t seed{ 0 };
};

struct OtProjection
{
  Ensemble projected;
  std::vector<double> repaired; // f-bar on the fitting records
  std::vector<double> thetas;
};

inline std::vector<double> default_ot_thetas(std::size_t n = 15)
{
  std::vector<double> t(n);
  for (std::size_t j = 0; j < n; ++j)
    t[j] = n > 1 ? static_cast<double>(j) / static_cast<double>(n - 1) : 0.0;
  return t;
}

//! Fits f-tilde(x) = E[f-bar(X, G) | X = x] on (X,0,1-f-bar) + (X,1,f-bar).
inline OtProjection ot_projection(const Ensemble& base,
                                  const RowMatrix& X,
                                  std::span<const int> g,
                                  int n_groups,
                                  const OtProjectionOptions& opt = {})
{
  const auto n = static_cast<std::size_t>(X.rows());
  if (g.size() != n)
    throw std::invalid_argument("ot_projection: groups not aligned with X");
  OtProjection out;
  const Eigen::VectorXd raw = base.predict_raw(X);
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i)
    p[i] = sigmoid(raw[static_cast<Eigen::Index>(i)]);
  out.repaired = ot_repair(p, g, n_groups);
  for (double v : out.repaired)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("ot_projection: repaired probabilities must lie in [0, 1]");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i)
    order[i] = i;
  std::mt19937_64 rng(opt.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_valid = static_cast<std::size_t>(std::llround(opt.valid_fraction * static_cast<double>(n)));
  if (n_valid >= n)
    throw std::invalid_argument("ot_projection: validation fraction leaves no fitting records");

  auto stack = [&](std::span<const std::size_t> idx, RowMatrix& Xs, std::vector<int>& ys, std::vector<double>& ws) {
    const auto m = static_cast<Eigen::Index>(idx.size());
    Xs.resize(2 * m, X.cols());
    ys.assign(2 * idx.size(), 0);
    ws.assign(2 * idx.size(), 0.0);
    for (Eigen::Index r = 0; r < m; ++r) {
      const auto i = idx[static_cast<std::size_t>(r)];
      Xs.row(r) = X.row(static_cast<Eigen::Index>(i));
      Xs.row(m + r) = X.row(static_cast<Eigen::Index>(i));
      ws[static_cast<std::size_t>(r)] = 1.0 - out.repaired[i];
      ys[static_cast<std::size_t>(m + r)] = 1;
      ws[static_cast<std::size_t>(m + r)] = out.repaired[i];
    }
  };
  std::vector<std::size_t> fit_idx(order.begin() + static_cast<std::ptrdiff_t>(n_valid), order.end());
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_valid));
  std::sort(fit_idx.begin(), fit_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  RowMatrix Xf, Xv;
  std::vector<int> yf, yv;
  std::vector<double> wf, wv;
  stack(fit_idx, Xf, yf, wf);
  double w0 = 0.0, w1 = 0.0;
  for (std::size_t r = 0; r < yf.size(); ++r)
    (yf[r] ? w1 : w0) += wf[r];
  if (!(w0 > 0.0) || !(w1 > 0.0))
    throw std::invalid_argument("ot_projection: degenerate weights, one label copy carries no mass");
  if (n_valid > 0) {
    stack(val_idx, Xv, yv, wv);
    out.projected = train_gbdt(Xf, yf, wf, opt.gbdt, ValidationSet{ &Xv, yv, wv });
  } else {
    out.projected = train_gbdt(Xf, yf, wf, opt.gbdt);
  }
  out.thetas = opt.thetas.empty() ? default_ot_thetas() : opt.thetas;
  return out;
}

//! f(x; theta) = f*(x) - theta (f*(x) - f-tilde(x)) in probability space.
inline LinearFamily ot_family(const Ensemble& base, const Ensemble& projected, const RowMatrix& X)
{
  const Eigen::VectorXd b = base.predict_raw(X), t = projected.predict_raw(X);
  Eigen::VectorXd fstar(X.rows());
  RowMatrix W(X.rows(), 2);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    fstar[i] = sigmoid(b[i]);
    W(i, 0) = 1.0;
    W(i, 1) = fstar[i] - sigmoid(t[i]);
  }
  LinearFamily fam(fstar, W, Link::identity);
  fam.theta_lo[0] = fam.theta_hi[0] = 0.0;
  return fam;
}

inline std::vector<Candidate> ot_candidates(const std::vector<double>& thetas)
{
  std::vector<Candidate> out;
  for (std::size_t j = 0; j < thetas.size(); ++j)
    out.push_back({ thetas[j], 0, Eigen::Vector2d(0.0, thetas[j]) });
  return out;
}

} // namespace fairfront
