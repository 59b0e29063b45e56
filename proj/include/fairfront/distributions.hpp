#pragma once

// Weighted empirical distributions on the real line: CDFs, generalized
// inverses, 1-D optimal transport costs and the Kolmogorov-Smirnov distance.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairfront {

inline constexpr double kAtomMergeTol = 1e-12;

enum class CostKind
{
  abs,          // h(z) = |z|
  square,       // h(z) = z^2
  abs_log_ratio // c(a, b) = |log a - log b|
};

//! Cost used to compare acceptance rates or to transport mass.
struct CostFunction
{
  CostKind kind{ CostKind::abs };

  static constexpr double kLogClamp = 1e-12;

  //! c(a, b); for the h-kinds this is h(a - b).
  double operator()(double a, double b) const
  {
    switch (kind) {
      case CostKind::abs:
        return std::abs(a - b);
      case CostKind::square:
        return (a - b) * (a - b);
      case CostKind::abs_log_ratio:
        return std::abs(std::log(std::max(a, kLogClamp)) -
                        std::log(std::max(b, kLogClamp)));
    }
    return 0.0;
  }

  bool is_difference_form() const { return kind != CostKind::abs_log_ratio; }

  //! h(z) for difference-form costs.
  double h(double z) const
  {
    if (!is_difference_form())
      throw std::invalid_argument("cost: abs-log-ratio has no h(z) form");
    return kind == CostKind::abs ? std::abs(z) : z * z;
  }

  //! h'(z); subgradient 0 at the kink of |z|.
  double dh(double z) const
  {
    if (!is_difference_form())
      throw std::invalid_argument("cost: abs-log-ratio has no h(z) form");
    if (kind == CostKind::abs)
      return z > 0.0 ? 1.0 : (z < 0.0 ? -1.0 : 0.0);
    return 2.0 * z;
  }
};

inline const char* to_string(CostKind k)
{
  switch (k) {
    case CostKind::abs:
      return "abs";
    case CostKind::square:
      return "square";
    case CostKind::abs_log_ratio:
      return "abs-log-ratio";
  }
  return "?";
}

inline CostKind cost_kind_from_string(const std::string& s)
{
  if (s == "abs")
    return CostKind::abs;
  if (s == "square")
    return CostKind::square;
  if (s == "abs-log-ratio")
    return CostKind::abs_log_ratio;
  throw std::invalid_argument("unknown cost kind: " + s);
}

//! Discrete probability measure with sorted, merged atoms.
class EmpiricalDistribution
{
public:
  EmpiricalDistribution() = default;

  //! Uniform weights over the samples.
  explicit EmpiricalDistribution(std::span<const double> samples)
  {
    std::vector<double> w(samples.size(), 1.0);
    build(samples, w);
  }

  EmpiricalDistribution(std::span<const double> samples,
                        std::span<const double> weights)
  {
    if (samples.size() != weights.size())
      throw std::invalid_argument(
        "EmpiricalDistribution: samples/weights size mismatch");
    build(samples, weights);
  }

  static EmpiricalDistribution point_mass(double x)
  {
    const double v[1] = { x };
    return EmpiricalDistribution(std::span<const double>(v, 1));
  }

  bool empty() const { return values_.empty(); }
  std::size_t size() const { return values_.size(); }
  const std::vector<double>& values() const { return values_; }
  const std::vector<double>& weights() const { return weights_; }
  //! cumulative()[i] = F(values()[i]); the last entry is exactly 1.
  const std::vector<double>& cumulative() const { return cum_; }

  //! F(t) = P(Z <= t).
  double cdf(double t) const
  {
    require_nonempty("cdf");
    auto it = std::upper_bound(values_.begin(), values_.end(), t);
    if (it == values_.begin())
      return 0.0;
    return cum_[static_cast<std::size_t>(it - values_.begin()) - 1];
  }

  //! F(t-) = P(Z < t).
  double left_cdf(double t) const
  {
    require_nonempty("left_cdf");
    auto it = std::lower_bound(values_.begin(), values_.end(), t);
    if (it == values_.begin())
      return 0.0;
    return cum_[static_cast<std::size_t>(it - values_.begin()) - 1];
  }

  //! inf{x : p <= F(x)} for p in (0, 1].
  double quantile(double p) const
  {
    require_nonempty("quantile");
    if (!(p > 0.0 && p <= 1.0))
      throw std::invalid_argument("quantile: p must lie in (0, 1]");
    auto it = std::lower_bound(cum_.begin(), cum_.end(), p);
    if (it == cum_.end())
      return values_.back();
    return values_[static_cast<std::size_t>(it - cum_.begin())];
  }

  //! Right-continuous realization F^[-1](p+) for p in [0, 1); +inf at p = 1.
  double quantile_right(double p) const
  {
    require_nonempty("quantile_right");
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument("quantile_right: p must lie in [0, 1]");
    if (p >= 1.0)
      return std::numeric_limits<double>::infinity();
    auto it = std::upper_bound(cum_.begin(), cum_.end(), p);
    if (it == cum_.end())
      return std::numeric_limits<double>::infinity();
    return values_[static_cast<std::size_t>(it - cum_.begin())];
  }

  double mean() const
  {
    require_nonempty("mean");
    double m = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i)
      m += weights_[i] * values_[i];
    return m;
  }

  //! Mixture sum_k p_k * dists[k].
  static EmpiricalDistribution mixture(
    std::span<const EmpiricalDistribution> dists,
    std::span<const double> probs)
  {
    if (dists.size() != probs.size())
      throw std::invalid_argument("mixture: size mismatch");
    std::vector<double> xs, ws;
    for (std::size_t k = 0; k < dists.size(); ++k) {
      dists[k].require_nonempty("mixture");
      for (std::size_t i = 0; i < dists[k].size(); ++i) {
        xs.push_back(dists[k].values_[i]);
        ws.push_back(probs[k] * dists[k].weights_[i]);
      }
    }
    return EmpiricalDistribution(xs, ws);
  }

private:
  void require_nonempty(const char* what) const
  {
    if (values_.empty())
      throw std::invalid_argument(std::string(what) + ": empty distribution");
  }

  void build(std::span<const double> xs, std::span<const double> ws)
  {
    if (xs.empty())
      return;
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{ 0 });
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
      return xs[a] < xs[b];
    });
    double total = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!std::isfinite(xs[i]))
        throw std::invalid_argument("EmpiricalDistribution: non-finite value");
      if (!(ws[i] >= 0.0) || !std::isfinite(ws[i]))
        throw std::invalid_argument("EmpiricalDistribution: negative weight");
      total += ws[i];
    }
    if (!(total > 0.0))
      throw std::invalid_argument("EmpiricalDistribution: zero total weight");

    for (auto idx : order) {
      const double w = ws[idx] / total;
      if (w == 0.0)
        continue;
      if (!values_.empty() && xs[idx] - values_.back() <= kAtomMergeTol) {
        weights_.back() += w;
      } else {
        values_.push_back(xs[idx]);
        weights_.push_back(w);
      }
    }
    cum_.resize(weights_.size());
    double c = 0.0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      c += weights_[i];
      cum_[i] = c;
    }
    cum_.back() = 1.0;
  }

  std::vector<double> values_;
  std::vector<double> weights_;
  std::vector<double> cum_;
};

namespace detail {

// Walks the merged breakpoints of two quantile functions; calls
// f(q0, q1, dp) for every piece of (0, 1] where both are constant.
template<typename F>
void for_each_quantile_piece(const EmpiricalDistribution& d0,
                             const EmpiricalDistribution& d1,
                             F&& f)
{
  const auto& c0 = d0.cumulative();
  const auto& c1 = d1.cumulative();
  const auto& v0 = d0.values();
  const auto& v1 = d1.values();
  std::size_t i = 0, j = 0;
  double prev = 0.0;
  while (i < c0.size() && j < c1.size()) {
    const double next = std::min(c0[i], c1[j]);
    if (next > prev)
      f(v0[i], v1[j], next - prev);
    prev = next;
    if (c0[i] == next)
      ++i;
    if (c1[j] == next)
      ++j;
  }
}

inline void require_nonempty(const EmpiricalDistribution& d, const char* what)
{
  if (d.empty())
    throw std::invalid_argument(std::string(what) + ": empty distribution");
}

} // namespace detail

//! int_0^1 h(F0^[-1](p) - F1^[-1](p)) dp via the monotone coupling.
inline double transport_cost(const EmpiricalDistribution& d0,
                             const EmpiricalDistribution& d1,
                             CostFunction cost)
{
  if (cost.kind == CostKind::abs_log_ratio)
    throw std::invalid_argument(
      "transport_cost: only abs and square costs are supported");
  detail::require_nonempty(d0, "transport_cost");
  detail::require_nonempty(d1, "transport_cost");
  double total = 0.0;
  detail::for_each_quantile_piece(
    d0, d1, [&](double a, double b, double dp) { total += cost.h(a - b) * dp; });
  return total;
}

inline double wasserstein1(const EmpiricalDistribution& d0,
                           const EmpiricalDistribution& d1)
{
  return transport_cost(d0, d1, CostFunction{ CostKind::abs });
}

//! sup_t |F0(t) - F1(t)|, attained at one of the atoms.
inline double ks_distance(const EmpiricalDistribution& d0,
                          const EmpiricalDistribution& d1)
{
  detail::require_nonempty(d0, "ks_distance");
  detail::require_nonempty(d1, "ks_distance");
  double best = 0.0;
  for (double t : d0.values())
    best = std::max(best, std::abs(d0.cdf(t) - d1.cdf(t)));
  for (double t : d1.values())
    best = std::max(best, std::abs(d0.cdf(t) - d1.cdf(t)));
  return best;
}

} // namespace fairfront
