#pragma once

// Exact bias metrics on grouped scores. Group 0 is the non-protected class;
// the favourable outcome is a score strictly above the threshold.

#include "fairfront/distributions.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <variant>
#include <vector>

namespace fairfront {

//! Per-group score distributions plus group probabilities.
class GroupedScores
{
public:
  GroupedScores() = default;

  //! Probabilities default to the relative group sizes.
  explicit GroupedScores(std::vector<std::vector<double>> scores_by_group)
  {
    double n = 0.0;
    for (const auto& s : scores_by_group)
      n += static_cast<double>(s.size());
    std::vector<double> probs;
    for (const auto& s : scores_by_group)
      probs.push_back(n > 0.0 ? static_cast<double>(s.size()) / n : 0.0);
    init(scores_by_group, probs);
  }

  GroupedScores(std::vector<std::vector<double>> scores_by_group,
                std::vector<double> group_probs)
  {
    init(scores_by_group, group_probs);
  }

  static GroupedScores from_distributions(std::vector<EmpiricalDistribution> dists,
                                          std::vector<double> group_probs)
  {
    GroupedScores g;
    g.dists_ = std::move(dists);
    g.probs_ = std::move(group_probs);
    g.validate();
    return g;
  }

  //! Splits per-record scores by integer group label in [0, K).
  static GroupedScores from_labels(std::span<const double> scores,
                                   std::span<const int> groups,
                                   int n_groups)
  {
    if (scores.size() != groups.size())
      throw std::invalid_argument("GroupedScores: scores/groups size mismatch");
    std::vector<std::vector<double>> by(static_cast<std::size_t>(n_groups));
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (groups[i] < 0 || groups[i] >= n_groups)
        throw std::invalid_argument("GroupedScores: group label out of range");
      by[static_cast<std::size_t>(groups[i])].push_back(scores[i]);
    }
    return GroupedScores(std::move(by));
  }

  std::size_t n_groups() const { return dists_.size(); }
  const EmpiricalDistribution& group(std::size_t k) const { return dists_.at(k); }
  const std::vector<EmpiricalDistribution>& groups() const { return dists_; }
  const std::vector<double>& probs() const { return probs_; }

  //! sum_k p_k P_{Z_k}.
  EmpiricalDistribution pooled() const
  {
    return EmpiricalDistribution::mixture(dists_, probs_);
  }

private:
  void init(const std::vector<std::vector<double>>& scores,
            const std::vector<double>& probs)
  {
    for (const auto& s : scores) {
      if (s.empty())
        throw std::invalid_argument("GroupedScores: empty group");
      dists_.emplace_back(std::span<const double>(s));
    }
    probs_ = probs;
    validate();
  }

  void validate() const
  {
    if (dists_.size() < 2)
      throw std::invalid_argument("GroupedScores: need at least two groups");
    if (probs_.size() != dists_.size())
      throw std::invalid_argument("GroupedScores: probability count mismatch");
    double total = 0.0;
    for (std::size_t k = 0; k < dists_.size(); ++k) {
      if (dists_[k].empty())
        throw std::invalid_argument("GroupedScores: empty group");
      if (!(probs_[k] >= 0.0))
        throw std::invalid_argument("GroupedScores: negative probability");
      total += probs_[k];
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw std::invalid_argument("GroupedScores: probabilities must sum to 1");
  }

  std::vector<EmpiricalDistribution> dists_;
  std::vector<double> probs_;
};

//! Threshold distribution mu weighting each decision threshold.
struct ThresholdMeasure
{
  struct Uniform01
  {};
  struct PooledScores
  {};

  std::variant<Uniform01, EmpiricalDistribution, PooledScores> kind{ Uniform01{} };

  static ThresholdMeasure uniform01() { return {}; }
  static ThresholdMeasure empirical(EmpiricalDistribution d)
  {
    ThresholdMeasure m;
    m.kind = std::move(d);
    return m;
  }
  static ThresholdMeasure pooled_scores()
  {
    ThresholdMeasure m;
    m.kind = PooledScores{};
    return m;
  }
};

namespace detail {

inline void require_two_groups(const GroupedScores& g, const char* what)
{
  if (g.n_groups() != 2)
    throw std::invalid_argument(std::string(what) + ": exactly two groups required");
}

inline double atom_sum(const EmpiricalDistribution& d0,
                       const EmpiricalDistribution& d1,
                       const EmpiricalDistribution& mu,
                       const CostFunction& c)
{
  double total = 0.0;
  for (std::size_t j = 0; j < mu.size(); ++j) {
    const double t = mu.values()[j];
    total += mu.weights()[j] * c(d0.cdf(t), d1.cdf(t));
  }
  return total;
}

//! int_0^1 c(F0(t), F1(t)) dt over the piecewise-constant breakpoint grid.
inline double uniform_integral(const EmpiricalDistribution& d0,
                               const EmpiricalDistribution& d1,
                               const CostFunction& c)
{
  std::vector<double> cuts{ 0.0, 1.0 };
  for (const auto* d : { &d0, &d1 })
    for (double v : d->values())
      if (v > 0.0 && v < 1.0)
        cuts.push_back(v);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double a = cuts[i];
    total += (cuts[i + 1] - a) * c(d0.cdf(a), d1.cdf(a));
  }
  return total;
}

//! Invariant bias after transforming scores by an arbitrary map of the
//! pooled distribution; used for the left- and right-continuous variants.
template<typename Transform>
double transformed_w1(const EmpiricalDistribution& d0,
                      const EmpiricalDistribution& d1,
                      Transform&& tr)
{
  auto map = [&](const EmpiricalDistribution& d) {
    std::vector<double> v(d.size());
    for (std::size_t i = 0; i < d.size(); ++i)
      v[i] = tr(d.values()[i]);
    return EmpiricalDistribution(v, d.weights());
  };
  return wasserstein1(map(d0), map(d1));
}

//! Right-continuous transform F(Z); differs from the atom-aware version.
inline double invariant_bias_right_continuous(const GroupedScores& g,
                                              const EmpiricalDistribution& pooled)
{
  require_two_groups(g, "invariant_bias");
  return transformed_w1(g.group(0), g.group(1),
                        [&](double z) { return pooled.cdf(z); });
}

} // namespace detail

//! c(P(Z0 > t), P(Z1 > t)).
inline double classifier_bias(const GroupedScores& g, double t, const CostFunction& c)
{
  detail::require_two_groups(g, "classifier_bias");
  return c(1.0 - g.group(0).cdf(t), 1.0 - g.group(1).cdf(t));
}

//! E_{t ~ mu}[c(F0(t), F1(t))], computed exactly.
inline double cost_bias(const GroupedScores& g,
                        const CostFunction& c,
                        const ThresholdMeasure& mu)
{
  detail::require_two_groups(g, "cost_bias");
  const auto& d0 = g.group(0);
  const auto& d1 = g.group(1);
  if (std::holds_alternative<ThresholdMeasure::Uniform01>(mu.kind))
    return detail::uniform_integral(d0, d1, c);
  if (const auto* e = std::get_if<EmpiricalDistribution>(&mu.kind)) {
    if (e->empty())
      throw std::invalid_argument("cost_bias: empty threshold distribution");
    return detail::atom_sum(d0, d1, *e, c);
  }
  return detail::atom_sum(d0, d1, g.pooled(), c);
}

//! W1 of the left-continuous pooled-CDF transforms of both groups.
inline double invariant_bias(const GroupedScores& g, const EmpiricalDistribution& pooled)
{
  detail::require_two_groups(g, "invariant_bias");
  if (pooled.empty())
    throw std::invalid_argument("invariant_bias: empty pooled distribution");
  return detail::transformed_w1(g.group(0), g.group(1),
                                [&](double z) { return pooled.left_cdf(z); });
}

inline double invariant_bias(const GroupedScores& g)
{
  return invariant_bias(g, g.pooled());
}

//! int |F0 - F1| dP_Z as a sum over pooled atoms.
inline double invariant_bias_direct(const GroupedScores& g,
                                    const EmpiricalDistribution& pooled)
{
  detail::require_two_groups(g, "invariant_bias");
  if (pooled.empty())
    throw std::invalid_argument("invariant_bias: empty pooled distribution");
  return detail::atom_sum(g.group(0), g.group(1), pooled, CostFunction{ CostKind::abs });
}

//! Pairwise metric used by multi_attribute_bias.
struct PairwiseMetric
{
  enum class Kind
  {
    wasserstein1,
    cost_bias
  };
  Kind kind{ Kind::wasserstein1 };
  CostFunction cost{};
  ThresholdMeasure mu{};

  double operator()(const GroupedScores& pair) const
  {
    if (kind == Kind::wasserstein1)
      return wasserstein1(pair.group(0), pair.group(1));
    return cost_bias(pair, cost, mu);
  }
};

//! sum_{k>=1} w_k Bias(group 0, group k).
inline double multi_attribute_bias(const GroupedScores& g,
                                   const PairwiseMetric& metric,
                                   std::span<const double> weights)
{
  if (weights.size() + 1 != g.n_groups())
    throw std::invalid_argument("multi_attribute_bias: need one weight per protected group");
  double total = 0.0;
  for (std::size_t k = 1; k < g.n_groups(); ++k) {
    if (weights[k - 1] < 0.0)
      throw std::invalid_argument("multi_attribute_bias: negative weight");
    double p0 = g.probs()[0], pk = g.probs()[k];
    if (p0 + pk <= 0.0)
      p0 = pk = 0.5;
    auto pair = GroupedScores::from_distributions({ g.group(0), g.group(k) },
                                                 { p0 / (p0 + pk), pk / (p0 + pk) });
    total += weights[k - 1] * metric(pair);
  }
  return total;
}

} // namespace fairfront
