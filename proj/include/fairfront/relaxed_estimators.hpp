#pragma once

// Differentiable estimators of relaxed bias metrics for linear families
// f(x; theta) = f*(x) - theta . w(x). Every estimator returns its value and
// the exact derivative with respect to each score that entered it; the
// family turns those per-score coefficients into a theta gradient.

#include "fairfront/bias_metrics.hpp"
#include "fairfront/distributions.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairfront {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline double sigmoid(double x)
{
  if (x >= 0.0)
    return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

//! log(1 + e^x) without overflow.
inline double softplus(double x)
{
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

enum class RelaxationKind
{
  ramp,
  shifted_logistic,
  logistic
};

//! Smooth nondecreasing surrogate r_s of the Heaviside step.
struct RelaxationFamily
{
  RelaxationKind kind{ RelaxationKind::logistic };
  double s{ 20.0 };

  void validate() const
  {
    if (!(s > 0.0) || !std::isfinite(s))
      throw std::invalid_argument("relaxation: scale s must be positive");
  }

  double shift() const
  {
    return kind == RelaxationKind::shifted_logistic ? 1.0 / std::sqrt(s) : 0.0;
  }

  double value(double z) const
  {
    switch (kind) {
      case RelaxationKind::ramp:
        return std::clamp(s * z, 0.0, 1.0);
      case RelaxationKind::shifted_logistic:
        return sigmoid(s * (z - shift()));
      case RelaxationKind::logistic:
        return sigmoid(s * z);
    }
    return 0.0;
  }

  double derivative(double z) const
  {
    if (kind == RelaxationKind::ramp)
      return (z > 0.0 && s * z < 1.0) ? s : 0.0;
    const double p = value(z);
    return s * p * (1.0 - p);
  }

  double lipschitz() const { return kind == RelaxationKind::ramp ? s : s / 4.0; }
};

inline RelaxationKind relaxation_kind_from_string(const std::string& k)
{
  if (k == "ramp")
    return RelaxationKind::ramp;
  if (k == "shifted-logistic")
    return RelaxationKind::shifted_logistic;
  if (k == "logistic")
    return RelaxationKind::logistic;
  throw std::invalid_argument("unknown relaxation: " + k);
}

inline const char* to_string(RelaxationKind k)
{
  switch (k) {
    case RelaxationKind::ramp:
      return "ramp";
    case RelaxationKind::shifted_logistic:
      return "shifted-logistic";
    case RelaxationKind::logistic:
      return "logistic";
  }
  return "?";
}

//! 1 - mean_i r_s(z_i - t).
inline double relaxed_cdf(std::span<const double> scores, double t, const RelaxationFamily& r)
{
  if (scores.empty())
    throw std::invalid_argument("relaxed_cdf: empty scores");
  r.validate();
  double acc = 0.0;
  for (double z : scores)
    acc += r.value(z - t);
  return 1.0 - acc / static_cast<double>(scores.size());
}

enum class Link
{
  identity,
  logistic
};

//! Post-processing search space f(x; theta) = f*(x) - theta . w(x).
struct LinearFamily
{
  Eigen::VectorXd base_scores;
  RowMatrix encoders; // column 0 identically 1
  Eigen::VectorXd theta_lo;
  Eigen::VectorXd theta_hi;
  Link link{ Link::logistic };

  LinearFamily() = default;

  LinearFamily(Eigen::VectorXd base, RowMatrix w, Link l = Link::logistic, double box = 100.0)
    : base_scores(std::move(base))
    , encoders(std::move(w))
    , link(l)
  {
    theta_lo = Eigen::VectorXd::Constant(encoders.cols(), -box);
    theta_hi = Eigen::VectorXd::Constant(encoders.cols(), box);
    validate();
  }

  Eigen::Index n_records() const { return base_scores.size(); }
  Eigen::Index dim() const { return encoders.cols(); }

  void validate() const
  {
    if (encoders.rows() != base_scores.size())
      throw std::invalid_argument("LinearFamily: encoder rows must match record count");
    if (encoders.cols() < 1)
      throw std::invalid_argument("LinearFamily: encoder matrix needs the constant column");
    for (Eigen::Index i = 0; i < encoders.rows(); ++i)
      if (encoders(i, 0) != 1.0)
        throw std::invalid_argument("LinearFamily: first encoder column must be 1");
    if (theta_lo.size() != encoders.cols() || theta_hi.size() != encoders.cols())
      throw std::invalid_argument("LinearFamily: theta box dimension mismatch");
    for (Eigen::Index j = 0; j < theta_lo.size(); ++j)
      if (!(theta_lo[j] <= theta_hi[j]))
        throw std::invalid_argument("LinearFamily: empty theta box coordinate");
  }

  double raw(std::size_t i, const Eigen::VectorXd& theta) const
  {
    const auto ii = static_cast<Eigen::Index>(i);
    return base_scores[ii] - encoders.row(ii).dot(theta);
  }

  //! Score on which thresholds act: sigma(raw) for the logistic link.
  double score(std::size_t i, const Eigen::VectorXd& theta) const
  {
    const double f = raw(i, theta);
    return link == Link::logistic ? sigmoid(f) : f;
  }

  //! d score / d raw.
  static double score_slope(Link l, double u) { return l == Link::logistic ? u * (1.0 - u) : 1.0; }

  Eigen::VectorXd project(Eigen::VectorXd theta) const
  {
    for (Eigen::Index j = 0; j < theta.size(); ++j)
      theta[j] = std::clamp(theta[j], theta_lo[j], theta_hi[j]);
    return theta;
  }

  //! grad += sum_k coef_k * d score(idx_k) / d theta.
  void accumulate_grad(std::span<const std::size_t> idx,
                       std::span<const double> scores,
                       std::span<const double> coef,
                       Eigen::VectorXd& grad) const
  {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (coef[k] == 0.0)
        continue;
      const double c = coef[k] * score_slope(link, scores[k]);
      grad.noalias() -= c * encoders.row(static_cast<Eigen::Index>(idx[k])).transpose();
    }
  }
};

struct ValueGrad
{
  double value{ 0.0 };
  Eigen::VectorXd grad;
};

//! mean_{G=1} r_s(f - t) - mean_{G=0} r_s(f - t) and its theta gradient.
inline ValueGrad b_hat(const LinearFamily& family,
                       const Eigen::VectorXd& theta,
                       std::span<const std::size_t> group0,
                       std::span<const std::size_t> group1,
                       double t,
                       const RelaxationFamily& r)
{
  if (group0.empty() || group1.empty())
    throw std::invalid_argument("b_hat: empty group in batch");
  r.validate();
  ValueGrad out;
  out.grad = Eigen::VectorXd::Zero(family.dim());
  auto side = [&](std::span<const std::size_t> idx, double sign) {
    const double inv = 1.0 / static_cast<double>(idx.size());
    std::vector<double> u(idx.size()), c(idx.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      u[k] = family.score(idx[k], theta);
      acc += r.value(u[k] - t);
      c[k] = sign * inv * r.derivative(u[k] - t);
    }
    family.accumulate_grad(idx, u, c, out.grad);
    return acc * inv;
  };
  const double a1 = side(group1, 1.0);
  const double a0 = side(group0, -1.0);
  out.value = a1 - a0;
  return out;
}

enum class EstimatorVariant
{
  threshold_mc,
  threshold_discrete,
  threshold_discrete_trapezoid,
  energy,
  invariant_mc,
  invariant_kde_discrete,
  invariant_energy_relaxed
};

inline EstimatorVariant estimator_variant_from_string(const std::string& v)
{
  static const std::pair<const char*, EstimatorVariant> table[] = {
    { "threshold-mc", EstimatorVariant::threshold_mc },
    { "mc", EstimatorVariant::threshold_mc },
    { "threshold-discrete", EstimatorVariant::threshold_discrete },
    { "threshold-discrete-trapezoid", EstimatorVariant::threshold_discrete_trapezoid },
    { "discrete", EstimatorVariant::threshold_discrete_trapezoid },
    { "energy", EstimatorVariant::energy },
    { "invariant-mc", EstimatorVariant::invariant_mc },
    { "invariant-kde-discrete", EstimatorVariant::invariant_kde_discrete },
    { "invariant-energy-relaxed", EstimatorVariant::invariant_energy_relaxed },
  };
  for (const auto& [name, e] : table)
    if (v == name)
      return e;
  throw std::invalid_argument("unknown estimator variant: " + v);
}

inline const char* to_string(EstimatorVariant v)
{
  switch (v) {
    case EstimatorVariant::threshold_mc:
      return "threshold-mc";
    case EstimatorVariant::threshold_discrete:
      return "threshold-discrete";
    case EstimatorVariant::threshold_discrete_trapezoid:
      return "threshold-discrete-trapezoid";
    case EstimatorVariant::energy:
      return "energy";
    case EstimatorVariant::invariant_mc:
      return "invariant-mc";
    case EstimatorVariant::invariant_kde_discrete:
      return "invariant-kde-discrete";
    case EstimatorVariant::invariant_energy_relaxed:
      return "invariant-energy-relaxed";
  }
  return "?";
}

inline bool is_energy(EstimatorVariant v)
{
  return v == EstimatorVariant::energy || v == EstimatorVariant::invariant_energy_relaxed;
}

//! Needs a held-out sample of pooled scores (thresholds or KDE centres).
inline bool uses_pooled_sample(EstimatorVariant v)
{
  return v == EstimatorVariant::invariant_mc || v == EstimatorVariant::invariant_kde_discrete ||
         v == EstimatorVariant::invariant_energy_relaxed;
}

struct BiasEstimatorSpec
{
  EstimatorVariant variant{ EstimatorVariant::threshold_discrete_trapezoid };
  RelaxationFamily relaxation{};
  CostFunction cost{ CostKind::square };
  std::size_t n_thresholds{ 256 }; // T for the Monte Carlo variants
  double dt{ 1.0 / 129.0 };        // grid step for the discrete variants
  bool trapezoid{ true };          // invariant-kde-discrete grid rule
  double kde_bandwidth{ 0.0 };     // 0 selects Silverman's rule
  bool unbiased_square{ false };
  std::function<double(double)> density; // rho(t); empty means 1
  std::uint64_t seed{ 0 };

  void validate() const
  {
    relaxation.validate();
    if (!cost.is_difference_form())
      throw std::invalid_argument("estimator: cost must be of h-form (abs or square)");
    if (is_energy(variant) && cost.kind != CostKind::square)
      throw std::invalid_argument("estimator: energy variants require the square cost");
    if (variant == EstimatorVariant::threshold_mc && n_thresholds < 2)
      throw std::invalid_argument("estimator: need at least 2 thresholds");
    if (!(dt > 0.0 && dt < 1.0))
      throw std::invalid_argument("estimator: grid step must lie in (0, 1)");
    if (kde_bandwidth < 0.0)
      throw std::invalid_argument("estimator: negative KDE bandwidth");
  }
};

//! Scores entering one estimator evaluation; coefficient vectors receive
//! d value / d score for each entry.
struct EstimatorInput
{
  std::span<const double> u0, u1;
  std::span<const double> pooled; // thresholds (invariant-mc, energy-relaxed)
  std::span<const double> kde;    // KDE centres (invariant-kde-discrete)
};

struct EstimatorCoefs
{
  std::vector<double> c0, c1, cp, ck;
};

namespace detail {

struct Grid
{
  std::vector<double> nodes, weights;
};

//! Partition 0 = p_0 < ... < p_J = 1 with step dt (last step may be short).
inline Grid make_grid(double dt, bool trapezoid)
{
  const auto J = static_cast<std::size_t>(std::ceil(1.0 / dt - 1e-9));
  std::vector<double> p(J + 1);
  for (std::size_t j = 0; j <= J; ++j)
    p[j] = std::min(static_cast<double>(j) * dt, 1.0);
  p[J] = 1.0;
  Grid g;
  if (!trapezoid) {
    for (std::size_t j = 1; j <= J; ++j) {
      g.nodes.push_back(p[j]);
      g.weights.push_back(p[j] - p[j - 1]);
    }
    return g;
  }
  for (std::size_t j = 0; j <= J; ++j) {
    const double left = j > 0 ? p[j] - p[j - 1] : 0.0;
    const double right = j < J ? p[j + 1] - p[j] : 0.0;
    g.nodes.push_back(p[j]);
    g.weights.push_back(0.5 * (left + right));
  }
  return g;
}

struct GroupSums
{
  double S{ 0.0 }, Q{ 0.0 };
};

inline double term_value(const CostFunction& h, bool unbiased, const GroupSums& g0,
                         const GroupSums& g1, double m0, double m1)
{
  const double A0 = g0.S / m0, A1 = g1.S / m1;
  if (unbiased && h.kind == CostKind::square) {
    const double U0 = (g0.S * g0.S - g0.Q) / (m0 * (m0 - 1.0));
    const double U1 = (g1.S * g1.S - g1.Q) / (m1 * (m1 - 1.0));
    return U1 + U0 - 2.0 * A1 * A0;
  }
  return h.h(A1 - A0);
}

// value = sum_j weight_j H(t_j), H(t) = h(B_hat(t)). Adds dvalue/du into
// c0/c1 (when non-null), fills H and dH/dt per threshold.
inline double threshold_terms(const BiasEstimatorSpec& spec,
                              std::span<const double> u0,
                              std::span<const double> u1,
                              std::span<const double> ts,
                              std::span<const double> wts,
                              std::vector<double>* c0,
                              std::vector<double>* c1,
                              std::vector<double>* H,
                              std::vector<double>* dHdt)
{
  const auto& r = spec.relaxation;
  const auto& h = spec.cost;
  const bool unbiased = spec.unbiased_square && h.kind == CostKind::square;
  const double m0 = static_cast<double>(u0.size());
  const double m1 = static_cast<double>(u1.size());
  if (unbiased && (u0.size() < 2 || u1.size() < 2))
    throw std::invalid_argument("estimator: unbiased square correction needs >= 2 scores per group");
  const bool want_grad = c0 != nullptr;
  std::vector<double> r0(u0.size()), r1(u1.size()), d0(u0.size()), d1(u1.size());
  if (H)
    H->assign(ts.size(), 0.0);
  if (dHdt)
    dHdt->assign(ts.size(), 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < ts.size(); ++j) {
    const double t = ts[j];
    GroupSums s0, s1;
    for (std::size_t i = 0; i < u0.size(); ++i) {
      r0[i] = r.value(u0[i] - t);
      s0.S += r0[i];
      s0.Q += r0[i] * r0[i];
      if (want_grad || dHdt)
        d0[i] = r.derivative(u0[i] - t);
    }
    for (std::size_t i = 0; i < u1.size(); ++i) {
      r1[i] = r.value(u1[i] - t);
      s1.S += r1[i];
      s1.Q += r1[i] * r1[i];
      if (want_grad || dHdt)
        d1[i] = r.derivative(u1[i] - t);
    }
    const double Hj = term_value(h, unbiased, s0, s1, m0, m1);
    if (H)
      (*H)[j] = Hj;
    total += wts[j] * Hj;
    if (!want_grad && !dHdt)
      continue;
    // dH/du_ki = a_k(i) * r'(u_ki - t); a_k(i) may depend on r_ki.
    const double A0 = s0.S / m0, A1 = s1.S / m1;
    double dt_acc = 0.0;
    auto coef0 = [&](std::size_t i) {
      if (unbiased)
        return 2.0 * (s0.S - r0[i]) / (m0 * (m0 - 1.0)) - 2.0 * A1 / m0;
      return -h.dh(A1 - A0) / m0;
    };
    auto coef1 = [&](std::size_t i) {
      if (unbiased)
        return 2.0 * (s1.S - r1[i]) / (m1 * (m1 - 1.0)) - 2.0 * A0 / m1;
      return h.dh(A1 - A0) / m1;
    };
    for (std::size_t i = 0; i < u0.size(); ++i) {
      const double g = coef0(i) * d0[i];
      if (want_grad)
        (*c0)[i] += wts[j] * g;
      dt_acc -= g;
    }
    for (std::size_t i = 0; i < u1.size(); ++i) {
      const double g = coef1(i) * d1[i];
      if (want_grad)
        (*c1)[i] += wts[j] * g;
      dt_acc -= g;
    }
    if (dHdt)
      (*dHdt)[j] = dt_acc;
  }
  return total;
}

// Ramp relaxation: sum r and sum r^2 over sorted scores via prefix sums.
struct SortedRampSums
{
  std::vector<double> z, P1, P2;

  explicit SortedRampSums(std::span<const double> u)
    : z(u.begin(), u.end())
  {
    std::sort(z.begin(), z.end());
    P1.assign(z.size() + 1, 0.0);
    P2.assign(z.size() + 1, 0.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      P1[i + 1] = P1[i] + z[i];
      P2[i + 1] = P2[i] + z[i] * z[i];
    }
  }

  GroupSums at(double t, double s) const
  {
    const auto lo = static_cast<std::size_t>(std::upper_bound(z.begin(), z.end(), t) - z.begin());
    const auto hi =
      static_cast<std::size_t>(std::lower_bound(z.begin(), z.end(), t + 1.0 / s) - z.begin());
    GroupSums g;
    const double n_full = static_cast<double>(z.size() - std::max(hi, lo));
    double s1 = 0.0, s2 = 0.0;
    if (hi > lo) {
      const double n = static_cast<double>(hi - lo);
      const double a = P1[hi] - P1[lo];
      const double b = P2[hi] - P2[lo];
      s1 = s * (a - t * n);
      s2 = s * s * (b - 2.0 * t * a + t * t * n);
    }
    g.S = n_full + s1;
    g.Q = n_full + s2;
    return g;
  }
};

inline double threshold_terms_ramp_fast(const BiasEstimatorSpec& spec,
                                        std::span<const double> u0,
                                        std::span<const double> u1,
                                        std::span<const double> ts,
                                        std::span<const double> wts)
{
  const bool unbiased = spec.unbiased_square && spec.cost.kind == CostKind::square;
  if (unbiased && (u0.size() < 2 || u1.size() < 2))
    throw std::invalid_argument("estimator: unbiased square correction needs >= 2 scores per group");
  const SortedRampSums a(u0), b(u1);
  const double s = spec.relaxation.s;
  const double m0 = static_cast<double>(u0.size()), m1 = static_cast<double>(u1.size());
  double total = 0.0;
  for (std::size_t j = 0; j < ts.size(); ++j)
    total += wts[j] * term_value(spec.cost, unbiased, a.at(ts[j], s), b.at(ts[j], s), m0, m1);
  return total;
}

//! sum_{i,j} |a_i - b_j|; adds d/da_i (scaled by ga_scale) into ga.
inline double cross_abs_sum(std::span<const double> a, std::span<const double> b,
                            std::vector<double>* ga, double ga_scale)
{
  std::vector<double> sb(b.begin(), b.end());
  std::sort(sb.begin(), sb.end());
  std::vector<double> P(sb.size() + 1, 0.0);
  for (std::size_t i = 0; i < sb.size(); ++i)
    P[i + 1] = P[i] + sb[i];
  const double m = static_cast<double>(sb.size());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto lo = static_cast<std::size_t>(std::lower_bound(sb.begin(), sb.end(), a[i]) - sb.begin());
    const auto hi = static_cast<std::size_t>(std::upper_bound(sb.begin(), sb.end(), a[i]) - sb.begin());
    const double below = static_cast<double>(lo), above = m - static_cast<double>(hi);
    total += a[i] * below - P[lo] + (P.back() - P[hi]) - a[i] * above;
    if (ga)
      (*ga)[i] += ga_scale * (below - above);
  }
  return total;
}

// Energy statistic of transformed samples S0, S1 and dV/dS.
inline double energy_statistic(std::span<const double> S0, std::span<const double> S1,
                               bool unbiased, std::vector<double>* g0, std::vector<double>* g1)
{
  const double m0 = static_cast<double>(S0.size()), m1 = static_cast<double>(S1.size());
  if (unbiased && (S0.size() < 2 || S1.size() < 2))
    throw std::invalid_argument("energy: unbiased form needs >= 2 scores per group");
  const double n00 = unbiased ? m0 * (m0 - 1.0) : m0 * m0;
  const double n11 = unbiased ? m1 * (m1 - 1.0) : m1 * m1;
  const double cross_w = 2.0 / (m0 * m1);
  double v = cross_w * cross_abs_sum(S0, S1, g0, cross_w);
  if (g1)
    cross_abs_sum(S1, S0, g1, cross_w);
  v -= cross_abs_sum(S0, S0, g0, -2.0 / n00) / n00;
  v -= cross_abs_sum(S1, S1, g1, -2.0 / n11) / n11;
  return v;
}

struct MeanSd
{
  double mean{ 0.0 }, sd{ 0.0 };
};

inline MeanSd sample_sd(std::span<const double> x)
{
  const double n = static_cast<double>(x.size());
  MeanSd out;
  for (double v : x)
    out.mean += v;
  out.mean /= n;
  double ss = 0.0;
  for (double v : x)
    ss += (v - out.mean) * (v - out.mean);
  out.sd = x.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return out;
}

//! 1.06 sd N^(-1/5); falls back to 1e-3 for a degenerate sample.
inline double silverman_bandwidth(std::span<const double> x)
{
  const double bw = 1.06 * sample_sd(x).sd * std::pow(static_cast<double>(x.size()), -0.2);
  return bw > 0.0 ? bw : 1e-3;
}

inline std::vector<double> uniform_thresholds(std::size_t T, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::vector<double> t(T);
  for (auto& v : t)
    v = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  return t;
}

} // namespace detail

//! Estimator value; fills per-score coefficients when coefs is non-null.
inline double estimate(const BiasEstimatorSpec& spec, const EstimatorInput& in,
                       EstimatorCoefs* coefs = nullptr)
{
  spec.validate();
  if (in.u0.empty() || in.u1.empty())
    throw std::invalid_argument("estimator: empty group in batch");
  if (uses_pooled_sample(spec.variant)) {
    const auto& needed = spec.variant == EstimatorVariant::invariant_kde_discrete ? in.kde : in.pooled;
    if (needed.empty())
      throw std::invalid_argument(std::string("estimator: ") + to_string(spec.variant) +
                                  " needs a pooled-score sample");
  }
  if (coefs) {
    coefs->c0.assign(in.u0.size(), 0.0);
    coefs->c1.assign(in.u1.size(), 0.0);
    coefs->cp.assign(in.pooled.size(), 0.0);
    coefs->ck.assign(in.kde.size(), 0.0);
  }
  auto* c0 = coefs ? &coefs->c0 : nullptr;
  auto* c1 = coefs ? &coefs->c1 : nullptr;
  auto rho = [&](double t) { return spec.density ? spec.density(t) : 1.0; };
  const bool ramp_fast = !coefs && spec.relaxation.kind == RelaxationKind::ramp;

  switch (spec.variant) {
    case EstimatorVariant::threshold_mc: {
      const auto ts = detail::uniform_thresholds(spec.n_thresholds, spec.seed);
      std::vector<double> w(ts.size());
      for (std::size_t j = 0; j < ts.size(); ++j)
        w[j] = rho(ts[j]) / static_cast<double>(ts.size());
      if (ramp_fast)
        return detail::threshold_terms_ramp_fast(spec, in.u0, in.u1, ts, w);
      return detail::threshold_terms(spec, in.u0, in.u1, ts, w, c0, c1, nullptr, nullptr);
    }
    case EstimatorVariant::threshold_discrete:
    case EstimatorVariant::threshold_discrete_trapezoid: {
      auto g = detail::make_grid(spec.dt, spec.variant == EstimatorVariant::threshold_discrete_trapezoid);
      for (std::size_t j = 0; j < g.nodes.size(); ++j)
        g.weights[j] *= rho(g.nodes[j]);
      if (ramp_fast)
        return detail::threshold_terms_ramp_fast(spec, in.u0, in.u1, g.nodes, g.weights);
      return detail::threshold_terms(spec, in.u0, in.u1, g.nodes, g.weights, c0, c1, nullptr, nullptr);
    }
    case EstimatorVariant::invariant_mc: {
      const std::vector<double> w(in.pooled.size(), 1.0 / static_cast<double>(in.pooled.size()));
      std::vector<double> dHdt;
      const double v = detail::threshold_terms(spec, in.u0, in.u1, in.pooled, w, c0, c1, nullptr,
                                               coefs ? &dHdt : nullptr);
      if (coefs)
        for (std::size_t j = 0; j < dHdt.size(); ++j)
          coefs->cp[j] = w[j] * dHdt[j];
      return v;
    }
    case EstimatorVariant::invariant_kde_discrete: {
      const auto g = detail::make_grid(spec.dt, spec.trapezoid);
      const double bw = spec.kde_bandwidth > 0.0 ? spec.kde_bandwidth : detail::silverman_bandwidth(in.kde);
      const double N = static_cast<double>(in.kde.size());
      const double norm = 1.0 / (N * bw * std::sqrt(2.0 * std::numbers::pi));
      std::vector<double> dens(g.nodes.size(), 0.0), w(g.nodes.size());
      for (std::size_t j = 0; j < g.nodes.size(); ++j) {
        for (double c : in.kde) {
          const double z = (g.nodes[j] - c) / bw;
          dens[j] += norm * std::exp(-0.5 * z * z);
        }
        w[j] = g.weights[j] * dens[j];
      }
      std::vector<double> H;
      const double v = detail::threshold_terms(spec, in.u0, in.u1, g.nodes, w, c0, c1,
                                               coefs ? &H : nullptr, nullptr);
      if (coefs) {
        // direct dependence through the kernel centres, and d value / d bw
        double dbw = 0.0;
        for (std::size_t k = 0; k < in.kde.size(); ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < g.nodes.size(); ++j) {
            const double z = (g.nodes[j] - in.kde[k]) / bw;
            const double e = g.weights[j] * H[j] * norm * std::exp(-0.5 * z * z);
            acc += e * z / bw;
            dbw += e * (z * z - 1.0) / bw;
          }
          coefs->ck[k] = acc;
        }
        // Silverman's rule depends on the centres through their spread
        const auto sd = detail::sample_sd(in.kde);
        if (spec.kde_bandwidth <= 0.0 && sd.sd > 0.0) {
          const double dbw_dsd = 1.06 * std::pow(N, -0.2);
          for (std::size_t k = 0; k < in.kde.size(); ++k)
            coefs->ck[k] += dbw * dbw_dsd * (in.kde[k] - sd.mean) / ((N - 1.0) * sd.sd);
        }
      }
      return v;
    }
    case EstimatorVariant::energy: {
      std::vector<double> S0(in.u0.size()), S1(in.u1.size());
      for (std::size_t i = 0; i < S0.size(); ++i)
        S0[i] = std::clamp(in.u0[i], 0.0, 1.0);
      for (std::size_t i = 0; i < S1.size(); ++i)
        S1[i] = std::clamp(in.u1[i], 0.0, 1.0);
      const double v = detail::energy_statistic(S0, S1, spec.unbiased_square, c0, c1);
      if (coefs) {
        for (std::size_t i = 0; i < S0.size(); ++i)
          if (!(in.u0[i] > 0.0 && in.u0[i] < 1.0))
            coefs->c0[i] = 0.0;
        for (std::size_t i = 0; i < S1.size(); ++i)
          if (!(in.u1[i] > 0.0 && in.u1[i] < 1.0))
            coefs->c1[i] = 0.0;
      }
      return v;
    }
    case EstimatorVariant::invariant_energy_relaxed: {
      const auto& r = spec.relaxation;
      const double T = static_cast<double>(in.pooled.size());
      auto transform = [&](std::span<const double> u, std::vector<double>& S) {
        S.resize(u.size());
        for (std::size_t i = 0; i < u.size(); ++i) {
          double acc = 0.0;
          for (double t : in.pooled)
            acc += r.value(t - u[i]);
          S[i] = 1.0 - acc / T;
        }
      };
      std::vector<double> S0, S1, g0, g1;
      transform(in.u0, S0);
      transform(in.u1, S1);
      if (coefs) {
        g0.assign(S0.size(), 0.0);
        g1.assign(S1.size(), 0.0);
      }
      const double v = detail::energy_statistic(S0, S1, spec.unbiased_square,
                                                coefs ? &g0 : nullptr, coefs ? &g1 : nullptr);
      if (coefs) {
        auto chain = [&](std::span<const double> u, const std::vector<double>& g, std::vector<double>& cu) {
          for (std::size_t i = 0; i < u.size(); ++i) {
            if (g[i] == 0.0)
              continue;
            double acc = 0.0;
            for (std::size_t l = 0; l < in.pooled.size(); ++l) {
              const double d = r.derivative(in.pooled[l] - u[i]) / T;
              acc += d;
              coefs->cp[l] -= g[i] * d;
            }
            cu[i] = g[i] * acc;
          }
        };
        chain(in.u0, g0, coefs->c0);
        chain(in.u1, g1, coefs->c1);
      }
      return v;
    }
  }
  return 0.0;
}

//! Group-indexed record sample for one bias evaluation.
struct BiasBatch
{
  std::vector<std::size_t> group0, group1;
  std::vector<std::size_t> pooled; // held-out threshold sample
  std::vector<std::size_t> kde;    // held-out KDE sample
  std::uint64_t seed{ 0 };
};

//! Estimator value and exact theta gradient for a batch of records.
inline ValueGrad bias_value_and_grad(const BiasEstimatorSpec& spec,
                                     const LinearFamily& family,
                                     const Eigen::VectorXd& theta,
                                     const BiasBatch& batch,
                                     bool want_grad = true)
{
  auto scores = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> u(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k)
      u[k] = family.score(idx[k], theta);
    return u;
  };
  const auto u0 = scores(batch.group0), u1 = scores(batch.group1);
  const auto up = scores(batch.pooled), uk = scores(batch.kde);
  BiasEstimatorSpec local = spec;
  local.seed = spec.seed ^ batch.seed;
  EstimatorCoefs coefs;
  ValueGrad out;
  out.value = estimate(local, { u0, u1, up, uk }, want_grad ? &coefs : nullptr);
  out.grad = Eigen::VectorXd::Zero(family.dim());
  if (want_grad) {
    family.accumulate_grad(batch.group0, u0, coefs.c0, out.grad);
    family.accumulate_grad(batch.group1, u1, coefs.c1, out.grad);
    family.accumulate_grad(batch.pooled, up, coefs.cp, out.grad);
    family.accumulate_grad(batch.kde, uk, coefs.ck, out.grad);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convergence-rate harness

//! Score population with a known relaxed survival E r_s(Z - t).
struct ProbePopulation
{
  std::function<double(std::mt19937_64&)> draw;
  std::function<double(double, const RelaxationFamily&)> relaxed_survival;
};

inline double uniform_draw(std::mt19937_64& rng)
{
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

//! U(a, b); analytic survival for logistic and ramp relaxations.
inline ProbePopulation uniform_population(double a, double b)
{
  ProbePopulation p;
  p.draw = [a, b](std::mt19937_64& rng) { return a + (b - a) * uniform_draw(rng); };
  p.relaxed_survival = [a, b](double t, const RelaxationFamily& r) {
    const double s = r.s;
    if (r.kind == RelaxationKind::ramp) {
      // antiderivative of clamp(s(z - t), 0, 1) in z
      auto G = [&](double z) {
        const double x = s * (z - t);
        if (x <= 0.0)
          return 0.0;
        if (x >= 1.0)
          return (z - t) - 0.5 / s;
        return 0.5 * x * x / s;
      };
      return (G(b) - G(a)) / (b - a);
    }
    const double c = r.shift();
    return (softplus(s * (b - t - c)) - softplus(s * (a - t - c))) / (s * (b - a));
  };
  return p;
}

//! Uniform over the given atoms.
inline ProbePopulation discrete_population(std::vector<double> atoms)
{
  ProbePopulation p;
  auto shared = std::make_shared<std::vector<double>>(std::move(atoms));
  p.draw = [shared](std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, shared->size() - 1);
    return (*shared)[pick(rng)];
  };
  p.relaxed_survival = [shared](double t, const RelaxationFamily& r) {
    double acc = 0.0;
    for (double z : *shared)
      acc += r.value(z - t);
    return acc / static_cast<double>(shared->size());
  };
  return p;
}

//! int_0^1 h(F0^(s)(t) - F1^(s)(t)) rho(t) dt by composite Simpson.
inline double relaxed_bias_truth(const BiasEstimatorSpec& spec, const ProbePopulation& p0,
                                 const ProbePopulation& p1, std::size_t intervals = 1 << 14)
{
  if (intervals % 2)
    ++intervals;
  auto f = [&](double t) {
    const double B = p1.relaxed_survival(t, spec.relaxation) - p0.relaxed_survival(t, spec.relaxation);
    return spec.cost.h(B) * (spec.density ? spec.density(t) : 1.0);
  };
  const double hstep = 1.0 / static_cast<double>(intervals);
  double acc = f(0.0) + f(1.0);
  for (std::size_t i = 1; i < intervals; ++i)
    acc += (i % 2 ? 4.0 : 2.0) * f(static_cast<double>(i) * hstep);
  return acc * hstep / 3.0;
}

struct ProbeRung
{
  std::size_t m0{ 0 }, m1{ 0 }, T{ 0 };
};

struct ProbeRow
{
  std::size_t m0{ 0 }, m1{ 0 }, T{ 0 };
  double s{ 0.0 };
  double mse{ 0.0 }, bias{ 0.0 }, variance{ 0.0 };
};

//! m = ratio * T scores per group for each threshold count T.
inline std::vector<ProbeRung> mc_ladder(std::span<const std::size_t> Ts, double m_per_T = 1.0)
{
  std::vector<ProbeRung> out;
  for (auto T : Ts) {
    const auto m = static_cast<std::size_t>(std::max(2.0, std::round(m_per_T * static_cast<double>(T))));
    out.push_back({ m, m, T });
  }
  return out;
}

//! T / (1 + s) = c * sqrt(m), i.e. m = (T / (c (1 + s)))^2.
inline std::vector<ProbeRung> discrete_ladder(std::span<const std::size_t> Ts, double s, double c)
{
  std::vector<ProbeRung> out;
  for (auto T : Ts) {
    const double r = static_cast<double>(T) / (c * (1.0 + s));
    const auto m = static_cast<std::size_t>(std::max(2.0, std::round(r * r)));
    out.push_back({ m, m, T });
  }
  return out;
}

//! Empirical MSE of the estimator against the relaxed-metric truth.
inline std::vector<ProbeRow> estimator_rate_probe(const BiasEstimatorSpec& spec,
                                                  const ProbePopulation& p0,
                                                  const ProbePopulation& p1,
                                                  std::span<const ProbeRung> ladder,
                                                  std::size_t replications,
                                                  std::uint64_t seed)
{
  if (spec.variant != EstimatorVariant::threshold_mc && spec.variant != EstimatorVariant::threshold_discrete &&
      spec.variant != EstimatorVariant::threshold_discrete_trapezoid)
    throw std::invalid_argument("rate probe: only threshold variants have an exact truth");
  const double truth = relaxed_bias_truth(spec, p0, p1);
  std::vector<ProbeRow> rows;
  std::mt19937_64 rng(seed);
  for (const auto& rung : ladder) {
    BiasEstimatorSpec local = spec;
    if (spec.variant == EstimatorVariant::threshold_mc)
      local.n_thresholds = rung.T;
    else
      local.dt = 1.0 / static_cast<double>(rung.T);
    std::vector<double> u0(rung.m0), u1(rung.m1), vals(replications);
    for (std::size_t rep = 0; rep < replications; ++rep) {
      for (auto& v : u0)
        v = p0.draw(rng);
      for (auto& v : u1)
        v = p1.draw(rng);
      local.seed = rng();
      vals[rep] = estimate(local, { u0, u1, {}, {} });
    }
    ProbeRow row{ rung.m0, rung.m1, rung.T, spec.relaxation.s, 0.0, 0.0, 0.0 };
    double mean = 0.0;
    for (double v : vals) {
      row.mse += (v - truth) * (v - truth);
      mean += v;
    }
    const double n = static_cast<double>(replications);
    row.mse /= n;
    mean /= n;
    row.bias = mean - truth;
    for (double v : vals)
      row.variance += (v - mean) * (v - mean);
    row.variance /= std::max(1.0, n - 1.0);
    rows.push_back(row);
  }
  return rows;
}

//! Least-squares slope of log(y) against log(x).
inline double loglog_slope(std::span<const double> x, std::span<const double> y)
{
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("loglog_slope: need >= 2 matching points");
  double mx = 0.0, my = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

} // namespace fairfront
