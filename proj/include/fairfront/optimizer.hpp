#pragma once

// Projected SGD over theta for a sweep of bias penalisation coefficients.

#include "fairfront/relaxed_estimators.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairfront {

enum class ObjectiveForm
{
  penalized,  // (1 - omega) L + omega C B
  lagrangian  // L + omega B
};

enum class LossKind
{
  cross_entropy,
  distill
};

enum class OmegaScale
{
  one,
  loss_bias_ratio
};

inline ObjectiveForm objective_form_from_string(const std::string& s)
{
  if (s == "penalized")
    return ObjectiveForm::penalized;
  if (s == "lagrangian")
    return ObjectiveForm::lagrangian;
  throw std::invalid_argument("unknown objective form '" + s + "' (penalized, lagrangian)");
}

inline LossKind loss_kind_from_string(const std::string& s)
{
  if (s == "cross-entropy" || s == "ce")
    return LossKind::cross_entropy;
  if (s == "distill")
    return LossKind::distill;
  throw std::invalid_argument("unknown loss '" + s + "' (cross-entropy, distill)");
}

inline OmegaScale omega_scale_from_string(const std::string& s)
{
  if (s == "one")
    return OmegaScale::one;
  if (s == "loss-bias-ratio")
    return OmegaScale::loss_bias_ratio;
  throw std::invalid_argument("unknown omega scale '" + s + "' (one, loss-bias-ratio)");
}

inline const char* to_string(ObjectiveForm f) { return f == ObjectiveForm::penalized ? "penalized" : "lagrangian"; }
inline const char* to_string(LossKind k) { return k == LossKind::cross_entropy ? "cross-entropy" : "distill"; }
inline const char* to_string(OmegaScale s) { return s == OmegaScale::one ? "one" : "loss-bias-ratio"; }

struct SweepConfig
{
  std::vector<double> omegas; // empty: j / (n_omegas - 1), j = 0..n_omegas-1
  std::size_t n_omegas{ 21 };
  OmegaScale scale{ OmegaScale::loss_bias_ratio };
  double learning_rate{ 0.01 };
  std::size_t n_epochs{ 20 };
  std::size_t n_batches{ 0 }; // 0: ceil(N / n_perf)
  std::size_t n_perf{ 1024 };
  std::size_t n_bias{ 1024 };
  ObjectiveForm form{ ObjectiveForm::penalized };
  LossKind loss{ LossKind::cross_entropy };
  bool unbiased_square{ true };
  std::vector<char> fixed_mask; // 1 keeps that theta coordinate at its start value
  std::uint64_t seed{ 0 };

  void validate() const
  {
    for (std::size_t j = 0; j < omegas.size(); ++j) {
      if (!(omegas[j] >= 0.0) || !std::isfinite(omegas[j]))
        throw std::invalid_argument("SweepConfig: omegas must be finite and >= 0");
      if (j && omegas[j] < omegas[j - 1])
        throw std::invalid_argument("SweepConfig: omegas must be nondecreasing");
    }
    if (omegas.empty() && n_omegas < 1)
      throw std::invalid_argument("SweepConfig: need at least one omega");
    if (!(learning_rate > 0.0))
      throw std::invalid_argument("SweepConfig: learning_rate must be > 0");
    if (n_perf < 1 || n_bias < 1)
      throw std::invalid_argument("SweepConfig: batch sizes must be >= 1");
  }

  //! Grid in [0, 1] for the penalized form, scaled by C for the lagrangian form.
  std::vector<double> omega_grid(double C) const
  {
    if (!omegas.empty())
      return omegas;
    std::vector<double> w(n_omegas);
    for (std::size_t j = 0; j < n_omegas; ++j) {
      const double base = n_omegas == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(n_omegas - 1);
      w[j] = form == ObjectiveForm::lagrangian ? C * base : base;
    }
    return w;
  }
};

//! KL divergence of Bernoulli(p) from Bernoulli(q), both clamped to [1e-7, 1 - 1e-7].
inline double distill_loss(double p, double q)
{
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  p = std::clamp(p, lo, hi);
  q = std::clamp(q, lo, hi);
  return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
}

//! Everything the inner loop needs, evaluated once per dataset.
struct MitigationData
{
  LinearFamily family;
  std::vector<int> y;
  std::vector<int> g;
  int n_groups{ 2 };
  std::vector<double> teacher; // base probabilities for the distillation loss

  void validate() const
  {
    family.validate();
    const auto n = static_cast<std::size_t>(family.n_records());
    if (y.size() != n || g.size() != n)
      throw std::invalid_argument("MitigationData: labels and groups must align with the family");
    if (n_groups < 2)
      throw std::invalid_argument("MitigationData: need at least two groups");
    std::vector<std::size_t> counts(static_cast<std::size_t>(n_groups), 0);
    for (int v : g) {
      if (v < 0 || v >= n_groups)
        throw std::invalid_argument("MitigationData: group label out of range");
      ++counts[static_cast<std::size_t>(v)];
    }
    for (std::size_t k = 0; k < counts.size(); ++k)
      if (counts[k] == 0)
        throw std::invalid_argument("MitigationData: group " + std::to_string(k) + " has no records");
  }

  std::vector<std::vector<std::size_t>> group_index() const
  {
    std::vector<std::vector<std::size_t>> idx(static_cast<std::size_t>(n_groups));
    for (std::size_t i = 0; i < g.size(); ++i)
      idx[static_cast<std::size_t>(g[i])].push_back(i);
    return idx;
  }

  //! Protected-group weights p_k / sum_{k >= 1} p_k.
  std::vector<double> protected_weights() const
  {
    const auto idx = group_index();
    double total = 0.0;
    for (std::size_t k = 1; k < idx.size(); ++k)
      total += static_cast<double>(idx[k].size());
    std::vector<double> w;
    for (std::size_t k = 1; k < idx.size(); ++k)
      w.push_back(static_cast<double>(idx[k].size()) / total);
    return w;
  }
};

//! Record indices for one objective evaluation. bias[k] pairs group 0 with group k + 1.
struct ObjectiveBatch
{
  std::vector<std::size_t> perf;
  std::vector<BiasBatch> bias;
  std::vector<double> bias_weights;
};

struct ObjectiveValue
{
  double value{ 0.0 };
  double loss{ 0.0 };
  double bias{ 0.0 };
  Eigen::VectorXd grad;
};

//! Mean loss over `perf` and its theta gradient.
inline double loss_value_and_grad(const MitigationData& d, LossKind kind, const Eigen::VectorXd& theta,
                                  std::span<const std::size_t> perf, Eigen::VectorXd* grad)
{
  if (perf.empty())
    throw std::invalid_argument("loss: empty performance batch");
  if (kind == LossKind::distill && d.teacher.size() != d.y.size())
    throw std::invalid_argument("loss: distillation needs the base probabilities");
  const double inv = 1.0 / static_cast<double>(perf.size());
  double acc = 0.0;
  for (std::size_t i : perf) {
    const double f = d.family.raw(i, theta);
    double dldf;
    if (kind == LossKind::cross_entropy) {
      acc += d.y[i] ? softplus(-f) : softplus(f);
      dldf = sigmoid(f) - d.y[i];
    } else {
      const double q = sigmoid(f);
      acc += distill_loss(d.teacher[i], q);
      const double p = std::clamp(d.teacher[i], 1e-7, 1.0 - 1e-7);
      dldf = (q > 1e-7 && q < 1.0 - 1e-7) ? q - p : 0.0;
    }
    if (grad)
      grad->noalias() -= (inv * dldf) * d.family.encoders.row(static_cast<Eigen::Index>(i)).transpose();
  }
  return acc * inv;
}

inline double loss_weight(ObjectiveForm form, double omega) { return form == ObjectiveForm::penalized ? 1.0 - omega : 1.0; }
inline double bias_weight(ObjectiveForm form, double omega, double C) { return form == ObjectiveForm::penalized ? omega * C : omega; }

//! weight_L * L + weight_B * B with the analytic gradient.
inline ObjectiveValue penalized_objective(const MitigationData& d,
                                          const BiasEstimatorSpec& spec,
                                          const Eigen::VectorXd& theta,
                                          double omega,
                                          double C,
                                          ObjectiveForm form,
                                          LossKind loss,
                                          const ObjectiveBatch& batch,
                                          bool want_grad = true)
{
  if (batch.bias.empty() || batch.bias.size() != batch.bias_weights.size())
    throw std::invalid_argument("penalized_objective: bias batches and weights must be nonempty and aligned");
  ObjectiveValue out;
  out.grad = Eigen::VectorXd::Zero(d.family.dim());
  Eigen::VectorXd lg = Eigen::VectorXd::Zero(d.family.dim());
  out.loss = loss_value_and_grad(d, loss, theta, batch.perf, want_grad ? &lg : nullptr);
  const double wl = loss_weight(form, omega), wb = bias_weight(form, omega, C);
  for (std::size_t k = 0; k < batch.bias.size(); ++k) {
    // skip the estimator when its weight is zero; the value is still reported
    const bool grad_k = want_grad && wb != 0.0;
    const auto vg = bias_value_and_grad(spec, d.family, theta, batch.bias[k], grad_k);
    out.bias += batch.bias_weights[k] * vg.value;
    if (grad_k)
      out.grad += wb * batch.bias_weights[k] * vg.grad;
  }
  out.value = wl * out.loss + wb * out.bias;
  if (want_grad)
    out.grad += wl * lg;
  return out;
}

struct Candidate
{
  double omega{ 0.0 };
  std::size_t epoch{ 0 };
  Eigen::VectorXd theta;
};

struct TraceRow
{
  double omega{ 0.0 };
  std::size_t epoch{ 0 };
  Eigen::VectorXd theta;
  double train_loss{ 0.0 };
  double train_bias{ 0.0 };
};

struct SweepResult
{
  std::vector<Candidate> candidates;
  std::vector<TraceRow> trace;
  std::vector<double> omegas;
  double scale_C{ 1.0 };
  double base_loss{ 0.0 }, base_bias{ 0.0 };
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b)
{
  // splitmix64 finaliser over a combined key
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::vector<std::size_t> draw(std::mt19937_64& rng, const std::vector<std::size_t>& from, std::size_t n)
{
  std::vector<std::size_t> out(n);
  const auto m = static_cast<std::uint64_t>(from.size());
  for (auto& v : out)
    v = from[static_cast<std::size_t>(rng() % m)];
  return out;
}

} // namespace detail

//! Full-train batch used for logging and warm starts (fixed threshold seed).
inline ObjectiveBatch full_batch(const MitigationData& d)
{
  const auto idx = d.group_index();
  ObjectiveBatch b;
  b.perf.resize(d.y.size());
  std::iota(b.perf.begin(), b.perf.end(), std::size_t{ 0 });
  b.bias_weights = d.protected_weights();
  for (std::size_t k = 1; k < idx.size(); ++k) {
    BiasBatch bb;
    bb.group0 = idx[0];
    bb.group1 = idx[k];
    bb.pooled = b.perf;
    bb.kde = b.perf;
    bb.seed = 0;
    b.bias.push_back(std::move(bb));
  }
  return b;
}

inline SweepResult sgd_sweep(const MitigationData& d, BiasEstimatorSpec spec, const SweepConfig& cfg)
{
  cfg.validate();
  d.validate();
  spec.unbiased_square = cfg.unbiased_square;
  spec.validate();
  const auto dim = d.family.dim();
  if (!cfg.fixed_mask.empty() && cfg.fixed_mask.size() != static_cast<std::size_t>(dim))
    throw std::invalid_argument("sgd_sweep: fixed_mask length must equal theta dimension");

  const auto groups = d.group_index();
  std::vector<std::size_t> all(d.y.size());
  std::iota(all.begin(), all.end(), std::size_t{ 0 });
  const ObjectiveBatch full = full_batch(d);

  SweepResult res;
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(dim);
  {
    const auto base = penalized_objective(d, spec, zero, 0.0, 1.0, ObjectiveForm::lagrangian, cfg.loss, full, false);
    res.base_loss = base.loss;
    res.base_bias = base.bias;
  }
  if (cfg.scale == OmegaScale::loss_bias_ratio) {
    if (!(res.base_bias > 0.0))
      throw std::runtime_error("sgd_sweep: base bias estimate is not positive; cannot form the loss/bias ratio");
    res.scale_C = res.base_loss / res.base_bias;
  }
  res.omegas = cfg.omega_grid(res.scale_C);
  const std::size_t n_batches =
    cfg.n_batches ? cfg.n_batches : std::max<std::size_t>(1, (d.y.size() + cfg.n_perf - 1) / cfg.n_perf);

  struct Snapshot
  {
    Eigen::VectorXd theta;
    double loss, bias;
  };
  std::vector<Snapshot> previous{ { zero, res.base_loss, res.base_bias } };

  for (std::size_t j = 0; j < res.omegas.size(); ++j) {
    const double omega = res.omegas[j];
    const double wl = loss_weight(cfg.form, omega), wb = bias_weight(cfg.form, omega, res.scale_C);
    // warm start: best stored snapshot of the previous omega under the new objective
    const Snapshot* start = &previous.front();
    for (const auto& s : previous)
      if (wl * s.loss + wb * s.bias < wl * start->loss + wb * start->bias)
        start = &s;
    Eigen::VectorXd theta = start->theta;
    std::vector<Snapshot> current{ *start };
    res.candidates.push_back({ omega, 0, theta });

    std::mt19937_64 rng(detail::mix_seed(cfg.seed, j));
    for (std::size_t epoch = 1; epoch <= cfg.n_epochs; ++epoch) {
      for (std::size_t b = 0; b < n_batches; ++b) {
        ObjectiveBatch batch;
        batch.perf = detail::draw(rng, all, cfg.n_perf);
        batch.bias_weights = full.bias_weights;
        for (std::size_t k = 1; k < groups.size(); ++k) {
          BiasBatch bb;
          bb.group0 = detail::draw(rng, groups[0], cfg.n_bias);
          bb.group1 = detail::draw(rng, groups[k], cfg.n_bias);
          if (uses_pooled_sample(spec.variant)) {
            bb.pooled = detail::draw(rng, all, cfg.n_bias);
            bb.kde = detail::draw(rng, all, cfg.n_bias);
          }
          bb.seed = rng();
          batch.bias.push_back(std::move(bb));
        }
        const auto ov = penalized_objective(d, spec, theta, omega, res.scale_C, cfg.form, cfg.loss, batch);
        Eigen::VectorXd step = cfg.learning_rate * ov.grad;
        for (std::size_t c = 0; c < cfg.fixed_mask.size(); ++c)
          if (cfg.fixed_mask[c])
            step[static_cast<Eigen::Index>(c)] = 0.0;
        theta = d.family.project(theta - step);
      }
      const auto ev = penalized_objective(d, spec, theta, omega, res.scale_C, cfg.form, cfg.loss, full, false);
      res.trace.push_back({ omega, epoch, theta, ev.loss, ev.bias });
      res.candidates.push_back({ omega, epoch, theta });
      current.push_back({ theta, ev.loss, ev.bias });
    }
    previous = std::move(current);
  }
  return res;
}

inline void write_trace_csv(const std::vector<TraceRow>& trace, std::size_t dim, const std::string& path)
{
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("write_trace_csv: cannot open " + path);
  out << "omega,epoch";
  for (std::size_t k = 0; k < dim; ++k)
    out << ",theta_" << k;
  out << ",train_loss,train_bias_estimate\n";
  char buf[40];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << buf;
  };
  for (const auto& r : trace) {
    put(r.omega);
    out << ',' << r.epoch;
    for (Eigen::Index k = 0; k < r.theta.size(); ++k) {
      out << ',';
      put(r.theta[k]);
    }
    out << ',';
    put(r.train_loss);
    out << ',';
    put(r.train_bias);
    out << '\n';
  }
}

} // namespace fairfront
