#pragma once

// Small deterministic gradient-boosted tree trainer for binary labels.
// Logistic loss, Newton leaves, exact level-wise split search.

#include "fairfront/parallel.hpp"
#include "fairfront/relaxed_estimators.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace fairfront {

struct TreeNode
{
  int feature{ -1 }; // -1 marks a leaf
  double threshold{ 0.0 };
  int left{ -1 }, right{ -1 };
  double value{ 0.0 };

  bool is_leaf() const { return feature < 0; }
};

struct Tree
{
  std::vector<TreeNode> nodes; // node 0 is the root

  double predict(const double* x) const
  {
    int k = 0;
    while (!nodes[static_cast<std::size_t>(k)].is_leaf()) {
      const auto& n = nodes[static_cast<std::size_t>(k)];
      k = x[n.feature] < n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(k)].value;
  }

  int depth() const
  {
    std::function<int(int)> rec = [&](int k) -> int {
      const auto& n = nodes[static_cast<std::size_t>(k)];
      return n.is_leaf() ? 0 : 1 + std::max(rec(n.left), rec(n.right));
    };
    return nodes.empty() ? 0 : rec(0);
  }
};

struct GbdtParams
{
  int depth{ 3 };
  int rounds{ 200 };
  double learning_rate{ 0.1 };
  double min_leaf{ 1.0 }; // minimum hessian weight per child
  double lambda{ 1.0 };
  int early_stop_rounds{ 20 }; // 0 disables
  double subsample{ 1.0 };     // row fraction per round, drawn from seed
  std::uint64_t seed{ 0 };

  void validate() const
  {
    if (depth < 1)
      throw std::invalid_argument("gbdt: depth must be >= 1");
    if (rounds < 0)
      throw std::invalid_argument("gbdt: rounds must be >= 0");
    if (!(learning_rate > 0.0))
      throw std::invalid_argument("gbdt: learning_rate must be > 0");
    if (!(min_leaf >= 0.0) || !(lambda >= 0.0))
      throw std::invalid_argument("gbdt: min_leaf and lambda must be >= 0");
    if (!(subsample > 0.0 && subsample <= 1.0))
      throw std::invalid_argument("gbdt: subsample must lie in (0, 1]");
  }
};

struct Ensemble
{
  double base_margin{ 0.0 };
  double learning_rate{ 0.1 };
  std::size_t n_features{ 0 };
  std::vector<Tree> trees;
  std::vector<double> validation_loss; // per round, index 0 = base margin only

  std::size_t n_trees() const { return trees.size(); }

  double predict_raw(std::span<const double> x) const
  {
    if (x.size() != n_features)
      throw std::invalid_argument("predict_raw: feature count mismatch");
    double f = base_margin;
    for (const auto& t : trees)
      f += learning_rate * t.predict(x.data());
    return f;
  }

  double predict_proba(std::span<const double> x) const { return sigmoid(predict_raw(x)); }

  Eigen::VectorXd predict_raw(const RowMatrix& X) const
  {
    check(X);
    Eigen::VectorXd out(X.rows());
    parallel_for(static_cast<std::size_t>(X.rows()), [&](std::size_t i) {
      const double* row = X.data() + static_cast<Eigen::Index>(i) * X.cols();
      double f = base_margin;
      for (const auto& t : trees)
        f += learning_rate * t.predict(row);
      out[static_cast<Eigen::Index>(i)] = f;
    });
    return out;
  }

  //! T_j(x) per record and tree; raw = base_margin + learning_rate * rowsum.
  RowMatrix per_tree_outputs(const RowMatrix& X) const
  {
    check(X);
    RowMatrix out(X.rows(), static_cast<Eigen::Index>(trees.size()));
    parallel_for(static_cast<std::size_t>(X.rows()), [&](std::size_t i) {
      const double* row = X.data() + static_cast<Eigen::Index>(i) * X.cols();
      for (std::size_t j = 0; j < trees.size(); ++j)
        out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = trees[j].predict(row);
    });
    return out;
  }

private:
  void check(const RowMatrix& X) const
  {
    if (static_cast<std::size_t>(X.cols()) != n_features)
      throw std::invalid_argument("gbdt: feature count mismatch");
  }
};

inline double log_loss(std::span<const int> y, std::span<const double> raw, std::span<const double> w = {})
{
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double wi = w.empty() ? 1.0 : w[i];
    // -log sigma(f) = softplus(-f)
    num += wi * (y[i] ? softplus(-raw[i]) : softplus(raw[i]));
    den += wi;
  }
  return den > 0.0 ? num / den : 0.0;
}

namespace detail {

struct SplitChoice
{
  double gain{ 0.0 };
  int feature{ -1 };
  double threshold{ 0.0 };
};

//! Grows one tree on gradients g and hessians h (records with h = 0 and g = 0 are inert).
inline Tree grow_tree(const RowMatrix& X,
                      const std::vector<std::vector<std::size_t>>& sorted,
                      const std::vector<double>& g,
                      const std::vector<double>& h,
                      const std::vector<char>& active,
                      const GbdtParams& p)
{
  const std::size_t n = static_cast<std::size_t>(X.rows());
  const std::size_t F = static_cast<std::size_t>(X.cols());
  Tree tree;
  std::vector<int> node_of(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (!active[i])
      node_of[i] = -1;
  tree.nodes.push_back({});
  std::vector<int> frontier{ 0 };

  auto leaf_value = [&](double G, double H) { return H + p.lambda > 0.0 ? -G / (H + p.lambda) : 0.0; };

  for (int level = 0; level <= p.depth && !frontier.empty(); ++level) {
    // node totals
    std::vector<int> slot(tree.nodes.size(), -1);
    for (std::size_t q = 0; q < frontier.size(); ++q)
      slot[static_cast<std::size_t>(frontier[q])] = static_cast<int>(q);
    std::vector<double> G(frontier.size(), 0.0), H(frontier.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      if (node_of[i] >= 0 && slot[static_cast<std::size_t>(node_of[i])] >= 0) {
        const auto q = static_cast<std::size_t>(slot[static_cast<std::size_t>(node_of[i])]);
        G[q] += g[i];
        H[q] += h[i];
      }
    for (std::size_t q = 0; q < frontier.size(); ++q)
      tree.nodes[static_cast<std::size_t>(frontier[q])].value = leaf_value(G[q], H[q]);
    if (level == p.depth)
      break;

    std::vector<SplitChoice> best(frontier.size());
    std::vector<double> GL(frontier.size()), HL(frontier.size()), last(frontier.size());
    std::vector<char> seen(frontier.size());
    for (std::size_t f = 0; f < F; ++f) {
      std::fill(GL.begin(), GL.end(), 0.0);
      std::fill(HL.begin(), HL.end(), 0.0);
      std::fill(seen.begin(), seen.end(), 0);
      for (std::size_t i : sorted[f]) {
        if (node_of[i] < 0)
          continue;
        const int s = slot[static_cast<std::size_t>(node_of[i])];
        if (s < 0)
          continue;
        const auto q = static_cast<std::size_t>(s);
        const double x = X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f));
        if (seen[q] && x > last[q]) {
          // candidate split between last[q] and x
          const double hr = H[q] - HL[q];
          if (HL[q] >= p.min_leaf && hr >= p.min_leaf) {
            const double gr = G[q] - GL[q];
            const double gain = GL[q] * GL[q] / (HL[q] + p.lambda) + gr * gr / (hr + p.lambda) -
                                G[q] * G[q] / (H[q] + p.lambda);
            if (gain > best[q].gain + 1e-12) {
              double thr = 0.5 * (last[q] + x);
              if (!(thr > last[q]))
                thr = x;
              best[q] = { gain, static_cast<int>(f), thr };
            }
          }
        }
        GL[q] += g[i];
        HL[q] += h[i];
        last[q] = x;
        seen[q] = 1;
      }
    }

    std::vector<int> next;
    for (std::size_t q = 0; q < frontier.size(); ++q) {
      if (best[q].feature < 0)
        continue;
      const int id = frontier[q];
      const int l = static_cast<int>(tree.nodes.size());
      tree.nodes.push_back({});
      tree.nodes.push_back({});
      auto& node = tree.nodes[static_cast<std::size_t>(id)];
      node.feature = best[q].feature;
      node.threshold = best[q].threshold;
      node.left = l;
      node.right = l + 1;
      next.push_back(l);
      next.push_back(l + 1);
    }
    if (next.empty())
      break;
    for (std::size_t i = 0; i < n; ++i) {
      if (node_of[i] < 0)
        continue;
      const auto& node = tree.nodes[static_cast<std::size_t>(node_of[i])];
      if (node.is_leaf())
        continue;
      node_of[i] = X(static_cast<Eigen::Index>(i), node.feature) < node.threshold ? node.left : node.right;
    }
    frontier = std::move(next);
  }
  for (auto& nd : tree.nodes)
    if (nd.is_leaf() && !std::isfinite(nd.value))
      throw std::runtime_error("gbdt: non-finite leaf value");
  return tree;
}

} // namespace detail

struct ValidationSet
{
  const RowMatrix* X{ nullptr };
  std::span<const int> y;
  std::span<const double> weights;
};

//! Boosts on logistic loss; with a validation set, keeps the best round.
inline Ensemble train_gbdt(const RowMatrix& X,
                           std::span<const int> y,
                           std::span<const double> weights,
                           const GbdtParams& params,
                           const ValidationSet& valid = {})
{
  params.validate();
  const std::size_t n = static_cast<std::size_t>(X.rows());
  if (y.size() != n)
    throw std::invalid_argument("train_gbdt: label count mismatch");
  if (!weights.empty() && weights.size() != n)
    throw std::invalid_argument("train_gbdt: weight count mismatch");
  std::vector<double> w(n, 1.0);
  if (!weights.empty())
    std::copy(weights.begin(), weights.end(), w.begin());
  double wsum = 0.0, wy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] != 0 && y[i] != 1)
      throw std::invalid_argument("train_gbdt: labels must be 0 or 1");
    if (!(w[i] >= 0.0) || !std::isfinite(w[i]))
      throw std::invalid_argument("train_gbdt: weights must be finite and >= 0");
    wsum += w[i];
    wy += w[i] * y[i];
  }
  if (!(wsum > 0.0))
    throw std::invalid_argument("train_gbdt: weights are all zero");

  Ensemble ens;
  ens.learning_rate = params.learning_rate;
  ens.n_features = static_cast<std::size_t>(X.cols());
  const double mean = wy / wsum;
  ens.base_margin = std::clamp(std::log(mean) - std::log1p(-mean), -10.0, 10.0);
  bool one_class = true;
  for (std::size_t i = 0; i < n; ++i)
    if (w[i] > 0.0 && y[i] != y[0])
      one_class = false;

  const bool use_valid = valid.X != nullptr && valid.X->rows() > 0;
  if (use_valid && (static_cast<std::size_t>(valid.X->cols()) != ens.n_features ||
                    valid.y.size() != static_cast<std::size_t>(valid.X->rows())))
    throw std::invalid_argument("train_gbdt: validation set shape mismatch");
  std::vector<double> vraw;
  if (use_valid) {
    vraw.assign(valid.y.size(), ens.base_margin);
    ens.validation_loss.push_back(log_loss(valid.y, vraw, valid.weights));
  }
  if (one_class || params.rounds == 0)
    return ens;

  std::vector<std::vector<std::size_t>> sorted(ens.n_features);
  for (std::size_t f = 0; f < ens.n_features; ++f) {
    auto& s = sorted[f];
    s.resize(n);
    std::iota(s.begin(), s.end(), std::size_t{ 0 });
    std::stable_sort(s.begin(), s.end(), [&](std::size_t a, std::size_t b) {
      return X(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(f)) <
             X(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(f));
    });
  }

  std::vector<double> raw(n, ens.base_margin), g(n), h(n);
  std::vector<char> active(n);
  std::mt19937_64 rng(params.seed);
  std::size_t best_round = 0;
  double best_loss = use_valid ? ens.validation_loss[0] : 0.0;
  for (int r = 0; r < params.rounds; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      const double pi = sigmoid(raw[i]);
      g[i] = w[i] * (pi - y[i]);
      h[i] = w[i] * pi * (1.0 - pi);
      active[i] = w[i] > 0.0;
      if (params.subsample < 1.0 && static_cast<double>(rng() >> 11) * 0x1.0p-53 >= params.subsample)
        active[i] = 0;
    }
    Tree t = detail::grow_tree(X, sorted, g, h, active, params);
    for (std::size_t i = 0; i < n; ++i)
      raw[i] += params.learning_rate * t.predict(X.data() + static_cast<Eigen::Index>(i) * X.cols());
    if (use_valid)
      for (std::size_t i = 0; i < vraw.size(); ++i)
        vraw[i] += params.learning_rate * t.predict(valid.X->data() + static_cast<Eigen::Index>(i) * valid.X->cols());
    ens.trees.push_back(std::move(t));
    if (use_valid) {
      const double loss = log_loss(valid.y, vraw, valid.weights);
      ens.validation_loss.push_back(loss);
      if (loss < best_loss) {
        best_loss = loss;
        best_round = ens.trees.size();
      } else if (params.early_stop_rounds > 0 &&
                 ens.trees.size() - best_round >= static_cast<std::size_t>(params.early_stop_rounds))
        break;
    }
  }
  if (use_valid) {
    ens.trees.resize(best_round);
    ens.validation_loss.resize(best_round + 1);
  }
  return ens;
}

inline nlohmann::json to_json(const Ensemble& e)
{
  nlohmann::json j;
  j["format"] = "fairfront-gbdt-1";
  j["base_margin"] = e.base_margin;
  j["learning_rate"] = e.learning_rate;
  j["n_features"] = e.n_features;
  j["link"] = "logistic";
  j["validation_loss"] = e.validation_loss;
  auto& trees = j["trees"] = nlohmann::json::array();
  for (const auto& t : e.trees) {
    auto nodes = nlohmann::json::array();
    for (const auto& nd : t.nodes) {
      if (nd.is_leaf())
        nodes.push_back({ { "leaf", nd.value } });
      else
        nodes.push_back({ { "feature", nd.feature },
                          { "threshold", nd.threshold },
                          { "left", nd.left },
                          { "right", nd.right },
                          { "value", nd.value } });
    }
    trees.push_back(std::move(nodes));
  }
  return j;
}

inline Ensemble ensemble_from_json(const nlohmann::json& j)
{
  if (j.value("format", "") != "fairfront-gbdt-1")
    throw std::runtime_error("ensemble_from_json: unrecognised model format");
  Ensemble e;
  e.base_margin = j.at("base_margin").get<double>();
  e.learning_rate = j.at("learning_rate").get<double>();
  e.n_features = j.at("n_features").get<std::size_t>();
  if (j.contains("validation_loss"))
    e.validation_loss = j["validation_loss"].get<std::vector<double>>();
  for (const auto& jt : j.at("trees")) {
    Tree t;
    for (const auto& jn : jt) {
      TreeNode nd;
      if (jn.contains("leaf"))
        nd.value = jn["leaf"].get<double>();
      else {
        nd.feature = jn.at("feature").get<int>();
        nd.threshold = jn.at("threshold").get<double>();
        nd.left = jn.at("left").get<int>();
        nd.right = jn.at("right").get<int>();
        nd.value = jn.value("value", 0.0);
      }
      t.nodes.push_back(nd);
    }
    const int count = static_cast<int>(t.nodes.size());
    for (const auto& nd : t.nodes)
      if (!nd.is_leaf() && (nd.left <= 0 || nd.left >= count || nd.right <= 0 || nd.right >= count ||
                            nd.feature >= static_cast<int>(e.n_features)))
        throw std::runtime_error("ensemble_from_json: malformed tree");
    if (t.nodes.empty())
      throw std::runtime_error("ensemble_from_json: empty tree");
    e.trees.push_back(std::move(t));
  }
  return e;
}

} // namespace fairfront
