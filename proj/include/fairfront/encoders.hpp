#pragma once

// Encoder construction for the linear post-processing families:
// additive polynomial corrections, principal components of per-tree outputs,
// and marginal Shapley attributions. Also explanation reconstruction.

#include "fairfront/gbdt.hpp"
#include "fairfront/parallel.hpp"
#include "fairfront/relaxed_estimators.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace fairfront {

enum class EncoderKind
{
  additive,
  tree_pca,
  shapley
};

enum class Basis
{
  legendre,
  monomial
};

inline const char* to_string(EncoderKind k)
{
  switch (k) {
    case EncoderKind::additive:
      return "additive";
    case EncoderKind::tree_pca:
      return "tree-pca";
    case EncoderKind::shapley:
      return "shapley";
  }
  return "?";
}

inline Basis basis_from_string(const std::string& s)
{
  if (s == "legendre")
    return Basis::legendre;
  if (s == "monomial")
    return Basis::monomial;
  throw std::invalid_argument("unknown basis '" + s + "' (legendre, monomial)");
}

inline const char* to_string(Basis b) { return b == Basis::legendre ? "legendre" : "monomial"; }

//! Legendre polynomial P_k(t) by the three-term recurrence.
inline double legendre(int k, double t)
{
  if (k == 0)
    return 1.0;
  double p0 = 1.0, p1 = t;
  for (int j = 1; j < k; ++j) {
    const double p2 = ((2.0 * j + 1.0) * t * p1 - j * p0) / (j + 1.0);
    p0 = p1;
    p1 = p2;
  }
  return p1;
}

struct Provenance
{
  EncoderKind kind{ EncoderKind::additive };
  int feature{ -1 }; // additive, shapley
  int index{ 0 };    // basis degree (additive) or component (tree-pca)
};

struct AdditiveBlock
{
  Basis basis{ Basis::legendre };
  int degree{ 1 };
  std::vector<int> features;   // kept (non-constant) features
  std::vector<double> lo, hi;  // training range per kept feature
};

struct TreePcaBlock
{
  std::vector<int> trees;     // trees with non-zero variance
  Eigen::VectorXd tree_mean;  // per kept tree
  Eigen::MatrixXd loadings;   // kept trees x components
  std::vector<double> eigenvalues;
  std::size_t fitted_records{ 0 };
};

struct ShapleyBlock
{
  RowMatrix background;
};

using EncoderBlock = std::variant<AdditiveBlock, TreePcaBlock, ShapleyBlock>;

//! Frozen encoder definition; columns are evaluated as (raw - center) / scale
//! with a leading constant column of ones.
struct EncoderSet
{
  std::vector<EncoderBlock> blocks;
  std::vector<std::string> names; // non-constant columns
  std::vector<Provenance> provenance;
  std::vector<double> center, scale;
  mutable std::size_t evaluations{ 0 }; // number of raw() calls

  std::size_t n_columns() const { return names.size(); }
  std::size_t dim() const { return names.size() + 1; }

  RowMatrix raw(const RowMatrix& X, const Ensemble* model) const;

  //! N x (1 + m) matrix used by the linear family.
  RowMatrix matrix(const RowMatrix& X, const Ensemble* model) const
  {
    const RowMatrix r = raw(X, model);
    RowMatrix out(X.rows(), static_cast<Eigen::Index>(dim()));
    out.col(0).setOnes();
    for (std::size_t j = 0; j < n_columns(); ++j) {
      const auto c = static_cast<Eigen::Index>(j);
      out.col(c + 1) = (r.col(c).array() - center[j]) / scale[j];
    }
    return out;
  }

  //! Coefficients on the raw (uncentred, unscaled) columns.
  Eigen::VectorXd to_original_units(const Eigen::VectorXd& theta) const
  {
    check_dim(theta);
    Eigen::VectorXd out(theta.size());
    out[0] = theta[0];
    for (std::size_t j = 0; j < n_columns(); ++j) {
      out[static_cast<Eigen::Index>(j + 1)] = theta[static_cast<Eigen::Index>(j + 1)] / scale[j];
      out[0] -= theta[static_cast<Eigen::Index>(j + 1)] * center[j] / scale[j];
    }
    return out;
  }

  Eigen::VectorXd from_original_units(const Eigen::VectorXd& theta) const
  {
    check_dim(theta);
    Eigen::VectorXd out(theta.size());
    out[0] = theta[0];
    for (std::size_t j = 0; j < n_columns(); ++j) {
      out[static_cast<Eigen::Index>(j + 1)] = theta[static_cast<Eigen::Index>(j + 1)] * scale[j];
      out[0] += theta[static_cast<Eigen::Index>(j + 1)] * center[j];
    }
    return out;
  }

private:
  void check_dim(const Eigen::VectorXd& theta) const
  {
    if (static_cast<std::size_t>(theta.size()) != dim())
      throw std::invalid_argument("EncoderSet: theta dimension mismatch");
  }
};

// ---------------------------------------------------------------------------
// Marginal Shapley values

using ModelFn = std::function<double(std::span<const double>)>;

inline double shapley_weight(int s, int n)
{
  // s! (n - s - 1)! / n!
  double w = 1.0 / n;
  for (int k = 1; k <= s; ++k)
    w *= static_cast<double>(k) / static_cast<double>(n - k);
  return w;
}

namespace detail {

//! phi from the game values v over all player masks.
inline std::vector<double> shapley_from_game(const std::vector<double>& v, int n)
{
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s)
    w[static_cast<std::size_t>(s)] = shapley_weight(s, n);
  std::vector<double> phi(static_cast<std::size_t>(n), 0.0);
  const std::uint32_t full = n == 32 ? ~0u : (1u << n) - 1u;
  for (std::uint32_t S = 0; S <= full; ++S) {
    const int s = std::popcount(S);
    for (int k = 0; k < n; ++k) {
      if (S & (1u << k))
        continue;
      phi[static_cast<std::size_t>(k)] += w[static_cast<std::size_t>(s)] * (v[S | (1u << k)] - v[S]);
    }
    if (S == full)
      break;
  }
  return phi;
}

inline void check_background(const RowMatrix& bg, std::size_t n)
{
  if (bg.rows() == 0)
    throw std::invalid_argument("shapley: background sample is empty");
  if (static_cast<std::size_t>(bg.cols()) != n)
    throw std::invalid_argument("shapley: background feature count mismatch");
}

} // namespace detail

constexpr int kMaxExactShapleyFeatures = 16;

//! Exact marginal Shapley values by subset enumeration.
inline std::vector<double> shapley_values(const ModelFn& f, std::span<const double> x, const RowMatrix& background)
{
  const int n = static_cast<int>(x.size());
  if (n > kMaxExactShapleyFeatures)
    throw std::invalid_argument("shapley: " + std::to_string(n) +
                                " features is too many for exact enumeration; use shapley_values_mc");
  detail::check_background(background, x.size());
  const std::uint32_t masks = 1u << n;
  std::vector<double> v(masks, 0.0), z(x.size());
  for (std::uint32_t S = 0; S < masks; ++S) {
    double acc = 0.0;
    for (Eigen::Index b = 0; b < background.rows(); ++b) {
      for (int k = 0; k < n; ++k)
        z[static_cast<std::size_t>(k)] = (S & (1u << k)) ? x[static_cast<std::size_t>(k)] : background(b, k);
      acc += f(z);
    }
    v[S] = acc / static_cast<double>(background.rows());
  }
  return detail::shapley_from_game(v, n);
}

//! Permutation-sampling estimate of the same quantity.
inline std::vector<double> shapley_values_mc(const ModelFn& f,
                                             std::span<const double> x,
                                             const RowMatrix& background,
                                             std::size_t n_permutations,
                                             std::uint64_t seed)
{
  const std::size_t n = x.size();
  detail::check_background(background, n);
  std::mt19937_64 rng(seed);
  std::vector<double> phi(n, 0.0), z(n);
  std::vector<std::size_t> perm(n);
  for (std::size_t p = 0; p < n_permutations; ++p) {
    std::iota(perm.begin(), perm.end(), std::size_t{ 0 });
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto b = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(background.rows()));
    for (std::size_t k = 0; k < n; ++k)
      z[k] = background(b, static_cast<Eigen::Index>(k));
    double prev = f(z);
    for (std::size_t k : perm) {
      z[k] = x[k];
      const double cur = f(z);
      phi[k] += cur - prev;
      prev = cur;
    }
  }
  for (auto& v : phi)
    v /= static_cast<double>(std::max<std::size_t>(n_permutations, 1));
  return phi;
}

namespace detail {

//! Exact marginal Shapley for one tree. Each tree is a game over the
//! features it splits on; background match counts are precomputed.
class TreeShapley
{
public:
  TreeShapley(const Tree& tree, const RowMatrix& background)
  {
    for (const auto& nd : tree.nodes)
      if (!nd.is_leaf() && std::find(features_.begin(), features_.end(), nd.feature) == features_.end())
        features_.push_back(nd.feature);
    std::sort(features_.begin(), features_.end());
    u_ = static_cast<int>(features_.size());
    if (u_ > 20)
      throw std::invalid_argument("tree shapley: tree uses too many distinct features");
    const auto B = static_cast<std::size_t>(background.rows());
    words_ = (B + 63) / 64;
    collect(tree, 0, std::vector<double>(features_.size(), -INFINITY), std::vector<double>(features_.size(), INFINITY));
    // match fraction for every leaf and every mask of background-supplied features
    const std::uint32_t masks = 1u << u_;
    frac_.assign(leaves_.size() * masks, 0.0);
    std::vector<std::uint64_t> bits(words_ * static_cast<std::size_t>(u_)), acc(words_);
    for (std::size_t l = 0; l < leaves_.size(); ++l) {
      const auto& leaf = leaves_[l];
      std::fill(bits.begin(), bits.end(), 0);
      for (int k = 0; k < u_; ++k)
        for (std::size_t b = 0; b < B; ++b) {
          const double v = background(static_cast<Eigen::Index>(b), features_[static_cast<std::size_t>(k)]);
          if (v >= leaf.lo[static_cast<std::size_t>(k)] && v < leaf.hi[static_cast<std::size_t>(k)])
            bits[static_cast<std::size_t>(k) * words_ + b / 64] |= std::uint64_t{ 1 } << (b % 64);
        }
      for (std::uint32_t R = 0; R < masks; ++R) {
        for (std::size_t w = 0; w < words_; ++w)
          acc[w] = w + 1 < words_ || B % 64 == 0 ? ~std::uint64_t{ 0 } : (std::uint64_t{ 1 } << (B % 64)) - 1;
        for (int k = 0; k < u_; ++k)
          if (R & (1u << k))
            for (std::size_t w = 0; w < words_; ++w)
              acc[w] &= bits[static_cast<std::size_t>(k) * words_ + w];
        std::size_t cnt = 0;
        for (auto a : acc)
          cnt += static_cast<std::size_t>(std::popcount(a));
        frac_[l * masks + R] = static_cast<double>(cnt) / static_cast<double>(B);
      }
    }
  }

  //! Adds scale * phi_f(x) into out (length = feature count).
  void accumulate(const double* x, double scale, double* out) const
  {
    if (u_ == 0)
      return;
    const std::uint32_t masks = 1u << u_, full = masks - 1;
    std::vector<double> v(masks, 0.0);
    for (std::size_t l = 0; l < leaves_.size(); ++l) {
      const auto& leaf = leaves_[l];
      std::uint32_t sat = 0;
      for (int k = 0; k < u_; ++k) {
        const double xv = x[features_[static_cast<std::size_t>(k)]];
        if (xv >= leaf.lo[static_cast<std::size_t>(k)] && xv < leaf.hi[static_cast<std::size_t>(k)])
          sat |= 1u << k;
      }
      // S = features taken from x; needs S subset of sat
      for (std::uint32_t S = sat;; S = (S - 1) & sat) {
        v[S] += leaf.value * frac_[l * masks + (full & ~S)];
        if (S == 0)
          break;
      }
    }
    const auto phi = shapley_from_game(v, u_);
    for (int k = 0; k < u_; ++k)
      out[features_[static_cast<std::size_t>(k)]] += scale * phi[static_cast<std::size_t>(k)];
  }

private:
  struct Leaf
  {
    double value;
    std::vector<double> lo, hi;
  };

  void collect(const Tree& t, int k, std::vector<double> lo, std::vector<double> hi)
  {
    const auto& nd = t.nodes[static_cast<std::size_t>(k)];
    if (nd.is_leaf()) {
      leaves_.push_back({ nd.value, std::move(lo), std::move(hi) });
      return;
    }
    const auto f = static_cast<std::size_t>(
      std::lower_bound(features_.begin(), features_.end(), nd.feature) - features_.begin());
    auto lo_r = lo, hi_l = hi;
    hi_l[f] = std::min(hi_l[f], nd.threshold);
    lo_r[f] = std::max(lo_r[f], nd.threshold);
    collect(t, nd.left, lo, std::move(hi_l));
    collect(t, nd.right, std::move(lo_r), hi);
  }

  std::vector<int> features_;
  int u_{ 0 };
  std::size_t words_{ 0 };
  std::vector<Leaf> leaves_;
  std::vector<double> frac_;
};

} // namespace detail

//! Exact marginal Shapley values of the ensemble's raw score, N x features.
//! With tree_weights, tree j contributes weight_j * phi(T_j) instead of
//! learning_rate * phi(T_j).
inline RowMatrix tree_shapley_values(const Ensemble& e,
                                     const RowMatrix& X,
                                     const RowMatrix& background,
                                     std::span<const double> tree_weights = {})
{
  if (static_cast<std::size_t>(X.cols()) != e.n_features)
    throw std::invalid_argument("tree_shapley_values: feature count mismatch");
  detail::check_background(background, e.n_features);
  if (!tree_weights.empty() && tree_weights.size() != e.n_trees())
    throw std::invalid_argument("tree_shapley_values: tree weight count mismatch");
  std::vector<std::size_t> used;
  for (std::size_t j = 0; j < e.n_trees(); ++j)
    if (tree_weights.empty() || tree_weights[j] != 0.0)
      used.push_back(j);
  std::vector<detail::TreeShapley> games(used.size(), detail::TreeShapley(Tree{ { TreeNode{} } }, background));
  parallel_for(used.size(), [&](std::size_t q) { games[q] = detail::TreeShapley(e.trees[used[q]], background); });
  RowMatrix out = RowMatrix::Zero(X.rows(), X.cols());
  parallel_for(static_cast<std::size_t>(X.rows()), [&](std::size_t i) {
    const auto ii = static_cast<Eigen::Index>(i);
    for (std::size_t q = 0; q < used.size(); ++q) {
      const double w = tree_weights.empty() ? e.learning_rate : tree_weights[used[q]];
      games[q].accumulate(X.data() + ii * X.cols(), w, out.data() + ii * out.cols());
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Raw encoder evaluation

namespace detail {

inline void fill_additive(const AdditiveBlock& a, const RowMatrix& X, RowMatrix& out, Eigen::Index& col)
{
  for (std::size_t q = 0; q < a.features.size(); ++q) {
    const auto f = static_cast<Eigen::Index>(a.features[q]);
    if (f >= X.cols())
      throw std::invalid_argument("additive encoder: feature index out of range");
    for (int d = 1; d <= a.degree; ++d) {
      for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const double x = X(i, f);
        out(i, col) = a.basis == Basis::legendre ? legendre(d, 2.0 * (x - a.lo[q]) / (a.hi[q] - a.lo[q]) - 1.0)
                                                 : std::pow(x, d);
      }
      ++col;
    }
  }
}

inline RowMatrix kept_tree_outputs(const TreePcaBlock& p, const Ensemble& e, const RowMatrix& X)
{
  const RowMatrix T = e.per_tree_outputs(X);
  RowMatrix K(X.rows(), static_cast<Eigen::Index>(p.trees.size()));
  for (std::size_t q = 0; q < p.trees.size(); ++q)
    K.col(static_cast<Eigen::Index>(q)) =
      T.col(static_cast<Eigen::Index>(p.trees[q])).array() - p.tree_mean[static_cast<Eigen::Index>(q)];
  return K;
}

} // namespace detail

inline RowMatrix EncoderSet::raw(const RowMatrix& X, const Ensemble* model) const
{
  ++evaluations;
  RowMatrix out(X.rows(), static_cast<Eigen::Index>(n_columns()));
  Eigen::Index col = 0;
  for (const auto& block : blocks) {
    if (const auto* a = std::get_if<AdditiveBlock>(&block)) {
      detail::fill_additive(*a, X, out, col);
    } else if (const auto* p = std::get_if<TreePcaBlock>(&block)) {
      if (!model)
        throw std::invalid_argument("tree-pca encoders need the base ensemble");
      if (p->loadings.cols() == 0)
        continue;
      const RowMatrix Z = detail::kept_tree_outputs(*p, *model, X) * p->loadings;
      out.middleCols(col, Z.cols()) = Z;
      col += Z.cols();
    } else if (const auto* s = std::get_if<ShapleyBlock>(&block)) {
      if (!model)
        throw std::invalid_argument("shapley encoders need the base ensemble");
      const RowMatrix phi = tree_shapley_values(*model, X, s->background);
      out.middleCols(col, phi.cols()) = phi;
      col += phi.cols();
    }
  }
  return out;
}

namespace detail {

//! Fits centering and unit-variance scales for the columns of `block` on X.
inline void append_block(EncoderSet& set, EncoderBlock block, std::vector<std::string> names,
                         std::vector<Provenance> prov, const RowMatrix& X, const Ensemble* model)
{
  EncoderSet one;
  one.blocks.push_back(block);
  one.names = names;
  one.provenance = prov;
  const RowMatrix r = one.raw(X, model);
  for (Eigen::Index j = 0; j < r.cols(); ++j) {
    const double mean = r.col(j).mean();
    double ss = 0.0;
    for (Eigen::Index i = 0; i < r.rows(); ++i)
      ss += (r(i, j) - mean) * (r(i, j) - mean);
    const double sd = r.rows() > 1 ? std::sqrt(ss / static_cast<double>(r.rows() - 1)) : 0.0;
    set.center.push_back(mean);
    set.scale.push_back(sd > 0.0 ? sd : 1.0);
  }
  set.blocks.push_back(std::move(block));
  set.names.insert(set.names.end(), names.begin(), names.end());
  set.provenance.insert(set.provenance.end(), prov.begin(), prov.end());
}

} // namespace detail

// ---------------------------------------------------------------------------
// Builders

//! Columns q_d(x_i), d = 1..degree, for every non-constant feature.
inline EncoderSet additive_encoders(const RowMatrix& X, int degree, Basis basis,
                                    const std::vector<std::string>& feature_names = {})
{
  if (degree < 1)
    throw std::invalid_argument("additive_encoders: degree must be >= 1");
  if (X.rows() == 0)
    throw std::invalid_argument("additive_encoders: no records");
  AdditiveBlock a;
  a.basis = basis;
  a.degree = degree;
  std::vector<std::string> names;
  std::vector<Provenance> prov;
  for (Eigen::Index f = 0; f < X.cols(); ++f) {
    const double lo = X.col(f).minCoeff(), hi = X.col(f).maxCoeff();
    if (!std::isfinite(lo) || !std::isfinite(hi))
      throw std::invalid_argument("additive_encoders: non-finite feature values (impute first)");
    if (!(hi > lo))
      continue; // constant feature: the intercept already covers it
    a.features.push_back(static_cast<int>(f));
    a.lo.push_back(lo);
    a.hi.push_back(hi);
    const std::string fname =
      static_cast<std::size_t>(f) < feature_names.size() ? feature_names[static_cast<std::size_t>(f)]
                                                         : "x" + std::to_string(f + 1);
    for (int d = 1; d <= degree; ++d) {
      names.push_back(fname + (basis == Basis::legendre ? ":P" : ":^") + std::to_string(d));
      prov.push_back({ EncoderKind::additive, static_cast<int>(f), d });
    }
  }
  EncoderSet set;
  detail::append_block(set, std::move(a), std::move(names), std::move(prov), X, nullptr);
  return set;
}

struct TreePcaOptions
{
  std::size_t max_records{ 50000 };
  std::uint64_t seed{ 0 };
};

//! Top-r principal components of the centered per-tree outputs.
inline EncoderSet tree_pca_encoders(const Ensemble& e, const RowMatrix& X, std::size_t r,
                                    const TreePcaOptions& opt = {})
{
  if (e.n_trees() == 0)
    throw std::invalid_argument("tree_pca_encoders: ensemble has no trees");
  if (r > e.n_trees())
    throw std::invalid_argument("tree_pca_encoders: " + std::to_string(r) + " components requested but the ensemble has " +
                                std::to_string(e.n_trees()) + " trees");
  if (r > static_cast<std::size_t>(X.rows()))
    throw std::invalid_argument("tree_pca_encoders: more components than records");

  // fitting subsample
  RowMatrix Xs;
  const RowMatrix* fit = &X;
  if (static_cast<std::size_t>(X.rows()) > opt.max_records) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(X.rows()));
    std::iota(idx.begin(), idx.end(), std::size_t{ 0 });
    std::mt19937_64 rng(opt.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(opt.max_records);
    std::sort(idx.begin(), idx.end());
    Xs.resize(static_cast<Eigen::Index>(idx.size()), X.cols());
    for (std::size_t k = 0; k < idx.size(); ++k)
      Xs.row(static_cast<Eigen::Index>(k)) = X.row(static_cast<Eigen::Index>(idx[k]));
    fit = &Xs;
  }

  const RowMatrix T = e.per_tree_outputs(*fit);
  const auto N = T.rows();
  TreePcaBlock p;
  p.fitted_records = static_cast<std::size_t>(N);
  Eigen::VectorXd mean = T.colwise().mean().transpose();
  Eigen::VectorXd var(T.cols());
  for (Eigen::Index j = 0; j < T.cols(); ++j)
    var[j] = (T.col(j).array() - mean[j]).square().sum() / static_cast<double>(std::max<Eigen::Index>(N - 1, 1));
  const double max_var = var.size() ? var.maxCoeff() : 0.0;
  for (Eigen::Index j = 0; j < T.cols(); ++j)
    if (var[j] > 1e-14 * max_var && var[j] > 0.0)
      p.trees.push_back(static_cast<int>(j));
  if (r > p.trees.size())
    throw std::invalid_argument("tree_pca_encoders: only " + std::to_string(p.trees.size()) +
                                " trees vary on the data, fewer than the " + std::to_string(r) + " components requested");
  p.tree_mean.resize(static_cast<Eigen::Index>(p.trees.size()));
  for (std::size_t q = 0; q < p.trees.size(); ++q)
    p.tree_mean[static_cast<Eigen::Index>(q)] = mean[p.trees[q]];

  if (r > 0) {
    const RowMatrix K = detail::kept_tree_outputs(p, e, *fit);
    const Eigen::MatrixXd C = (K.transpose() * K) / static_cast<double>(std::max<Eigen::Index>(N - 1, 1));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(C);
    if (eig.info() != Eigen::Success)
      throw std::runtime_error("tree_pca_encoders: eigendecomposition failed");
    const auto m = C.rows();
    p.loadings.resize(m, static_cast<Eigen::Index>(r));
    for (std::size_t k = 0; k < r; ++k) {
      const Eigen::Index src = m - 1 - static_cast<Eigen::Index>(k); // ascending order from the solver
      Eigen::VectorXd v = eig.eigenvectors().col(src);
      Eigen::Index arg = 0;
      for (Eigen::Index q = 1; q < v.size(); ++q)
        if (std::abs(v[q]) > std::abs(v[arg]))
          arg = q;
      if (v[arg] < 0.0)
        v = -v;
      p.loadings.col(static_cast<Eigen::Index>(k)) = v;
      p.eigenvalues.push_back(eig.eigenvalues()[src]);
    }
  } else {
    p.loadings.resize(static_cast<Eigen::Index>(p.trees.size()), 0);
  }
  std::vector<std::string> names;
  std::vector<Provenance> prov;
  for (std::size_t k = 0; k < r; ++k) {
    names.push_back("pc" + std::to_string(k + 1));
    prov.push_back({ EncoderKind::tree_pca, -1, static_cast<int>(k + 1) });
  }
  EncoderSet set;
  detail::append_block(set, std::move(p), std::move(names), std::move(prov), X, &e);
  return set;
}

struct ShapleyOptions
{
  std::size_t background_size{ 256 };
  std::uint64_t seed{ 0 };
};

//! Background sample drawn without replacement from X.
inline RowMatrix sample_background(const RowMatrix& X, std::size_t n, std::uint64_t seed)
{
  if (X.rows() == 0)
    throw std::invalid_argument("sample_background: no records");
  std::vector<std::size_t> idx(static_cast<std::size_t>(X.rows()));
  std::iota(idx.begin(), idx.end(), std::size_t{ 0 });
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, idx.size()));
  std::sort(idx.begin(), idx.end());
  RowMatrix B(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (std::size_t k = 0; k < idx.size(); ++k)
    B.row(static_cast<Eigen::Index>(k)) = X.row(static_cast<Eigen::Index>(idx[k]));
  return B;
}

//! Exact marginal Shapley attributions of the ensemble, centred on X.
inline EncoderSet shapley_encoders(const Ensemble& e, const RowMatrix& X, RowMatrix background,
                                   const std::vector<std::string>& feature_names = {})
{
  detail::check_background(background, e.n_features);
  std::vector<std::string> names;
  std::vector<Provenance> prov;
  for (std::size_t f = 0; f < e.n_features; ++f) {
    names.push_back("phi:" + (f < feature_names.size() ? feature_names[f] : "x" + std::to_string(f + 1)));
    prov.push_back({ EncoderKind::shapley, static_cast<int>(f), 0 });
  }
  EncoderSet set;
  detail::append_block(set, ShapleyBlock{ std::move(background) }, std::move(names), std::move(prov), X, &e);
  return set;
}

//! Column concatenation of encoder sets.
inline EncoderSet concat(const EncoderSet& a, const EncoderSet& b)
{
  EncoderSet out = a;
  out.evaluations = 0;
  out.blocks.insert(out.blocks.end(), b.blocks.begin(), b.blocks.end());
  out.names.insert(out.names.end(), b.names.begin(), b.names.end());
  out.provenance.insert(out.provenance.end(), b.provenance.begin(), b.provenance.end());
  out.center.insert(out.center.end(), b.center.begin(), b.center.end());
  out.scale.insert(out.scale.end(), b.scale.begin(), b.scale.end());
  return out;
}

// ---------------------------------------------------------------------------
// Explanations

struct ExplanationSet
{
  RowMatrix values; // records x features
  double reference{ 0.0 };
};

//! E(x; f_theta) = E(x; f*) - sum_j theta_j E(x; w_j).
inline ExplanationSet reconstruct_explanations(const ExplanationSet& base,
                                               const std::vector<ExplanationSet>& encoder_expl,
                                               const Eigen::VectorXd& theta)
{
  if (static_cast<std::size_t>(theta.size()) != encoder_expl.size())
    throw std::invalid_argument("reconstruct_explanations: theta and encoder count differ");
  ExplanationSet out = base;
  for (std::size_t j = 0; j < encoder_expl.size(); ++j) {
    const auto& e = encoder_expl[j];
    if (e.values.rows() != base.values.rows() || e.values.cols() != base.values.cols())
      throw std::invalid_argument("reconstruct_explanations: shape mismatch");
    const double t = theta[static_cast<Eigen::Index>(j)];
    out.values -= t * e.values;
    out.reference -= t * e.reference;
  }
  return out;
}

//! Marginal Shapley explanations of each standardised encoder column
//! (column 0 included as the all-zero explanation of the constant).
inline std::vector<ExplanationSet> explain_encoders(const EncoderSet& set, const RowMatrix& X,
                                                    const RowMatrix& background, const Ensemble* model)
{
  detail::check_background(background, static_cast<std::size_t>(X.cols()));
  std::vector<ExplanationSet> out;
  out.push_back({ RowMatrix::Zero(X.rows(), X.cols()), 1.0 });
  std::size_t col = 0;
  auto next_scale = [&](ExplanationSet e, double raw_ref) {
    e.values /= set.scale[col];
    e.reference = (raw_ref - set.center[col]) / set.scale[col];
    ++col;
    out.push_back(std::move(e));
  };
  for (const auto& block : set.blocks) {
    if (const auto* a = std::get_if<AdditiveBlock>(&block)) {
      // single-feature function: phi_i = q(x_i) - mean_b q(b_i)
      AdditiveBlock one = *a;
      RowMatrix rx(X.rows(), static_cast<Eigen::Index>(a->features.size() * static_cast<std::size_t>(a->degree)));
      RowMatrix rb(background.rows(), rx.cols());
      Eigen::Index c = 0;
      detail::fill_additive(one, X, rx, c);
      c = 0;
      detail::fill_additive(one, background, rb, c);
      for (Eigen::Index j = 0; j < rx.cols(); ++j) {
        const int f = a->features[static_cast<std::size_t>(j / a->degree)];
        const double mb = rb.col(j).mean();
        ExplanationSet e{ RowMatrix::Zero(X.rows(), X.cols()), 0.0 };
        e.values.col(f) = rx.col(j).array() - mb;
        next_scale(std::move(e), mb);
      }
    } else if (const auto* p = std::get_if<TreePcaBlock>(&block)) {
      if (!model)
        throw std::invalid_argument("explain_encoders: tree-pca needs the base ensemble");
      const RowMatrix Tb = model->per_tree_outputs(background);
      for (Eigen::Index k = 0; k < p->loadings.cols(); ++k) {
        std::vector<double> w(model->n_trees(), 0.0);
        double ref = 0.0;
        for (std::size_t q = 0; q < p->trees.size(); ++q) {
          const double a = p->loadings(static_cast<Eigen::Index>(q), k);
          w[static_cast<std::size_t>(p->trees[q])] = a;
          ref += a * (Tb.col(p->trees[q]).mean() - p->tree_mean[static_cast<Eigen::Index>(q)]);
        }
        next_scale({ tree_shapley_values(*model, X, background, w), 0.0 }, ref);
      }
    } else {
      throw std::invalid_argument("explain_encoders: shapley encoder columns have no closed-form explanation");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json to_json(const EncoderSet& s)
{
  nlohmann::json j;
  j["format"] = "fairfront-encoders-1";
  j["names"] = s.names;
  j["center"] = s.center;
  j["scale"] = s.scale;
  auto& prov = j["provenance"] = nlohmann::json::array();
  for (const auto& p : s.provenance)
    prov.push_back({ { "kind", to_string(p.kind) }, { "feature", p.feature }, { "index", p.index } });
  auto& blocks = j["blocks"] = nlohmann::json::array();
  for (const auto& b : s.blocks) {
    if (const auto* a = std::get_if<AdditiveBlock>(&b)) {
      blocks.push_back({ { "kind", "additive" },
                         { "basis", to_string(a->basis) },
                         { "degree", a->degree },
                         { "features", a->features },
                         { "lo", a->lo },
                         { "hi", a->hi } });
    } else if (const auto* p = std::get_if<TreePcaBlock>(&b)) {
      std::vector<std::vector<double>> load(static_cast<std::size_t>(p->loadings.cols()));
      for (Eigen::Index k = 0; k < p->loadings.cols(); ++k)
        for (Eigen::Index q = 0; q < p->loadings.rows(); ++q)
          load[static_cast<std::size_t>(k)].push_back(p->loadings(q, k));
      blocks.push_back({ { "kind", "tree-pca" },
                         { "trees", p->trees },
                         { "tree_mean", std::vector<double>(p->tree_mean.data(), p->tree_mean.data() + p->tree_mean.size()) },
                         { "loadings", load },
                         { "eigenvalues", p->eigenvalues },
                         { "fitted_records", p->fitted_records } });
    } else {
      const auto& bg = std::get<ShapleyBlock>(b).background;
      std::vector<std::vector<double>> rows(static_cast<std::size_t>(bg.rows()));
      for (Eigen::Index i = 0; i < bg.rows(); ++i)
        rows[static_cast<std::size_t>(i)].assign(bg.row(i).data(), bg.row(i).data() + bg.cols());
      blocks.push_back({ { "kind", "shapley" }, { "background", rows } });
    }
  }
  return j;
}

inline EncoderSet encoder_set_from_json(const nlohmann::json& j)
{
  if (j.value("format", "") != "fairfront-encoders-1")
    throw std::runtime_error("encoder_set_from_json: unrecognised format");
  EncoderSet s;
  s.names = j.at("names").get<std::vector<std::string>>();
  s.center = j.at("center").get<std::vector<double>>();
  s.scale = j.at("scale").get<std::vector<double>>();
  for (const auto& p : j.at("provenance")) {
    const auto kind = p.at("kind").get<std::string>();
    Provenance pr;
    pr.kind = kind == "additive" ? EncoderKind::additive : kind == "tree-pca" ? EncoderKind::tree_pca : EncoderKind::shapley;
    pr.feature = p.at("feature").get<int>();
    pr.index = p.at("index").get<int>();
    s.provenance.push_back(pr);
  }
  for (const auto& b : j.at("blocks")) {
    const auto kind = b.at("kind").get<std::string>();
    if (kind == "additive") {
      AdditiveBlock a;
      a.basis = basis_from_string(b.at("basis").get<std::string>());
      a.degree = b.at("degree").get<int>();
      a.features = b.at("features").get<std::vector<int>>();
      a.lo = b.at("lo").get<std::vector<double>>();
      a.hi = b.at("hi").get<std::vector<double>>();
      s.blocks.push_back(std::move(a));
    } else if (kind == "tree-pca") {
      TreePcaBlock p;
      p.trees = b.at("trees").get<std::vector<int>>();
      const auto mean = b.at("tree_mean").get<std::vector<double>>();
      p.tree_mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
      const auto load = b.at("loadings").get<std::vector<std::vector<double>>>();
      p.loadings.resize(static_cast<Eigen::Index>(p.trees.size()), static_cast<Eigen::Index>(load.size()));
      for (std::size_t k = 0; k < load.size(); ++k) {
        if (load[k].size() != p.trees.size())
          throw std::runtime_error("encoder_set_from_json: loading length mismatch");
        for (std::size_t q = 0; q < load[k].size(); ++q)
          p.loadings(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(k)) = load[k][q];
      }
      p.eigenvalues = b.at("eigenvalues").get<std::vector<double>>();
      p.fitted_records = b.value("fitted_records", std::size_t{ 0 });
      s.blocks.push_back(std::move(p));
    } else if (kind == "shapley") {
      const auto rows = b.at("background").get<std::vector<std::vector<double>>>();
      RowMatrix bg(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t f = 0; f < rows[i].size(); ++f)
          bg(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f)) = rows[i][f];
      s.blocks.push_back(ShapleyBlock{ std::move(bg) });
    } else {
      throw std::runtime_error("encoder_set_from_json: unknown block kind '" + kind + "'");
    }
  }
  if (s.center.size() != s.names.size() || s.scale.size() != s.names.size() || s.provenance.size() != s.names.size())
    throw std::runtime_error("encoder_set_from_json: column metadata length mismatch");
  return s;
}

//! Columnar CSV of the standardised encoder matrix plus a JSON sidecar.
inline void write_encoders(const EncoderSet& s, const RowMatrix& W, const std::string& path)
{
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("write_encoders: cannot open " + path);
  out << "const";
  for (const auto& n : s.names)
    out << ',' << n;
  out << '\n';
  char buf[40];
  for (Eigen::Index i = 0; i < W.rows(); ++i) {
    for (Eigen::Index j = 0; j < W.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", W(i, j));
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
  std::ofstream(path + ".json") << to_json(s).dump(2) << '\n';
}

} // namespace fairfront
