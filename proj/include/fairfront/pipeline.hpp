#pragma once

// Glue shared by the command-line tool and the end-to-end checks: a base model
// bundled with its preprocessing, encoder construction by name, and
// self-contained candidate documents that can be re-evaluated on new data.

#include "fairfront/baselines.hpp"
#include "fairfront/data.hpp"
#include "fairfront/encoders.hpp"
#include "fairfront/frontier.hpp"
#include "fairfront/gbdt.hpp"
#include "fairfront/optimizer.hpp"

#include <nlohmann/json.hpp>

#include <stdexcept>
#include <string>
#include <vector>

namespace fairfront {

//! Trained ensemble plus what is needed to feed it new CSV records.
struct BaseModel
{
  Ensemble ensemble;
  Preprocessing prep;
  std::vector<std::string> feature_names;
  std::string label_column{ "y" };
  std::string group_column{ "g" };
  std::vector<long long> group_codes;

  CsvOptions csv_options() const
  {
    CsvOptions o;
    o.label_column = label_column;
    o.group_column = group_column;
    o.group_codes = group_codes;
    return o;
  }

  //! Loads a CSV with the training group order and applies the fitted preprocessing.
  Dataset load(const std::string& path) const
  {
    auto d = load_csv(path, csv_options());
    if (d.feature_names != feature_names)
      throw std::runtime_error("dataset " + path + ": feature columns differ from the training data");
    return apply_preprocessing(std::move(d), prep);
  }
};

inline nlohmann::json to_json(const BaseModel& m)
{
  nlohmann::json j;
  j["format"] = "fairfront-model-1";
  j["ensemble"] = to_json(m.ensemble);
  j["features"] = m.feature_names;
  j["label_column"] = m.label_column;
  j["group_column"] = m.group_column;
  j["group_codes"] = m.group_codes;
  j["impute_means"] = m.prep.impute_means;
  j["center"] = m.prep.center;
  j["scale"] = m.prep.scale;
  return j;
}

inline BaseModel base_model_from_json(const nlohmann::json& j)
{
  if (j.value("format", "") != "fairfront-model-1")
    throw std::runtime_error("model: expected format fairfront-model-1");
  BaseModel m;
  m.ensemble = ensemble_from_json(j.at("ensemble"));
  m.feature_names = j.at("features").get<std::vector<std::string>>();
  m.label_column = j.at("label_column").get<std::string>();
  m.group_column = j.at("group_column").get<std::string>();
  m.group_codes = j.at("group_codes").get<std::vector<long long>>();
  m.prep.impute_means = j.at("impute_means").get<std::vector<double>>();
  m.prep.center = j.at("center").get<std::vector<double>>();
  m.prep.scale = j.at("scale").get<std::vector<double>>();
  if (m.feature_names.size() != m.ensemble.n_features || m.prep.impute_means.size() != m.ensemble.n_features)
    throw std::runtime_error("model: feature count mismatch");
  return m;
}

struct BaseTrainOptions
{
  GbdtParams gbdt{ 3, 300, 0.1, 1.0, 1.0, 30, 1.0, 0 };
  double valid_fraction{ 0.2 }; // held out of train for early stopping; 0 disables
  std::uint64_t seed{ 0 };
};

//! Fits imputation on `train`, then the gbdt with an internal early-stopping split.
inline BaseModel train_base_model(const Dataset& raw_train, const BaseTrainOptions& opt = {})
{
  BaseModel m;
  m.prep = fit_preprocessing(raw_train, false);
  const auto train = apply_preprocessing(raw_train, m.prep);
  m.feature_names = train.feature_names;
  m.label_column = train.label_name;
  m.group_column = train.group_name;
  m.group_codes = train.group_codes;
  if (!(opt.valid_fraction >= 0.0 && opt.valid_fraction < 1.0))
    throw std::invalid_argument("train_base_model: valid_fraction must lie in [0, 1)");
  if (opt.valid_fraction > 0.0) {
    const auto [fit, valid] = split(train, 1.0 - opt.valid_fraction, opt.seed);
    m.ensemble = train_gbdt(fit.X, fit.y, {}, opt.gbdt, ValidationSet{ &valid.X, valid.y, {} });
  } else {
    m.ensemble = train_gbdt(train.X, train.y, {}, opt.gbdt);
  }
  return m;
}

struct EncodeOptions
{
  EncoderKind kind{ EncoderKind::tree_pca };
  std::size_t components{ 40 };
  int degree{ 1 };
  Basis basis{ Basis::legendre };
  std::size_t background{ 256 };
  std::uint64_t seed{ 0 };
};

inline EncoderKind encoder_kind_from_string(const std::string& s)
{
  if (s == "additive")
    return EncoderKind::additive;
  if (s == "tree-pca")
    return EncoderKind::tree_pca;
  if (s == "shapley")
    return EncoderKind::shapley;
  throw std::invalid_argument("unknown encoder method '" + s + "' (additive, tree-pca, shapley)");
}

inline EncoderSet build_encoders(const BaseModel& m, const Dataset& train, const EncodeOptions& opt)
{
  switch (opt.kind) {
    case EncoderKind::additive:
      return additive_encoders(train.X, opt.degree, opt.basis, m.feature_names);
    case EncoderKind::tree_pca: {
      TreePcaOptions t;
      t.seed = opt.seed;
      return tree_pca_encoders(m.ensemble, train.X, opt.components, t);
    }
    case EncoderKind::shapley:
      return shapley_encoders(m.ensemble, train.X, sample_background(train.X, opt.background, opt.seed),
                              m.feature_names);
  }
  throw std::invalid_argument("build_encoders: unknown kind");
}

inline LinearFamily linear_family(const BaseModel& m, const EncoderSet& enc, const RowMatrix& X)
{
  return LinearFamily(m.ensemble.predict_raw(X), enc.matrix(X, &m.ensemble));
}

inline MitigationData mitigation_data(const BaseModel& m, const EncoderSet& enc, const Dataset& train)
{
  MitigationData d{ linear_family(m, enc, train.X), train.y, train.g, train.n_groups, {} };
  for (Eigen::Index i = 0; i < d.family.base_scores.size(); ++i)
    d.teacher.push_back(sigmoid(d.family.base_scores[i]));
  return d;
}

// ---------------------------------------------------------------------------
// candidate documents

inline nlohmann::json linear_candidates_json(const std::string& method,
                                             const BaseModel& m,
                                             const EncoderSet& enc,
                                             const std::vector<Candidate>& cands)
{
  return { { "format", "fairfront-candidates-1" },
           { "family", "linear" },
           { "method", method },
           { "model", to_json(m) },
           { "encoders", to_json(enc) },
           { "candidates", to_json(cands) } };
}

inline nlohmann::json rescale_candidates_json(const BaseModel& m, const RescaleResult& r)
{
  auto arr = nlohmann::json::array();
  for (const auto& c : r.candidates)
    arr.push_back({ { "a", c.a }, { "x_star", c.x_star }, { "train_ce", c.train_ce }, { "train_w1", c.train_w1 } });
  return { { "format", "fairfront-candidates-1" },
           { "family", "rescale" },
           { "method", "rescale" },
           { "model", to_json(m) },
           { "features", r.features },
           { "omegas", r.omegas },
           { "best", r.best },
           { "candidates", arr } };
}

inline nlohmann::json ot_candidates_json(const BaseModel& m, const OtProjection& p)
{
  return { { "format", "fairfront-candidates-1" },
           { "family", "ot" },
           { "method", "ot-projection" },
           { "model", to_json(m) },
           { "projected", to_json(p.projected) },
           { "candidates", to_json(ot_candidates(p.thetas)) } };
}

//! Exact metrics of every candidate in a document on `d` (already preprocessed).
inline std::vector<FrontierPoint> evaluate_document(const nlohmann::json& doc, const Dataset& d,
                                                    const std::string& split_name)
{
  if (doc.value("format", "") != "fairfront-candidates-1")
    throw std::runtime_error("candidates: expected format fairfront-candidates-1");
  const auto m = base_model_from_json(doc.at("model"));
  const auto family = doc.at("family").get<std::string>();
  const auto method = doc.at("method").get<std::string>();
  if (family == "linear") {
    const auto enc = encoder_set_from_json(doc.at("encoders"));
    return evaluate(candidates_from_json(doc.at("candidates")), linear_family(m, enc, d.X), d.y, d.g, d.n_groups,
                    method, split_name);
  }
  if (family == "ot") {
    const auto projected = ensemble_from_json(doc.at("projected"));
    return evaluate(candidates_from_json(doc.at("candidates")), ot_family(m.ensemble, projected, d.X), d.y, d.g,
                    d.n_groups, method, split_name);
  }
  if (family == "rescale") {
    RescaleResult r;
    r.features = doc.at("features").get<std::vector<std::size_t>>();
    r.omegas = doc.at("omegas").get<std::vector<double>>();
    r.best = doc.at("best").get<std::vector<std::size_t>>();
    for (const auto& c : doc.at("candidates"))
      r.candidates.push_back({ c.at("a").get<std::vector<double>>(), c.at("x_star").get<std::vector<double>>(),
                               c.at("train_ce").get<double>(), c.at("train_w1").get<double>() });
    return evaluate_rescaling(m.ensemble, r, d.X, d.y, d.g, d.n_groups, split_name);
  }
  throw std::runtime_error("candidates: unknown family '" + family + "'");
}

} // namespace fairfront
