// fairfront: batch front end. Every subcommand reads an optional JSON config
// (--config), lets flags override it, and writes a run_manifest.json next to
// its outputs.

#include "fairfront/pipeline.hpp"

#include <CLI11.hpp>
#include <boost/version.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fairfront;

namespace {

constexpr const char* kVersion = "0.1.0";

struct ConfigError : std::runtime_error
{
  using std::runtime_error::runtime_error;
};

enum class Kind
{
  text,
  integer,
  real,
  boolean,
  text_list
};

struct Field
{
  std::string name;
  Kind kind;
  json def; // null: required
  std::string help;
};

const char* kind_name(Kind k)
{
  switch (k) {
    case Kind::text:
      return "string";
    case Kind::integer:
      return "integer";
    case Kind::real:
      return "number";
    case Kind::boolean:
      return "boolean";
    case Kind::text_list:
      return "list of strings";
  }
  return "?";
}

std::vector<Field> common_fields()
{
  return { { "seed", Kind::integer, 0, "seed for every random choice" },
           { "label", Kind::text, "y", "label column" },
           { "group", Kind::text, "g", "protected-group column" } };
}

std::vector<Field> gbdt_fields(int depth, int rounds, double lr, int early)
{
  return { { "depth", Kind::integer, depth, "tree depth" },
           { "rounds", Kind::integer, rounds, "boosting rounds" },
           { "learning-rate", Kind::real, lr, "shrinkage" },
           { "early-stop", Kind::integer, early, "early-stopping patience, 0 disables" },
           { "valid-fraction", Kind::real, 0.2, "train fraction held out for early stopping" },
           { "min-leaf", Kind::real, 1.0, "minimum hessian per leaf" },
           { "lambda", Kind::real, 1.0, "L2 leaf penalty" },
           { "subsample", Kind::real, 1.0, "row fraction per round" } };
}

std::vector<Field> encoder_fields()
{
  return { { "method", Kind::text, "tree-pca", "additive, tree-pca or shapley" },
           { "components", Kind::integer, 40, "tree-pca components" },
           { "degree", Kind::integer, 1, "additive polynomial degree" },
           { "basis", Kind::text, "legendre", "additive basis: legendre or monomial" },
           { "background", Kind::integer, 256, "shapley background records" } };
}

std::map<std::string, std::vector<Field>> command_fields()
{
  std::map<std::string, std::vector<Field>> f;
  f["generate"] = { { "model", Kind::text, "m1", "m1 or m2" },
                    { "n", Kind::integer, 20000, "records" },
                    { "split", Kind::real, 0.5, "train fraction for train.csv/test.csv, 0 skips" },
                    { "out", Kind::text, nullptr, "output directory" } };
  f["train-base"] = { { "train", Kind::text, nullptr, "training CSV" }, { "out", Kind::text, nullptr, "output directory" } };
  for (auto& x : gbdt_fields(3, 300, 0.1, 30))
    f["train-base"].push_back(x);
  f["encode"] = { { "train", Kind::text, nullptr, "training CSV" },
                  { "base", Kind::text, nullptr, "model.json" },
                  { "out", Kind::text, nullptr, "output directory" } };
  for (auto& x : encoder_fields())
    f["encode"].push_back(x);
  f["mitigate"] = { { "train", Kind::text, nullptr, "training CSV" },
                    { "test", Kind::text, nullptr, "test CSV" },
                    { "base", Kind::text, nullptr, "model.json" },
                    { "encoders", Kind::text, "", "encoders.json from encode; built from train when empty" },
                    { "out", Kind::text, nullptr, "output directory" },
                    { "estimator", Kind::text, "discrete", "bias estimator variant" },
                    { "cost", Kind::text, "square", "abs or square" },
                    { "relaxation", Kind::text, "logistic", "relaxation family" },
                    { "s", Kind::real, 20.0, "relaxation scale" },
                    { "grid", Kind::integer, 129, "threshold grid intervals (dt = 1/grid)" },
                    { "thresholds", Kind::integer, 256, "Monte Carlo thresholds" },
                    { "kde-bandwidth", Kind::real, 0.0, "KDE bandwidth, 0 selects Silverman" },
                    { "unbiased", Kind::boolean, true, "unbiased square-cost correction" },
                    { "omegas", Kind::integer, 21, "number of omega values" },
                    { "scale", Kind::text, "loss-bias-ratio", "omega scale: one or loss-bias-ratio" },
                    { "form", Kind::text, "penalized", "penalized or lagrangian" },
                    { "loss", Kind::text, "cross-entropy", "cross-entropy or distill" },
                    { "sgd-learning-rate", Kind::real, 0.01, "SGD step size" },
                    { "epochs", Kind::integer, 20, "epochs per omega" },
                    { "batches", Kind::integer, 0, "steps per epoch, 0 = ceil(N / batch-perf)" },
                    { "batch-perf", Kind::integer, 1024, "records per loss batch" },
                    { "batch-bias", Kind::integer, 1024, "records per group per bias batch" },
                    { "box", Kind::real, 100.0, "theta box half-width" } };
  for (auto& x : encoder_fields())
    f["mitigate"].push_back(x);
  f["baseline-rescale"] = { { "train", Kind::text, nullptr, "training CSV" },
                            { "test", Kind::text, nullptr, "test CSV" },
                            { "base", Kind::text, nullptr, "model.json" },
                            { "out", Kind::text, nullptr, "output directory" },
                            { "features", Kind::text_list, json::array({ "all" }), "features to rescale" },
                            { "iterations", Kind::integer, 1150, "random-search iterations" },
                            { "omegas", Kind::integer, 21, "number of omega values" },
                            { "omega-step", Kind::real, 0.5, "omega spacing" } };
  f["baseline-ot"] = { { "train", Kind::text, nullptr, "training CSV" },
                       { "test", Kind::text, nullptr, "test CSV" },
                       { "base", Kind::text, nullptr, "model.json" },
                       { "out", Kind::text, nullptr, "output directory" },
                       { "thetas", Kind::integer, 15, "interpolation points in [0, 1]" } };
  for (auto& x : gbdt_fields(8, 1000, 0.02, 10))
    f["baseline-ot"].push_back(x);
  f["evaluate"] = { { "candidates", Kind::text, nullptr, "candidates.json" },
                    { "test", Kind::text, nullptr, "CSV to score" },
                    { "split-name", Kind::text, "test", "split column value" },
                    { "out", Kind::text, "", "output directory, default <candidates dir>/evaluate" } };
  f["report"] = { { "runs", Kind::text_list, nullptr, "run directories holding frontier.csv" },
                  { "out", Kind::text, nullptr, "output directory" } };
  for (auto& [name, fields] : f)
    for (auto& x : common_fields())
      fields.push_back(x);
  return f;
}

json typed(const Field& f, const json& v, const std::string& where)
{
  auto bad = [&] { throw ConfigError(where + " '" + f.name + "': expected " + kind_name(f.kind)); };
  switch (f.kind) {
    case Kind::text:
      if (!v.is_string())
        bad();
      return v;
    case Kind::integer:
      if (!v.is_number_integer())
        bad();
      return v;
    case Kind::real:
      if (!v.is_number())
        bad();
      return v.get<double>();
    case Kind::boolean:
      if (!v.is_boolean())
        bad();
      return v;
    case Kind::text_list:
      if (v.is_string())
        return json::array({ v });
      if (!v.is_array())
        bad();
      for (const auto& e : v)
        if (!e.is_string())
          bad();
      return v;
  }
  return v;
}

json parse_flag(const Field& f, const std::string& s)
{
  const std::string where = "flag --" + f.name;
  try {
    std::size_t used = 0;
    switch (f.kind) {
      case Kind::text:
        return s;
      case Kind::integer: {
        const long long v = std::stoll(s, &used);
        if (used != s.size())
          break;
        return v;
      }
      case Kind::real: {
        const double v = std::stod(s, &used);
        if (used != s.size())
          break;
        return v;
      }
      case Kind::boolean:
        if (s == "true" || s == "1")
          return true;
        if (s == "false" || s == "0")
          return false;
        break;
      case Kind::text_list: {
        json arr = json::array();
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ','))
          if (!item.empty())
            arr.push_back(item);
        return arr;
      }
    }
  } catch (const std::exception&) {
  }
  throw ConfigError(where + ": expected " + std::string(kind_name(f.kind)) + ", got '" + s + "'");
}

//! defaults <- config file (top level, then the section named after the command) <- flags
json resolve(const std::string& command,
             const std::vector<Field>& fields,
             const std::string& config_path,
             const std::map<std::string, std::vector<std::string>>& flags)
{
  json cfg = json::object();
  for (const auto& f : fields)
    if (!f.def.is_null())
      cfg[f.name] = f.def;
  auto find = [&](const std::string& name) -> const Field* {
    for (const auto& f : fields)
      if (f.name == name)
        return &f;
    return nullptr;
  };
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in)
      throw ConfigError("config: cannot open " + config_path);
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config: " + config_path + " is not valid JSON: " + e.what());
    }
    if (!doc.is_object())
      throw ConfigError("config: top level must be an object");
    const auto all = command_fields();
    auto apply = [&](const json& obj, const std::string& where) {
      for (const auto& [k, v] : obj.items()) {
        if (all.count(k)) {
          if (!v.is_object())
            throw ConfigError(where + " section '" + k + "' must be an object");
          continue;
        }
        const Field* f = find(k);
        if (!f) {
          if (where != "config")
            throw ConfigError(where + ": unknown field '" + k + "'");
          bool elsewhere = false;
          for (const auto& [c, fs] : all)
            for (const auto& g : fs)
              elsewhere |= g.name == k;
          if (!elsewhere)
            throw ConfigError("config: unknown field '" + k + "'");
          continue;
        }
        cfg[k] = typed(*f, v, where + " field");
      }
    };
    apply(doc, "config");
    if (doc.contains(command))
      apply(doc.at(command), "config." + command);
  }
  for (const auto& [name, values] : flags) {
    if (values.empty())
      continue;
    const Field* f = find(name);
    cfg[name] = parse_flag(*f, values.back());
  }
  for (const auto& f : fields)
    if (!cfg.contains(f.name))
      throw ConfigError("missing required field '" + f.name + "' (flag --" + f.name + " or config key)");
  return cfg;
}

std::uint64_t fnv1a(const std::string& s)
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v)
{
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const std::string& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const std::string& path)
{
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + " is not valid JSON: " + e.what());
  }
}

//! Tracks outputs of one subcommand and writes the manifest.
class Run
{
public:
  Run(std::string command, json config, fs::path out)
    : command_(std::move(command))
    , config_(std::move(config))
    , out_(std::move(out))
    , hash_("fnv1a64:" + hex64(fnv1a(config_.dump())))
    , start_(std::chrono::steady_clock::now())
    , stage_start_(start_)
  {
    fs::create_directories(out_);
  }

  const fs::path& out() const { return out_; }

  std::string path(const std::string& name) const { return (out_ / name).string(); }

  void stage(const std::string& name)
  {
    const auto now = std::chrono::steady_clock::now();
    timings_[name] = std::chrono::duration<double>(now - stage_start_).count();
    stage_start_ = now;
  }

  void artifact(const std::string& name)
  {
    const auto bytes = read_file(path(name));
    artifacts_.push_back({ { "path", name },
                           { "bytes", bytes.size() },
                           { "fnv1a64", hex64(fnv1a(bytes)) },
                           { "config_hash", hash_ } });
  }

  void write_text(const std::string& name, const std::string& text)
  {
    std::ofstream(path(name), std::ios::binary) << text;
    artifact(name);
  }

  json& results() { return results_; }

  void finish(const std::string& error = {})
  {
    json m;
    m["tool"] = "fairfront";
    m["command"] = command_;
    m["config"] = config_;
    m["config_hash"] = hash_;
    m["seeds"] = { { "seed", config_.value("seed", 0) } };
    m["versions"] = { { "fairfront", kVersion },
                      { "compiler", __VERSION__ },
                      { "eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION) },
                      { "boost", BOOST_LIB_VERSION },
                      { "nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_PATCH) } };
    m["threads"] = worker_count();
    m["timings_s"] = timings_;
    m["timings_s"]["total"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    m["status"] = error.empty() ? "complete" : "failed";
    if (!error.empty()) {
      m["error"] = error;
      for (auto& a : artifacts_)
        a["partial"] = true;
    }
    m["artifacts"] = artifacts_;
    if (!results_.is_null())
      m["results"] = results_;
    std::ofstream(path("run_manifest.json")) << m.dump(2) << '\n';
  }

private:
  std::string command_;
  json config_;
  fs::path out_;
  std::string hash_;
  std::chrono::steady_clock::time_point start_, stage_start_;
  std::map<std::string, double> timings_;
  json artifacts_ = json::array();
  json results_;
};

std::uint64_t seed_of(const json& c) { return static_cast<std::uint64_t>(c.at("seed").get<long long>()); }

std::size_t count_of(const json& c, const std::string& key, std::size_t min = 0)
{
  const auto v = c.at(key).get<long long>();
  if (v < static_cast<long long>(min))
    throw ConfigError("field '" + key + "' must be >= " + std::to_string(min));
  return static_cast<std::size_t>(v);
}

GbdtParams gbdt_params(const json& c)
{
  GbdtParams p;
  p.depth = static_cast<int>(count_of(c, "depth", 1));
  p.rounds = static_cast<int>(count_of(c, "rounds"));
  p.learning_rate = c.at("learning-rate").get<double>();
  p.early_stop_rounds = static_cast<int>(count_of(c, "early-stop"));
  p.min_leaf = c.at("min-leaf").get<double>();
  p.lambda = c.at("lambda").get<double>();
  p.subsample = c.at("subsample").get<double>();
  p.seed = seed_of(c);
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return p;
}

EncodeOptions encode_options(const json& c)
{
  EncodeOptions o;
  try {
    o.kind = encoder_kind_from_string(c.at("method").get<std::string>());
    o.basis = basis_from_string(c.at("basis").get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("field 'method'/'basis': ") + e.what());
  }
  o.components = count_of(c, "components", 1);
  o.degree = static_cast<int>(count_of(c, "degree", 1));
  o.background = count_of(c, "background", 1);
  o.seed = seed_of(c);
  return o;
}

BaseModel load_model(const json& c) { return base_model_from_json(read_json(c.at("base").get<std::string>())); }

void write_frontier(Run& run, const std::vector<FrontierPoint>& pts)
{
  run.write_text("frontier.csv", frontier_csv(pts));
  run.write_text("frontier.svg", frontier_svg(pts));
}

//! Serialize, re-read and score, so `evaluate` later follows the same path.
std::vector<FrontierPoint> finish_candidates(Run& run, const json& doc, const Dataset& test)
{
  const std::string text = doc.dump(1) + "\n";
  run.write_text("candidates.json", text);
  return evaluate_document(json::parse(text), test, "test");
}

// ---------------------------------------------------------------------------

void cmd_generate(Run& run, const json& c)
{
  const auto model = c.at("model").get<std::string>();
  const auto n = count_of(c, "n", 2);
  Dataset d;
  if (model == "m1")
    d = generate_m1(n, seed_of(c));
  else if (model == "m2")
    d = generate_m2(n, seed_of(c));
  else
    throw ConfigError("field 'model': expected m1 or m2, got '" + model + "'");
  d.label_name = c.at("label").get<std::string>();
  d.group_name = c.at("group").get<std::string>();
  run.stage("generate");
  write_csv(d, run.path("data.csv"));
  run.artifact("data.csv");
  run.artifact("data.csv.json");
  const double frac = c.at("split").get<double>();
  if (frac > 0.0) {
    if (!(frac < 1.0))
      throw ConfigError("field 'split' must lie in [0, 1)");
    const auto [train, test] = split(d, frac, seed_of(c));
    write_csv(train, run.path("train.csv"));
    write_csv(test, run.path("test.csv"));
    for (const char* a : { "train.csv", "train.csv.json", "test.csv", "test.csv.json" })
      run.artifact(a);
    run.results() = { { "n_train", train.size() }, { "n_test", test.size() } };
  }
  run.stage("write");
}

void cmd_train_base(Run& run, const json& c)
{
  CsvOptions csv;
  csv.label_column = c.at("label").get<std::string>();
  csv.group_column = c.at("group").get<std::string>();
  const auto train = load_csv(c.at("train").get<std::string>(), csv);
  BaseTrainOptions opt;
  opt.gbdt = gbdt_params(c);
  opt.valid_fraction = c.at("valid-fraction").get<double>();
  opt.seed = seed_of(c);
  run.stage("load");
  const auto m = train_base_model(train, opt);
  run.stage("train");
  run.write_text("model.json", to_json(m).dump(1) + "\n");
  const auto d = apply_preprocessing(train, m.prep);
  const Eigen::VectorXd raw = m.ensemble.predict_raw(d.X);
  std::vector<double> p(d.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    p[i] = sigmoid(raw[static_cast<Eigen::Index>(i)]);
  const auto met = score_metrics(p, d.y, d.g, d.n_groups);
  run.results() = { { "trees", m.ensemble.n_trees() }, { "train_ce", met.ce }, { "train_auc", met.auc },
                    { "train_w1", met.w1 }, { "train_ks", met.ks } };
  std::printf("trees %zu  train ce %.4f auc %.4f w1 %.4f\n", m.ensemble.n_trees(), met.ce, met.auc, met.w1);
}

void cmd_encode(Run& run, const json& c)
{
  const auto m = load_model(c);
  const auto train = m.load(c.at("train").get<std::string>());
  run.stage("load");
  const auto enc = build_encoders(m, train, encode_options(c));
  run.stage("encode");
  std::ofstream(run.path("encoders.json")) << to_json(enc).dump(1) << '\n';
  run.artifact("encoders.json");
  write_encoders(enc, enc.matrix(train.X, &m.ensemble), run.path("encoders.csv"));
  run.artifact("encoders.csv");
  run.artifact("encoders.csv.json");
  run.results() = { { "columns", enc.names.size() } };
}

void cmd_mitigate(Run& run, const json& c)
{
  const auto m = load_model(c);
  const auto train = m.load(c.at("train").get<std::string>());
  const auto test = m.load(c.at("test").get<std::string>());
  run.stage("load");

  const auto enc_path = c.at("encoders").get<std::string>();
  const auto enc = enc_path.empty() ? build_encoders(m, train, encode_options(c))
                                    : encoder_set_from_json(read_json(enc_path));
  const std::string method = enc_path.empty() ? c.at("method").get<std::string>() : std::string("custom");
  auto data = mitigation_data(m, enc, train);
  const double box = c.at("box").get<double>();
  if (!(box > 0.0))
    throw ConfigError("field 'box' must be > 0");
  data.family.theta_lo.setConstant(-box);
  data.family.theta_hi.setConstant(box);
  run.stage("encode");

  BiasEstimatorSpec spec;
  SweepConfig cfg;
  try {
    spec.variant = estimator_variant_from_string(c.at("estimator").get<std::string>());
    spec.cost = CostFunction{ cost_kind_from_string(c.at("cost").get<std::string>()) };
    spec.relaxation.kind = relaxation_kind_from_string(c.at("relaxation").get<std::string>());
    cfg.scale = omega_scale_from_string(c.at("scale").get<std::string>());
    cfg.form = objective_form_from_string(c.at("form").get<std::string>());
    cfg.loss = loss_kind_from_string(c.at("loss").get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  spec.relaxation.s = c.at("s").get<double>();
  spec.dt = 1.0 / static_cast<double>(count_of(c, "grid", 2));
  spec.n_thresholds = count_of(c, "thresholds", 2);
  spec.kde_bandwidth = c.at("kde-bandwidth").get<double>();
  spec.seed = seed_of(c);
  cfg.unbiased_square = c.at("unbiased").get<bool>();
  cfg.n_omegas = count_of(c, "omegas", 1);
  cfg.learning_rate = c.at("sgd-learning-rate").get<double>();
  cfg.n_epochs = count_of(c, "epochs");
  cfg.n_batches = count_of(c, "batches");
  cfg.n_perf = count_of(c, "batch-perf", 1);
  cfg.n_bias = count_of(c, "batch-bias", 1);
  cfg.seed = seed_of(c);
  try {
    spec.validate();
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  const auto res = sgd_sweep(data, spec, cfg);
  run.stage("sweep");
  write_trace_csv(res.trace, static_cast<std::size_t>(data.family.dim()), run.path("trace.csv"));
  run.artifact("trace.csv");
  const auto pts = finish_candidates(run, linear_candidates_json(method, m, enc, res.candidates), test);
  write_frontier(run, pts);
  run.stage("evaluate");

  const auto front = pareto_filter(pts);
  run.results() = { { "scale_C", res.scale_C },
                    { "base_train_loss", res.base_loss },
                    { "base_train_bias", res.base_bias },
                    { "candidates", pts.size() },
                    { "frontier_points", front.size() },
                    { "base_test_ce", pts.front().m.ce },
                    { "base_test_w1", pts.front().m.w1 },
                    { "min_frontier_test_w1", pts[front.front()].m.w1 } };
  std::printf("%s: %zu candidates, %zu on the frontier; test W1 %.4f -> %.4f\n", method.c_str(), pts.size(),
              front.size(), pts.front().m.w1, pts[front.front()].m.w1);
}

void cmd_baseline_rescale(Run& run, const json& c)
{
  const auto m = load_model(c);
  const auto train = m.load(c.at("train").get<std::string>());
  const auto test = m.load(c.at("test").get<std::string>());
  run.stage("load");
  std::vector<std::size_t> feats;
  for (const auto& name : c.at("features").get<std::vector<std::string>>()) {
    if (name == "all") {
      for (std::size_t j = 0; j < m.feature_names.size(); ++j)
        feats.push_back(j);
      continue;
    }
    auto it = std::find(m.feature_names.begin(), m.feature_names.end(), name);
    if (it == m.feature_names.end())
      throw ConfigError("field 'features': unknown feature '" + name + "'");
    feats.push_back(static_cast<std::size_t>(it - m.feature_names.begin()));
  }
  std::sort(feats.begin(), feats.end());
  feats.erase(std::unique(feats.begin(), feats.end()), feats.end());
  const auto omegas = rescaling_omegas(count_of(c, "omegas", 1), c.at("omega-step").get<double>());
  const auto res = random_search_rescaling(m.ensemble, train.X, train.y, train.g, train.n_groups, feats, omegas,
                                           count_of(c, "iterations"), {}, seed_of(c));
  run.stage("search");
  write_frontier(run, finish_candidates(run, rescale_candidates_json(m, res), test));
  run.stage("evaluate");
  run.results() = { { "candidates", res.candidates.size() } };
}

void cmd_baseline_ot(Run& run, const json& c)
{
  const auto m = load_model(c);
  const auto train = m.load(c.at("train").get<std::string>());
  const auto test = m.load(c.at("test").get<std::string>());
  run.stage("load");
  OtProjectionOptions opt;
  opt.gbdt = gbdt_params(c);
  opt.valid_fraction = c.at("valid-fraction").get<double>();
  opt.thetas = default_ot_thetas(count_of(c, "thetas", 2));
  opt.seed = seed_of(c);
  const auto proj = ot_projection(m.ensemble, train.X, train.g, train.n_groups, opt);
  run.stage("project");
  const auto pts = finish_candidates(run, ot_candidates_json(m, proj), test);
  write_frontier(run, pts);
  run.stage("evaluate");
  std::vector<double> p0;
  const auto raw = m.ensemble.predict_raw(train.X);
  for (Eigen::Index i = 0; i < raw.size(); ++i)
    p0.push_back(sigmoid(raw[i]));
  run.results() = { { "projected_trees", proj.projected.n_trees() },
                    { "train_w1_base", score_metrics(p0, train.y, train.g, train.n_groups).w1 },
                    { "train_w1_repaired", score_metrics(proj.repaired, train.y, train.g, train.n_groups).w1 } };
}

void cmd_evaluate(Run& run, const json& c)
{
  const auto doc = read_json(c.at("candidates").get<std::string>());
  const auto m = base_model_from_json(doc.at("model"));
  const auto d = m.load(c.at("test").get<std::string>());
  run.stage("load");
  const auto pts = evaluate_document(doc, d, c.at("split-name").get<std::string>());
  write_frontier(run, pts);
  run.stage("evaluate");
}

void cmd_report(Run& run, const json& c)
{
  std::vector<FrontierPoint> all;
  for (const auto& dir : c.at("runs").get<std::vector<std::string>>()) {
    const auto pts = frontier_from_csv(read_file((fs::path(dir) / "frontier.csv").string()));
    all.insert(all.end(), pts.begin(), pts.end());
  }
  if (all.empty())
    throw std::runtime_error("report: no frontier points found");
  write_frontier(run, all);
  std::ostringstream summary;
  summary << "method,split,points,frontier_points,first_ce,first_w1,min_w1,ce_at_min_w1\n";
  std::map<std::pair<std::string, std::string>, std::vector<FrontierPoint>> by;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& p : all) {
    const auto key = std::pair{ p.method, p.split };
    if (!by.count(key))
      order.push_back(key);
    by[key].push_back(p);
  }
  for (const auto& key : order) {
    const auto& pts = by[key];
    const auto front = pareto_filter(pts);
    const auto& best = pts[front.front()];
    summary << key.first << ',' << key.second << ',' << pts.size() << ',' << front.size() << ','
            << detail::g17(pts.front().m.ce) << ',' << detail::g17(pts.front().m.w1) << ','
            << detail::g17(best.m.w1) << ',' << detail::g17(best.m.ce) << '\n';
  }
  run.write_text("summary.csv", summary.str());
  std::cout << summary.str();
}

} // namespace

int main(int argc, char** argv)
{
  CLI::App app{ "fairfront: post-processing bias mitigation with efficient frontiers" };
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  const auto fields = command_fields();
  std::map<std::string, std::map<std::string, std::vector<std::string>>> flags;
  std::map<std::string, std::string> config_paths;
  const std::map<std::string, std::string> about = {
    { "generate", "write an M1/M2 synthetic dataset and its train/test split" },
    { "train-base", "fit the base gbdt on a training CSV" },
    { "encode", "build and write an encoder matrix for a base model" },
    { "mitigate", "run the omega sweep and write trace, candidates and frontier" },
    { "baseline-rescale", "random-search predictor rescaling" },
    { "baseline-ot", "explainable optimal-transport projection" },
    { "evaluate", "re-score a candidates.json on a CSV" },
    { "report", "merge frontiers of several runs" },
  };
  for (const auto& [name, fs_] : fields) {
    auto* sub = app.add_subcommand(name, about.at(name));
    sub->add_option("--config", config_paths[name], "JSON config; flags override its fields");
    for (const auto& f : fs_) {
      std::string help = f.help;
      if (!f.def.is_null())
        help += " [" + f.def.dump() + "]";
      auto* opt = sub->add_option("--" + f.name, flags[name][f.name], help);
      if (f.kind == Kind::text_list)
        opt->delimiter(',');
      else
        opt->expected(1);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::string command;
  for (const auto* sub : app.get_subcommands())
    command = sub->get_name();
  json cfg;
  try {
    // text_list flags arrive split; join them back for the shared parser
    auto& f = flags[command];
    for (const auto& field : fields.at(command))
      if (field.kind == Kind::text_list && f[field.name].size() > 1) {
        std::string joined;
        for (const auto& v : f[field.name])
          joined += (joined.empty() ? "" : ",") + v;
        f[field.name] = { joined };
      }
    cfg = resolve(command, fields.at(command), config_paths[command], f);
  } catch (const ConfigError& e) {
    std::cerr << "fairfront " << command << ": " << e.what() << '\n';
    return 2;
  }

  fs::path out;
  if (command == "evaluate" && cfg.at("out").get<std::string>().empty())
    out = fs::path(cfg.at("candidates").get<std::string>()).parent_path() / "evaluate";
  else
    out = cfg.at("out").get<std::string>();
  if (out.empty())
    out = ".";

  std::unique_ptr<Run> run;
  try {
    run = std::make_unique<Run>(command, cfg, out);
    if (command == "generate")
      cmd_generate(*run, cfg);
    else if (command == "train-base")
      cmd_train_base(*run, cfg);
    else if (command == "encode")
      cmd_encode(*run, cfg);
    else if (command == "mitigate")
      cmd_mitigate(*run, cfg);
    else if (command == "baseline-rescale")
      cmd_baseline_rescale(*run, cfg);
    else if (command == "baseline-ot")
      cmd_baseline_ot(*run, cfg);
    else if (command == "evaluate")
      cmd_evaluate(*run, cfg);
    else if (command == "report")
      cmd_report(*run, cfg);
    run->finish();
  } catch (const ConfigError& e) {
    std::cerr << "fairfront " << command << ": " << e.what() << '\n';
    if (run)
      run->finish(e.what());
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "fairfront " << command << ": " << e.what() << '\n';
    if (run)
      run->finish(e.what());
    return 1;
  }
  return 0;
}
