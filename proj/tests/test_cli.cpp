#include "fairfront/frontier.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& workdir()
{
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("fairfront_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int cli(const std::string& args, const std::string& env = "")
{
  const std::string cmd = "cd '" + workdir().string() + "' && " + env + " '" + FAIRFRONT_CLI_PATH + "' " + args +
                          " > /dev/null 2> last_error.txt";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p)
{
  std::ifstream in(workdir() / p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json manifest(const std::string& dir) { return json::parse(slurp(fs::path(dir) / "run_manifest.json")); }

std::uint64_t fnv1a(const std::string& s)
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

const std::string kData = "--train data/train.csv --test data/test.csv --base base/model.json ";
const std::string kSweep = "--method tree-pca --components 8 --omegas 4 --epochs 3 ";

// generate + train-base once for every test below
void prepare()
{
  static bool done = false;
  if (done)
    return;
  ASSERT_EQ(cli("generate --model m1 --n 3000 --seed 4 --out data"), 0);
  ASSERT_EQ(cli("train-base --train data/train.csv --rounds 60 --out base"), 0);
  done = true;
}

} // namespace

TEST(Cli, GenerateWritesSplitAndSidecars)
{
  prepare();
  for (const char* f : { "data.csv", "data.csv.json", "train.csv", "train.csv.json", "test.csv", "test.csv.json" })
    EXPECT_TRUE(fs::exists(workdir() / "data" / f)) << f;
  const auto m = manifest("data");
  EXPECT_EQ(m["results"]["n_train"], 1500);
  EXPECT_EQ(m["results"]["n_test"], 1500);
  EXPECT_EQ(m["status"], "complete");
}

TEST(Cli, ManifestHashesConfig)
{
  prepare();
  const auto m = manifest("base");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(m["config"].dump())));
  EXPECT_EQ(m["config_hash"], std::string("fnv1a64:") + buf);
  ASSERT_FALSE(m["artifacts"].empty());
  for (const auto& a : m["artifacts"])
    EXPECT_EQ(a["config_hash"], m["config_hash"]);
  EXPECT_EQ(m["config"]["rounds"], 60);
  EXPECT_TRUE(m["versions"].contains("compiler"));
  EXPECT_TRUE(m["timings_s"].contains("total"));
}

TEST(Cli, MitigateIsDeterministic)
{
  prepare();
  ASSERT_EQ(cli("mitigate " + kSweep + kData + "--out det1"), 0);
  ASSERT_EQ(cli("mitigate " + kSweep + kData + "--out det2"), 0);
  for (const char* f : { "trace.csv", "frontier.csv", "candidates.json" })
    EXPECT_EQ(slurp(fs::path("det1") / f), slurp(fs::path("det2") / f)) << f;
  const std::string trace = slurp("det1/trace.csv");
  EXPECT_EQ(trace.substr(0, trace.find('\n')).rfind("omega,epoch,theta_0,", 0), 0u);
  // 4 omegas x 3 epochs
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 13);
}

TEST(Cli, EvaluateReproducesFrontier)
{
  prepare();
  ASSERT_EQ(cli("mitigate " + kSweep + kData + "--out ev"), 0);
  ASSERT_EQ(cli("evaluate --candidates ev/candidates.json --test data/test.csv"), 0);
  EXPECT_EQ(slurp("ev/frontier.csv"), slurp("ev/evaluate/frontier.csv"));
  const auto svg = slurp("ev/frontier.svg");
  EXPECT_NE(svg.find(slurp("ev/frontier.csv")), std::string::npos);
}

TEST(Cli, BaselinesRoundTripThroughEvaluate)
{
  prepare();
  ASSERT_EQ(cli("baseline-ot " + kData + "--rounds 40 --out ot"), 0);
  ASSERT_EQ(cli("evaluate --candidates ot/candidates.json --test data/test.csv"), 0);
  EXPECT_EQ(slurp("ot/frontier.csv"), slurp("ot/evaluate/frontier.csv"));
  const auto pts = fairfront::frontier_from_csv(slurp("ot/frontier.csv"));
  EXPECT_EQ(pts.size(), 15u);

  ASSERT_EQ(cli("baseline-rescale " + kData + "--iterations 30 --features x1,x3 --out rs"), 0);
  ASSERT_EQ(cli("evaluate --candidates rs/candidates.json --test data/test.csv --out rs/again"), 0);
  EXPECT_EQ(slurp("rs/frontier.csv"), slurp("rs/again/frontier.csv"));
  EXPECT_EQ(fairfront::frontier_from_csv(slurp("rs/frontier.csv")).size(), 31u);

  ASSERT_EQ(cli("report --runs ot,rs --out rep"), 0);
  const auto summary = slurp("rep/summary.csv");
  EXPECT_NE(summary.find("ot-projection,test,15,"), std::string::npos);
  EXPECT_NE(summary.find("rescale,test,31,"), std::string::npos);
}

TEST(Cli, EncodeWritesMatrix)
{
  prepare();
  ASSERT_EQ(cli("encode --method additive --degree 2 --train data/train.csv --base base/model.json --out enc"), 0);
  const auto csv = slurp("enc/encoders.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')).rfind("const,", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1501);
  ASSERT_EQ(cli("mitigate --encoders enc/encoders.json --omegas 2 --epochs 1 " + kData + "--out enc_run"), 0);
}

TEST(Cli, ConfigFileAndFlagPrecedence)
{
  prepare();
  std::ofstream(workdir() / "cfg.json") << R"({"seed": 9, "mitigate": {"epochs": 1, "omegas": 3}})";
  ASSERT_EQ(cli("mitigate --config cfg.json --omegas 2 " + kSweep.substr(0, kSweep.find("--omegas")) + kData +
                "--out cfgrun"),
            0);
  const auto m = manifest("cfgrun");
  EXPECT_EQ(m["config"]["seed"], 9);
  EXPECT_EQ(m["config"]["epochs"], 1);
  EXPECT_EQ(m["config"]["omegas"], 2);
}

TEST(Cli, ConfigErrorsNameTheField)
{
  prepare();
  std::ofstream(workdir() / "bad.json") << R"({"mitigate": {"epochs": "many"}})";
  EXPECT_EQ(cli("mitigate --config bad.json " + kData + "--out bad"), 2);
  EXPECT_NE(slurp("last_error.txt").find("'epochs'"), std::string::npos);
  std::ofstream(workdir() / "bad2.json") << R"({"nonsense": 1})";
  EXPECT_EQ(cli("generate --config bad2.json --out bad2"), 2);
  EXPECT_NE(slurp("last_error.txt").find("'nonsense'"), std::string::npos);
  EXPECT_EQ(cli("generate --n lots --out bad3"), 2);
  EXPECT_NE(slurp("last_error.txt").find("--n"), std::string::npos);
  EXPECT_EQ(cli("generate --model m3 --out bad4"), 2);
  EXPECT_EQ(cli("train-base --out bad5"), 2);
  EXPECT_NE(slurp("last_error.txt").find("'train'"), std::string::npos);
}

TEST(Cli, RuntimeFailureFlaggedInManifest)
{
  prepare();
  EXPECT_EQ(cli("mitigate --train data/train.csv --test data/test.csv --base missing.json --out failed"), 1);
  const auto m = manifest("failed");
  EXPECT_EQ(m["status"], "failed");
  EXPECT_NE(m["error"].get<std::string>().find("missing.json"), std::string::npos);
}

TEST(Cli, ThreadCapFromEnvironment)
{
  prepare();
  ASSERT_EQ(cli("generate --n 100 --out thr", "FAIRFRONT_THREADS=1"), 0);
  EXPECT_EQ(manifest("thr")["threads"], 1);
}
