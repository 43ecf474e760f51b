#include <cstdlib>
#include <sstream>
#include <sys/wait.h>

#include "frmil/cli.hpp"
#include "test_util.hpp"

using namespace frmil;
using frmil::testing::read_all;
using frmil::testing::TempDir;

namespace {

struct Proc {
  int code;
  std::string out;
};

/// Runs the built binary through the shell; stdout and stderr are merged.
Proc run_cli(const std::string& args) {
  const std::string cmd = std::string(FRMIL_CLI_PATH) + " " + args + " 2>&1";
  Proc p{-1, {}};
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return p;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) p.out += buf;
  const int status = ::pclose(pipe);
  p.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return p;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

cli::GenOptions small_gen(const fs::path& out, std::uint64_t seed = 7) {
  cli::GenOptions g;
  g.out = out;
  g.spec.n_bags = 20;
  g.spec.dim = 16;
  g.spec.bag_min = 4;
  g.spec.bag_max = 12;
  g.spec.separation = 4.0;
  g.spec.witness_rate = 0.25;
  g.spec.seed = seed;
  return g;
}

}  // namespace

TEST(CliGen, TwoRunsProduceIdenticalDirectories) {
  TempDir dir("gen");
  auto a = run_cli("gen --out " + q(dir / "a") + " --bags 20 --dim 16 --seed 7");
  auto b = run_cli("gen --out " + q(dir / "b") + " --bags 20 --dim 16 --seed 7");
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(read_all(dir / "a/manifest.json"), read_all(dir / "b/manifest.json"));
  EXPECT_EQ(read_all(dir / "a/split.json"), read_all(dir / "b/split.json"));
  for (const auto& e : fs::directory_iterator(dir / "a/features"))
    EXPECT_EQ(read_all(e.path()), read_all(dir / "b/features" / e.path().filename()));
  EXPECT_NE(a.out.find("pos 10, neg 10"), std::string::npos) << a.out;
}

TEST(CliGen, SummaryFollowsPositiveFractionRounding) {
  TempDir dir("gen_frac");
  auto p = run_cli("gen --out " + q(dir / "s") + " --bags 15 --dim 8 --pos-frac 0.3 --seed 1");
  ASSERT_EQ(p.code, 0) << p.out;
  EXPECT_NE(p.out.find("pos 5, neg 10"), std::string::npos) << p.out;
}

TEST(CliGen, InvalidFlagsExitTwo) {
  TempDir dir("gen_bad");
  EXPECT_EQ(run_cli("gen --out " + q(dir / "x") + " --witness-rate 0").code, 2);
  EXPECT_EQ(run_cli("gen --out " + q(dir / "x") + " --bags notanumber").code, 2);
  EXPECT_EQ(run_cli("gen").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
}

TEST(CliGen, SeedFallsBackToEnvironment) {
  TempDir dir("gen_env");
  ASSERT_EQ(run_cli("gen --out " + q(dir / "a") + " --bags 10 --dim 4 --seed 31").code, 0);
  ::setenv("FRMIL_SEED", "31", 1);
  const auto p = run_cli("gen --out " + q(dir / "b") + " --bags 10 --dim 4");
  ::unsetenv("FRMIL_SEED");
  ASSERT_EQ(p.code, 0) << p.out;
  EXPECT_EQ(read_all(dir / "a/manifest.json"), read_all(dir / "b/manifest.json"));
  EXPECT_EQ(read_all(dir / "a/split.json"), read_all(dir / "b/split.json"));
}

TEST(CliTau, WritesJsonAndIsDeterministic) {
  TempDir dir("tau");
  std::ostringstream log;
  cli::cmd_gen(small_gen(dir / "s"), log);
  auto p1 = run_cli("tau --data " + q(dir / "s") + " --out " + q(dir / "t1.json"));
  auto p2 = run_cli("tau --data " + q(dir / "s") + " --out " + q(dir / "t2.json"));
  ASSERT_EQ(p1.code, 0) << p1.out;
  EXPECT_EQ(read_all(dir / "t1.json"), read_all(dir / "t2.json"));
  const auto j = nlohmann::json::parse(read_all(dir / "t1.json"));
  EXPECT_TRUE(j.contains("tau") && j.contains("method") && j.contains("recalibrated"));
  EXPECT_EQ(j["recalibrated"], false);

  const auto store = read_store(dir / "s");
  const auto split = read_split(dir / "s/split.json");
  EXPECT_EQ(j["tau"].get<double>(), cli::estimate_tau_for(store, split.train, false, {}).tau);
}

TEST(CliTau, SeparableStorePutsTauBetweenClassMeans) {
  TempDir dir("tau_sep");
  std::ostringstream log;
  auto g = small_gen(dir / "s");
  g.spec.n_bags = 60;
  g.spec.separation = 10.0;
  g.spec.witness_rate = 0.5;
  cli::cmd_gen(g, log);
  cli::TauOptions o;
  o.data = dir / "s";
  const auto t = cli::cmd_tau(o, log);
  const auto store = read_store(o.data);
  double m0 = 0, m1 = 0, c0 = 0, c1 = 0;
  for (const auto& id : read_split(dir / "s/split.json").train) {
    const auto& b = store.at(id);
    (b.label ? m1 : m0) += mean_magnitude(b.features);
    (b.label ? c1 : c0) += 1;
  }
  EXPECT_GT(t.tau, m0 / c0);
  EXPECT_LT(t.tau, m1 / c1);
}

TEST(CliTau, SingleClassStoreExitsThreeNamingTheClass) {
  TempDir dir("tau_one");
  std::vector<InstanceBag> bags;
  for (int i = 0; i < 4; ++i) bags.push_back({"n" + std::to_string(i), 0, Tensor<float>({2, 2}, float(i)), Mask(2, true)});
  write_store(dir / "s", 2, bags);
  write_split(dir / "s/split.json", Split{{"n0", "n1", "n2", "n3"}, {}, {}});
  auto p = run_cli("tau --data " + q(dir / "s"));
  EXPECT_EQ(p.code, 3) << p.out;
  EXPECT_NE(p.out.find("positive"), std::string::npos) << p.out;
}

TEST(CliBaseline, MatchesLibraryAndPrintsBothModes) {
  TempDir dir("baseline");
  std::ostringstream log;
  cli::cmd_gen(small_gen(dir / "s"), log);
  auto p = run_cli("baseline --data " + q(dir / "s") + " --tau 30 --out " + q(dir / "b.csv"));
  ASSERT_EQ(p.code, 0) << p.out;
  EXPECT_NE(p.out.find("raw"), std::string::npos);
  EXPECT_NE(p.out.find("recal"), std::string::npos);

  const auto store = read_store(dir / "s");
  const auto split = read_split(dir / "s/split.json");
  const auto lib = baseline_classify(cli::bags_of(store, split.test), 30.0, false);
  EXPECT_NE(p.out.find("accuracy " + cli::fixed(lib.accuracy) + " (raw)"), std::string::npos) << p.out;
  const auto csv = read_all(dir / "b.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(split.test.size()) + 1);
  for (std::size_t i = 0; i < lib.ids.size(); ++i) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s,%d,%.6f,%.6f,%d,", lib.ids[i].c_str(), lib.labels[i], lib.mu[i],
                  lib.probabilities[i], lib.predictions[i]);
    EXPECT_NE(csv.find(buf), std::string::npos) << buf;
  }
}

TEST(CliDensity, OneRowPerBag) {
  TempDir dir("density_cli");
  std::ostringstream log;
  cli::cmd_gen(small_gen(dir / "s"), log);
  auto p = run_cli("density --data " + q(dir / "s") + " --out " + q(dir / "d.csv"));
  ASSERT_EQ(p.code, 0) << p.out;
  const auto csv = read_all(dir / "d.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "bag_id,label,mu_raw,mu_recal");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 21);
}

TEST(CliTrainEval, RunDirectoryContentsAndExactReplay) {
  TempDir dir("train");
  std::ostringstream log;
  cli::cmd_gen(small_gen(dir / "s"), log);
  std::ofstream(dir / "cfg.json") << R"({"heads": 2, "epochs": 2, "tau": 2.0, "data": ")" << (dir / "s").string()
                                  << R"("})";
  auto p = run_cli("train --config " + q(dir / "cfg.json") + " --out " + q(dir / "run") + " --seed 5 --quiet");
  ASSERT_EQ(p.code, 0) << p.out;
  for (const char* f : {"config.json", "metrics.csv", "final.ckpt", "best.ckpt", "scores_test.csv"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  const auto echo = nlohmann::json::parse(read_all(dir / "run/config.json"));
  EXPECT_EQ(echo["seed"], 5);
  EXPECT_EQ(echo["epochs"], 2);
  EXPECT_EQ(echo["heads"], 2);

  auto replay = run_cli("train --config " + q(dir / "run/config.json") + " --out " + q(dir / "run2") + " --quiet");
  ASSERT_EQ(replay.code, 0) << replay.out;
  EXPECT_EQ(read_all(dir / "run/metrics.csv"), read_all(dir / "run2/metrics.csv"));
  EXPECT_EQ(read_all(dir / "run/final.ckpt"), read_all(dir / "run2/final.ckpt"));

  auto e = run_cli("eval --data " + q(dir / "s") + " --ckpt " + q(dir / "run/final.ckpt") + " --split val");
  ASSERT_EQ(e.code, 0) << e.out;
  const auto metrics = read_all(dir / "run/metrics.csv");
  const auto last = metrics.substr(metrics.rfind("\n2,val,") + 1);
  std::vector<std::string> cols;
  std::stringstream ss(last.substr(0, last.find('\n')));
  for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
  ASSERT_EQ(cols.size(), 8u);
  EXPECT_NE(e.out.find("ACC " + cols[6] + " AUC " + cols[7]), std::string::npos) << e.out << " vs " << last;
  EXPECT_TRUE(fs::exists(dir / "run/scores_val.csv"));
}

TEST(CliTrain, FlagsOverrideConfigAndUnknownKeysAreRejected) {
  TempDir dir("train_cfg");
  std::ofstream(dir / "cfg.json") << R"({"heads": 2, "epochs": 7, "lr": 0.5})";
  cli::RunOptions o;
  o.data = dir / "s";
  o.out = dir / "run";
  o.config_file = dir / "cfg.json";
  o.overrides = {{"epochs", 1}};
  const auto r = cli::resolve_run(o);
  EXPECT_EQ(r.config.epochs, 1);
  EXPECT_EQ(r.config.lr, 0.5);
  EXPECT_EQ(r.config.heads, 2u);

  std::ofstream(dir / "bad.json") << R"({"heads": 2, "learning_rate": 0.5})";
  auto p = run_cli("train --data " + q(dir.path()) + " --config " + q(dir / "bad.json") + " --out " + q(dir / "run"));
  EXPECT_EQ(p.code, 2) << p.out;
  EXPECT_NE(p.out.find("learning_rate"), std::string::npos);
  EXPECT_EQ(run_cli("train --data " + q(dir.path()) + " --out " + q(dir / "r") + " --dropout 1.5").code, 2);
}

TEST(CliEval, MissingCheckpointExitsOneWithPath) {
  TempDir dir("eval_missing");
  std::ostringstream log;
  cli::cmd_gen(small_gen(dir / "s"), log);
  const auto missing = dir / "nowhere/model.ckpt";
  auto p = run_cli("eval --data " + q(dir / "s") + " --ckpt " + q(missing));
  EXPECT_EQ(p.code, 1);
  EXPECT_NE(p.out.find(missing.string()), std::string::npos) << p.out;
}

TEST(CliData, MissingStoreExitsOne) {
  TempDir dir("nostore");
  EXPECT_EQ(run_cli("density --data " + q(dir / "absent") + " --out " + q(dir / "d.csv")).code, 1);
}

TEST(CliAblate, FourRowsWithFiniteMetrics) {
  TempDir dir("ablate");
  std::ostringstream log;
  cli::cmd_gen(small_gen(dir / "s"), log);
  auto p = run_cli("ablate --data " + q(dir / "s") + " --out " + q(dir / "abl") +
                   " --heads 2 --epochs 2 --tau 2 --quiet");
  ASSERT_EQ(p.code, 0) << p.out;
  const auto csv = read_all(dir / "abl/ablation.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "config,acc,auc");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  for (const char* name : {"\nbag,", "\nbag+fm,", "\nbag+max,", "\nbag+max+fm,"})
    EXPECT_NE(csv.find(name), std::string::npos) << name;
  const auto echo = nlohmann::json::parse(read_all(dir / "abl/bag+fm/config.json"));
  EXPECT_EQ(echo["use_max_loss"], false);
  EXPECT_EQ(echo["use_fm_loss"], true);
}

TEST(CliSelftest, PassesQuicklyAndNamesEachCheck) {
  const auto t0 = std::chrono::steady_clock::now();
  auto p = run_cli("selftest");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(p.code, 0) << p.out;
  EXPECT_LT(secs, 60.0);
  EXPECT_NE(p.out.find("grad/layer_norm"), std::string::npos);
  EXPECT_NE(p.out.find("oracle/auc_vs_pairwise"), std::string::npos);
}

TEST(CliExitCodes, Mapping) {
  EXPECT_EQ(cli::exit_code(ConfigError("x")), 2);
  EXPECT_EQ(cli::exit_code(IoError("x")), 1);
  EXPECT_EQ(cli::exit_code(CheckpointError(CheckpointError::Kind::BadMagic, "x")), 1);
  EXPECT_EQ(cli::exit_code(StoreError(StoreError::Kind::MissingFile, "x")), 1);
  EXPECT_EQ(cli::exit_code(StoreError(StoreError::Kind::SizeMismatch, "x")), 3);
  EXPECT_EQ(cli::exit_code(DataError("x")), 3);
}
