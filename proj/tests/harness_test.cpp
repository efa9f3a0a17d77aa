#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "fedcsap/harness/config.hpp"
#include "fedcsap/harness/evaluate.hpp"
#include "fedcsap/harness/experiment.hpp"
#include "fedcsap/numerics/errors.hpp"

namespace fedcsap::harness {
namespace {

namespace fs = std::filesystem;

std::string config_path(const std::string& name) { return std::string(FEDCSAP_CONFIG_DIR) + "/" + name; }

nlohmann::json config_json(const std::string& name) {
  std::ifstream in(config_path(name));
  return nlohmann::json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fedcsap_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string config_error(const nlohmann::json& j) {
  try {
    ExperimentConfig cfg = parse_config(j);
    cfg.resolve();
    cfg.validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FEDCSAP_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ExperimentConfig smoke_into(const fs::path& dir) {
  ExperimentConfig cfg = load_config(config_path("smoke.json"));
  cfg.output_dir = dir.string();
  return cfg;
}

TEST(HarmonicMean, Examples) {
  EXPECT_DOUBLE_EQ(harmonic_mean(0.5, 0.5, 0.5), 0.5);
  EXPECT_NEAR(harmonic_mean(1.0, 0.5, 0.25), 3.0 / 7.0, 1e-15);
  EXPECT_EQ(harmonic_mean(0.0, 0.9, 0.9), 0.0);
}

TEST(HarmonicMean, ReferenceTriple) {
  // Fixed reference triple with a known two-decimal result.
  EXPECT_NEAR(harmonic_mean(76.79, 70.40, 75.08), 73.98, 0.01);
}

TEST(HarmonicMean, PropertyBoundedByMinAndMean) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int c = 0; c < 100; ++c) {
    const double a = u(rng), b = u(rng), d = u(rng);
    const double h = harmonic_mean(a, b, d);
    EXPECT_GE(h, std::min({a, b, d}) - 1e-15);
    EXPECT_LE(h, (a + b + d) / 3.0 + 1e-15);
    EXPECT_NEAR(h, harmonic_mean(d, a, b), 1e-15);
  }
}

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"smoke.json", "toy.json", "style_shift.json", "gradcheck_small.json"}) {
    EXPECT_EQ(config_error(config_json(name)), "") << name;
  }
}

TEST(Config, UnknownKeyNamesPath) {
  nlohmann::json j = config_json("smoke.json");
  j["model"]["depth"] = 3;
  EXPECT_NE(config_error(j).find("model.depth"), std::string::npos);
  j = config_json("smoke.json");
  j["extra"] = true;
  EXPECT_NE(config_error(j).find("extra"), std::string::npos);
}

TEST(Config, WrongTypeNamesPath) {
  nlohmann::json j = config_json("smoke.json");
  j["fed"]["lr"] = "fast";
  EXPECT_NE(config_error(j).find("fed.lr"), std::string::npos);
  j = config_json("smoke.json");
  j["data"]["shots_per_class"] = -2;
  EXPECT_NE(config_error(j).find("data.shots_per_class"), std::string::npos);
}

TEST(Config, StageCountMismatch) {
  nlohmann::json j = config_json("smoke.json");
  j["model"]["L"] = 2;
  EXPECT_NE(config_error(j).find("model.L"), std::string::npos);
}

TEST(Config, EvalCadenceMustDivideRounds) {
  nlohmann::json j = config_json("smoke.json");
  j["eval_cadence"] = 3;
  EXPECT_NE(config_error(j).find("eval_cadence"), std::string::npos);
}

TEST(Config, ClientBlocksMustDivideBaseClasses) {
  nlohmann::json j = config_json("smoke.json");
  j["data"]["per_client_classes"] = 3;
  EXPECT_NE(config_error(j).find("data.per_client_classes"), std::string::npos);
}

TEST(Config, ResolvedJsonRoundTrips) {
  ExperimentConfig cfg = load_config(config_path("toy.json"));
  cfg.resolve();
  const nlohmann::json once = to_json(cfg);
  ExperimentConfig again = parse_config(once);
  again.resolve();
  EXPECT_EQ(to_json(again), once);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  const fs::path bad = dir / "bad.json";
  std::ofstream(bad) << R"({"fed": {"rounds": "ten"}})";
  EXPECT_EQ(run_cli("run --config " + bad.string()), 2);
  EXPECT_EQ(run_cli("run --config " + (dir / "missing.json").string()), 2);
  EXPECT_NE(run_cli("frobnicate"), 0);
  EXPECT_EQ(run_cli("run --config " + config_path("smoke.json") + " --out " + (dir / "ok").string()), 0);
  EXPECT_EQ(run_cli("eval --config " + config_path("smoke.json") + " --checkpoint " + (dir / "ok" / "final.fckp").string()),
            0);
  fs::remove_all(dir);
}

TEST(RunExperiment, WritesExactlyThreeFiles) {
  const fs::path dir = scratch("files");
  std::ostringstream log;
  ASSERT_EQ(run_experiment(smoke_into(dir), log), 0);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  EXPECT_EQ(names, (std::vector<std::string>{"config.resolved.json", "final.fckp", "metrics.csv"}));

  const ExperimentConfig cfg = smoke_into(dir);
  std::istringstream csv(slurp(dir / "metrics.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, kMetricsHeader);
  Index rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    ASSERT_EQ(cells.size(), 10u) << line;
    const double local = std::stod(cells[4]), base = std::stod(cells[5]), novel = std::stod(cells[6]);
    EXPECT_NEAR(std::stod(cells[7]), harmonic_mean(local, base, novel), 1e-12);
  }
  EXPECT_EQ(rows, cfg.fed.rounds / cfg.fed.eval_cadence);
  fs::remove_all(dir);
}

TEST(RunExperiment, ByteIdenticalAcrossRunsAndThreads) {
  const fs::path a = scratch("det_a");
  const fs::path b = scratch("det_b");
  std::ostringstream log;
  ::setenv("FEDCSAP_THREADS", "1", 1);
  ASSERT_EQ(run_experiment(smoke_into(a), log), 0);
  ::setenv("FEDCSAP_THREADS", "3", 1);
  ASSERT_EQ(run_experiment(smoke_into(b), log), 0);
  ::unsetenv("FEDCSAP_THREADS");
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "final.fckp"), slurp(b / "final.fckp"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(RunExperiment, EvalOfCheckpointMatchesFinalRow) {
  const fs::path dir = scratch("eval");
  std::ostringstream log;
  const ExperimentConfig cfg = smoke_into(dir);
  ASSERT_EQ(run_experiment(cfg, log), 0);
  std::ostringstream out;
  ASSERT_EQ(eval_command(cfg, (dir / "final.fckp").string(), out), 0);
  std::istringstream csv(slurp(dir / "metrics.csv"));
  std::string line, last;
  while (std::getline(csv, line)) last = line;
  std::vector<std::string> cells;
  std::stringstream ss(last);
  for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
  ASSERT_EQ(cells.size(), 10u);
  EXPECT_NE(out.str().find("hm " + cells[7] + "\n"), std::string::npos) << out.str();
  fs::remove_all(dir);
}

TEST(RunExperiment, SmokeIsFast) {
  const fs::path dir = scratch("fast");
  std::ostringstream log;
  const auto start = std::chrono::steady_clock::now();
  ASSERT_EQ(run_experiment(smoke_into(dir), log), 0);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(secs, 10.0);
  fs::remove_all(dir);
}

TEST(Gradcheck, DisabledInjectionReportsPhiSkipped) {
  ExperimentConfig cfg = load_config(config_path("gradcheck_small.json"));
  cfg.ablations.disable_injection = true;
  std::ostringstream out;
  EXPECT_EQ(gradcheck_command(cfg, out), 0);
  const std::string text = out.str();
  EXPECT_NE(text.find("phi.injection.se.0.w1"), std::string::npos);
  EXPECT_NE(text.find("frozen/skipped"), std::string::npos);
  EXPECT_NE(text.find("overall max_rel_err"), std::string::npos);
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    if (line.rfind("phi.", 0) == 0) {
      EXPECT_NE(line.find("frozen/skipped"), std::string::npos) << line;
    } else if (line.rfind("theta.", 0) == 0) {
      EXPECT_NE(line.find(" ok"), std::string::npos) << line;
    }
  }
}

TEST(Gradcheck, RefusesLargeModels) {
  ExperimentConfig cfg = load_config(config_path("toy.json"));
  cfg.model.width = 128;
  cfg.model.stages = {{8, 8, 64}, {4, 4, 64}, {2, 2, 64}};
  EXPECT_THROW(Experiment(cfg).gradcheck(), ConfigError);
}

TEST(Experiment, NovelClassNamesNeverReachTraining) {
  Experiment exp(load_config(config_path("smoke.json")));
  exp.run(1);
  const std::set<std::string> seen = exp.audit().names();
  EXPECT_FALSE(seen.empty());
  for (Index k : exp.split().novel) {
    EXPECT_EQ(seen.count(exp.dataset().class_names[static_cast<std::size_t>(k)]), 0u) << k;
  }
  for (const std::string& name : seen) {
    bool base = false;
    for (Index k : exp.split().base) base = base || exp.dataset().class_names[static_cast<std::size_t>(k)] == name;
    EXPECT_TRUE(base) << name;
  }
}

TEST(Experiment, StyleForUnseenDomainIsClientMean) {
  Experiment exp(load_config(config_path("smoke.json")));
  exp.run(1);
  const auto& clients = exp.clients();
  Tensor mean(clients[0].style().value().shape());
  for (const Client& c : clients) mean.data() += c.style().value().data() / static_cast<double>(clients.size());
  EXPECT_LT((style_for_domain(99, clients).data() - mean.data()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_TRUE(style_for_domain(clients[0].shard().domain_id, clients).identical(clients[0].style().value()));
}

}  // namespace
}  // namespace fedcsap::harness
