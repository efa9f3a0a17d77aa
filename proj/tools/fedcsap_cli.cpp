#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedcsap/harness/experiment.hpp"
#include "fedcsap/numerics/errors.hpp"

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

}  // namespace

int main(int argc, char** argv) {
  using namespace fedcsap;
  CLI::App app{"Federated prompt learning with content and style aware prompts"};
  app.require_subcommand(1);

  std::string config_path;
  bool disable_injection = false;
  bool static_prompts = false;
  std::string crp_variant;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  CLI::App* run = app.add_subcommand("run", "train and write metrics.csv, final.fckp and config.resolved.json");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_flag("--disable-injection", disable_injection, "drop the injection block");
  run->add_flag("--static-prompts", static_prompts, "replace the generator with learned static prompts");
  run->add_option("--crp-variant", crp_variant, "normalized or unnormalized")
      ->check(CLI::IsMember({"normalized", "unnormalized"}));
  run->add_option("--seed", seed, "override master_seed");
  run->add_option("--out", out_dir, "override output_dir");

  std::string gc_config;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every trainable block");
  gradcheck->add_option("--config", gc_config, "experiment config (JSON)")->required();

  std::string eval_config;
  std::string checkpoint;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a saved checkpoint");
  eval->add_option("--checkpoint", checkpoint, "final.fckp from a previous run")->required();
  eval->add_option("--config", eval_config, "config the checkpoint was trained with")->required();

  CLI11_PARSE(app, argc, argv);

  harness::ExperimentConfig cfg;
  try {
    if (*run) {
      cfg = harness::load_config(config_path);
      cfg.ablations.disable_injection = cfg.ablations.disable_injection || disable_injection;
      cfg.ablations.static_prompts = cfg.ablations.static_prompts || static_prompts;
      if (!crp_variant.empty()) cfg.ablations.crp_variant = harness::parse_crp_variant(crp_variant);
      if (seed) cfg.master_seed = *seed;
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      cfg.resolve();
      cfg.validate();
    } else if (*gradcheck) {
      cfg = harness::load_config(gc_config);
    } else {
      cfg = harness::load_config(eval_config);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*run) return harness::run_experiment(cfg, std::cout);
    if (*gradcheck) return harness::gradcheck_command(cfg, std::cout);
    return harness::eval_command(cfg, checkpoint, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
