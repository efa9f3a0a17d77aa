#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "fedcsap/datagen/dataset.hpp"
#include "fedcsap/fedruntime/federated.hpp"
#include "fedcsap/fedruntime/model.hpp"
#include "fedcsap/losses/losses.hpp"

namespace fedcsap::harness {

struct Ablations {
  bool disable_injection = false;
  bool static_prompts = false;
  CrpVariant crp_variant = CrpVariant::normalized;
};

/// Everything a run needs. Seeds for the data, encoders, parameter init,
/// client batching and server sampling are derived from master_seed with
/// derive_seed(master_seed, "<component>").
struct ExperimentConfig {
  SyntheticTaskConfig data;
  Index per_client_classes = 4;
  ModelConfig model;
  LossConfig loss;
  RoundConfig fed;
  Ablations ablations;
  std::string output_dir = "fedcsap_out";
  std::uint64_t master_seed = 0;

  /// Pushes derived seeds and ablation flags into the sub-configs.
  void resolve();
  /// Throws ConfigError with a field path on the first invalid entry.
  void validate() const;
};

/// Strict parse: unknown keys and wrong types are errors naming the field
/// path. Missing keys take defaults.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

std::string to_string(CrpVariant v);
CrpVariant parse_crp_variant(const std::string& s);

}  // namespace fedcsap::harness
