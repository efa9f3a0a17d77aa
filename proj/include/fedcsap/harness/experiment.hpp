#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "fedcsap/harness/config.hpp"
#include "fedcsap/harness/evaluate.hpp"
#include "fedcsap/numerics/gradcheck.hpp"

namespace fedcsap::harness {

inline constexpr const char* kMetricsHeader = "round,train_loss,ce,crp,acc_local,acc_base,acc_new,hm,bytes,participants";

/// One CSV row; reals are printed with 17 significant digits.
std::string format_metrics_row(const RoundReport& r);

/// Client threads: FEDCSAP_THREADS when set, else the hardware concurrency.
Index client_threads();

/// A fully wired run: dataset, clients, model, parameters and evaluator,
/// built deterministically from the config.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const Dataset& dataset() const { return data_; }
  const ClassSplit& split() const { return split_; }
  const FedCsapModel& model() const { return *model_; }
  std::vector<Client>& clients() { return clients_; }
  ModelParams& params() { return server_.params; }
  const NameAudit& audit() const { return *audit_; }

  /// Runs every configured round; names queried during training are
  /// recorded in audit().
  std::vector<RoundReport> run(Index threads = 1);
  EvalResult evaluate();

  /// Finite-difference check of the full pipeline on client 0's shard.
  GradCheckReport gradcheck(double h = 1e-5);

 private:
  ExperimentConfig cfg_;
  Dataset data_;
  ClassSplit split_;
  std::shared_ptr<NameAudit> audit_;
  std::shared_ptr<const FrozenEncoders> encoders_;
  std::unique_ptr<FedCsapModel> model_;
  std::vector<Client> clients_;
  ServerState server_;
  std::unique_ptr<ProtocolEvaluator> evaluator_;
};

inline constexpr Index kGradcheckMaxParameters = 10000;
inline constexpr double kGradcheckTolerance = 1e-4;

/// Builds and runs the experiment, writing config.resolved.json,
/// metrics.csv and final.fckp into cfg.output_dir. Returns 0, or 3 on a
/// non-finite value.
int run_experiment(const ExperimentConfig& cfg, std::ostream& log);

/// Prints one line per parameter block; returns 1 if any block fails.
int gradcheck_command(const ExperimentConfig& cfg, std::ostream& out);

/// Restores a checkpoint and prints the three accuracies and their HM.
int eval_command(const ExperimentConfig& cfg, const std::string& checkpoint, std::ostream& out);

}  // namespace fedcsap::harness
