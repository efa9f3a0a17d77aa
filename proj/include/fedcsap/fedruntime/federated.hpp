#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fedcsap/fedruntime/model.hpp"
#include "fedcsap/numerics/random.hpp"

namespace fedcsap {

enum class LrSchedule { constant, cosine };

struct RoundConfig {
  Index rounds = 0;       // R
  Index local_steps = 1;  // K
  double lr = 0.01;       // eta
  LrSchedule schedule = LrSchedule::constant;
  double participation = 1.0;
  std::uint64_t client_seed = 0;
  Index batch_size = 0;  // 0 means the full shard
  bool weighted = false; // weight FedAvg by examples seen
  Index threads = 1;
  Index eval_cadence = 1;

  void validate() const;
  double lr_at(Index round) const;
};

/// The only payload a client sends to the server.
struct ClientUpdate {
  Index client_id = 0;
  ParameterStore theta;
  ParameterStore phi;
  std::vector<double> local_loss_trace;
  std::vector<double> ce_trace;
  std::vector<double> crp_trace;
  Index examples_seen = 0;
};

struct EvalResult {
  double acc_local = 0.0;
  double acc_base = 0.0;
  double acc_new = 0.0;
  double hm = 0.0;
};

struct RoundReport {
  Index round = 0;
  double train_loss = 0.0;
  double ce = 0.0;
  double crp = 0.0;
  double acc_local = 0.0;
  double acc_base = 0.0;
  double acc_new = 0.0;
  double hm = 0.0;
  std::uint64_t bytes = 0;
  std::vector<Index> participants;
};

/// Per-step batches drawn without replacement; the order is reshuffled at
/// every epoch boundary. A batch size of 0 or >= n always yields 0..n-1.
class BatchSampler {
 public:
  BatchSampler(Index n, Index batch_size, std::uint64_t seed);
  std::vector<Index> next();

 private:
  Index n_;
  Index batch_;
  Rng rng_;
  std::vector<Index> order_;
  Index cursor_ = 0;
};

/// Seed for a client's batch order in a given round.
std::uint64_t batch_seed(std::uint64_t client_seed, Index client_id, Index round);

/// One simulated client: a private shard, its frozen-feature cache and its
/// running style statistic. Raw examples never leave this object.
class Client {
 public:
  struct StepTrace {
    std::vector<double> loss;
    std::vector<double> ce;
    std::vector<double> crp;
    Index examples_seen = 0;
  };

  Client(ClientShard shard, const FedCsapModel& model);

  Index id() const { return shard_.client_id; }
  const ClientShard& shard() const { return shard_; }
  const RunningStyle& style() const { return style_; }
  RunningStyle& style() { return style_; }

  /// K SGD steps on `params` in place. Batch style statistics are used in the
  /// forward pass and folded into the running style after each step.
  StepTrace train_steps(ModelParams& params, Index steps, double lr, const LossConfig& loss, Index batch_size,
                        std::uint64_t seed);

  /// Deep-copies the globals, trains K steps and packages the result.
  ClientUpdate local_train(const ModelParams& global, Index steps, double lr, const LossConfig& loss,
                           Index batch_size, std::uint64_t seed);

  struct LossParts {
    double loss = 0.0;
    double ce = 0.0;
    double crp = 0.0;
  };
  /// The whole shard as one batch, styled with its own batch statistic.
  BatchFeatures full_batch() const;

  /// Loss of `params` on the full shard without updating anything.
  LossParts measure_loss(ModelParams& params, const LossConfig& loss) const;

  /// Frozen features for the full shard.
  const ImageFeatures& features() const { return features_; }
  const Tensor& class_embeds() const { return class_embeds_; }

 private:
  BatchFeatures make_batch(std::span<const Index> rows, const Tensor& style) const;

  ClientShard shard_;
  const FedCsapModel* model_;
  ImageFeatures features_;
  Tensor class_embeds_;
  std::vector<Index> labels_;
  RunningStyle style_;
};

/// max(1, round(participation * n)) distinct ids, ascending.
std::vector<Index> sample_clients(Index n, double participation, Rng& rng);

/// Arithmetic mean per parameter, summed in ascending client id order.
/// Frozen stores are returned unchanged from the first update.
ModelParams aggregate_fedavg(std::vector<ClientUpdate> updates, bool weighted = false);

struct ServerState {
  Index round = 0;
  ModelParams params;
  Rng rng;
  std::vector<RoundReport> history;
};

/// Evaluates the global model; called every eval_cadence rounds.
using Evaluator = std::function<EvalResult(ModelParams&, std::span<const Client>)>;

/// Bytes exchanged in a round: participants * scalars * 8 bytes * (down + up).
std::uint64_t round_bytes(Index participants, const ModelParams& params);

/// Runs R rounds of sample -> broadcast -> local training -> FedAvg.
/// Returns one report per evaluated round (also appended to history).
std::vector<RoundReport> run_rounds(ServerState& server, std::vector<Client>& clients, const RoundConfig& cfg,
                                    const LossConfig& loss, const Evaluator& evaluate);

}  // namespace fedcsap
