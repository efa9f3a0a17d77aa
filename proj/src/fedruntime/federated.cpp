#include "fedcsap/fedruntime/federated.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numbers>
#include <numeric>
#include <string>
#include <thread>

#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/ops.hpp"

namespace fedcsap {

void RoundConfig::validate() const {
  if (rounds < 0) throw ConfigError("fed.rounds: must be non-negative");
  if (local_steps < 0) throw ConfigError("fed.local_steps: must be non-negative");
  if (!(lr >= 0.0)) throw ConfigError("fed.lr: must be non-negative");
  if (!(participation > 0.0 && participation <= 1.0)) throw ConfigError("fed.participation: must lie in (0, 1]");
  if (batch_size < 0) throw ConfigError("fed.batch_size: must be non-negative");
  if (threads < 1) throw ConfigError("threads: must be at least 1");
  if (eval_cadence < 1) throw ConfigError("eval_cadence: must be at least 1");
}

double RoundConfig::lr_at(Index round) const {
  if (schedule == LrSchedule::constant || rounds == 0) return lr;
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(round) / static_cast<double>(rounds)));
}

BatchSampler::BatchSampler(Index n, Index batch_size, std::uint64_t seed) : n_(n), batch_(batch_size), rng_(seed) {
  if (n < 1) throw InputError("batch sampler needs a non-empty shard");
  order_.resize(static_cast<std::size_t>(n));
  std::iota(order_.begin(), order_.end(), Index{0});
  cursor_ = n_;  // forces a shuffle on first use
}

std::vector<Index> BatchSampler::next() {
  if (batch_ <= 0 || batch_ >= n_) {
    std::vector<Index> all(static_cast<std::size_t>(n_));
    std::iota(all.begin(), all.end(), Index{0});
    return all;
  }
  if (cursor_ + batch_ > n_) {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  std::vector<Index> out(order_.begin() + cursor_, order_.begin() + cursor_ + batch_);
  cursor_ += batch_;
  return out;
}

std::uint64_t batch_seed(std::uint64_t client_seed, Index client_id, Index round) {
  return derive_seed(client_seed, "batch.client." + std::to_string(client_id), static_cast<std::uint64_t>(round));
}

Client::Client(ClientShard shard, const FedCsapModel& model)
    : shard_(std::move(shard)), model_(&model), style_(model.config().content_width(), model.config().style_momentum) {
  if (shard_.examples.empty()) throw InputError("client " + std::to_string(shard_.client_id) + " has an empty shard");
  features_ = model.encode_images(shard_.examples);
  class_embeds_ = model.encoders().text.embed_class_names(shard_.class_names);
  for (const Example& ex : shard_.examples) {
    auto it = std::find(shard_.class_ids.begin(), shard_.class_ids.end(), ex.label);
    if (it == shard_.class_ids.end()) {
      throw InputError("client " + std::to_string(shard_.client_id) + ": example label outside its class set");
    }
    labels_.push_back(static_cast<Index>(it - shard_.class_ids.begin()));
  }
}

BatchFeatures Client::make_batch(std::span<const Index> rows, const Tensor& style) const {
  const auto b = static_cast<Index>(rows.size());
  BatchFeatures batch;
  batch.image_embeds = Tensor({b, features_.embeds.dim(1)});
  batch.content = Tensor({b, features_.pooled.dim(1)});
  batch.style = Tensor({b, features_.pooled.dim(1)});
  for (Index i = 0; i < b; ++i) {
    batch.image_embeds.matrix().row(i) = features_.embeds.matrix().row(rows[i]);
    batch.content.matrix().row(i) = features_.pooled.matrix().row(rows[i]);
    batch.style.matrix().row(i) = style.data().transpose();
    batch.labels.push_back(labels_[static_cast<std::size_t>(rows[i])]);
  }
  batch.class_embeds = class_embeds_;
  return batch;
}

Client::StepTrace Client::train_steps(ModelParams& params, Index steps, double lr, const LossConfig& loss,
                                      Index batch_size, std::uint64_t seed) {
  StepTrace trace;
  BatchSampler sampler(static_cast<Index>(shard_.examples.size()), batch_size, seed);
  for (Index k = 0; k < steps; ++k) {
    const std::vector<Index> rows = sampler.next();
    std::vector<Tensor> pooled;
    pooled.reserve(rows.size());
    for (Index r : rows) pooled.push_back(Tensor::from_vector(features_.pooled.matrix().row(r).transpose()));
    const Tensor mu = batch_style_stats(pooled);
    const BatchFeatures batch = make_batch(rows, mu);
    style_.update(mu);
    try {
      Tape tape;
      FedCsapModel::Forward f = model_->forward(tape, params, batch, loss, true);
      tape.backward(f.loss);
      trace.loss.push_back(f.loss.value().item());
      trace.ce.push_back(f.ce.value().item());
      trace.crp.push_back(f.crp.value().item());
    } catch (const NumericError& e) {
      throw NumericError("client " + std::to_string(id()) + ", step " + std::to_string(k) + ": " + e.what());
    }
    sgd_step(params.theta, lr);
    sgd_step(params.phi, lr);
    trace.examples_seen += static_cast<Index>(rows.size());
  }
  return trace;
}

ClientUpdate Client::local_train(const ModelParams& global, Index steps, double lr, const LossConfig& loss,
                                 Index batch_size, std::uint64_t seed) {
  ClientUpdate update;
  update.client_id = id();
  ModelParams local = global;
  StepTrace trace = train_steps(local, steps, lr, loss, batch_size, seed);
  update.theta = std::move(local.theta);
  update.phi = std::move(local.phi);
  update.local_loss_trace = std::move(trace.loss);
  update.ce_trace = std::move(trace.ce);
  update.crp_trace = std::move(trace.crp);
  update.examples_seen = trace.examples_seen;
  return update;
}

BatchFeatures Client::full_batch() const {
  std::vector<Index> rows(shard_.examples.size());
  std::iota(rows.begin(), rows.end(), Index{0});
  std::vector<Tensor> pooled;
  for (Index r : rows) pooled.push_back(Tensor::from_vector(features_.pooled.matrix().row(r).transpose()));
  return make_batch(rows, batch_style_stats(pooled));
}

Client::LossParts Client::measure_loss(ModelParams& params, const LossConfig& loss) const {
  Tape tape;
  const FedCsapModel::Forward f = model_->forward(tape, params, full_batch(), loss, false);
  return {f.loss.value().item(), f.ce.value().item(), f.crp.value().item()};
}

std::vector<Index> sample_clients(Index n, double participation, Rng& rng) {
  if (n < 1) throw InputError("sample_clients: need at least one client");
  if (!(participation > 0.0 && participation <= 1.0)) throw InputError("sample_clients: participation must lie in (0, 1]");
  const Index k = std::clamp<Index>(static_cast<Index>(std::llround(participation * static_cast<double>(n))), 1, n);
  std::vector<Index> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), Index{0});
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(static_cast<std::size_t>(k));
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

void average_store(ParameterStore& out, const std::vector<ClientUpdate>& updates, ParameterStore ClientUpdate::*member,
                   const std::vector<double>& weights) {
  if (out.frozen()) return;
  const bool uniform = weights.empty();
  for (auto& entry : out) {
    Vector acc = Vector::Zero(entry.value.size());
    for (std::size_t u = 0; u < updates.size(); ++u) {
      const Vector& v = (updates[u].*member).at(entry.name).data();
      if (uniform) {
        acc += v;
      } else {
        acc += weights[u] * v;
      }
    }
    if (uniform) acc /= static_cast<double>(updates.size());
    entry.value.data() = std::move(acc);
    entry.value.zero_grad();
  }
}

}  // namespace

ModelParams aggregate_fedavg(std::vector<ClientUpdate> updates, bool weighted) {
  if (updates.empty()) throw ProtocolError("aggregate_fedavg: no client updates");
  std::sort(updates.begin(), updates.end(),
            [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
  for (std::size_t u = 1; u < updates.size(); ++u) {
    if (updates[u].client_id == updates[u - 1].client_id) {
      throw ProtocolError("aggregate_fedavg: duplicate update from client " + std::to_string(updates[u].client_id));
    }
    if (!updates[u].theta.same_layout(updates[0].theta) || !updates[u].phi.same_layout(updates[0].phi)) {
      throw ProtocolError("aggregate_fedavg: client " + std::to_string(updates[u].client_id) +
                          " sent parameters whose names or shapes differ from client " +
                          std::to_string(updates[0].client_id));
    }
  }
  std::vector<double> weights;
  if (weighted) {
    double total = 0.0;
    for (const ClientUpdate& u : updates) total += static_cast<double>(u.examples_seen);
    if (!(total > 0.0)) throw ProtocolError("aggregate_fedavg: weighted mode with zero examples seen");
    for (const ClientUpdate& u : updates) weights.push_back(static_cast<double>(u.examples_seen) / total);
  }
  ModelParams out{updates[0].theta, updates[0].phi};
  average_store(out.theta, updates, &ClientUpdate::theta, weights);
  average_store(out.phi, updates, &ClientUpdate::phi, weights);
  return out;
}

std::uint64_t round_bytes(Index participants, const ModelParams& params) {
  return static_cast<std::uint64_t>(participants) * static_cast<std::uint64_t>(params.communicated_count()) * 8u * 2u;
}

std::vector<RoundReport> run_rounds(ServerState& server, std::vector<Client>& clients, const RoundConfig& cfg,
                                    const LossConfig& loss, const Evaluator& evaluate) {
  cfg.validate();
  loss.validate();
  if (clients.empty()) throw ConfigError("run_rounds: no clients");
  std::vector<RoundReport> reports;
  for (Index r = 0; r < cfg.rounds; ++r) {
    const std::vector<Index> selected = sample_clients(static_cast<Index>(clients.size()), cfg.participation, server.rng);
    const double lr = cfg.lr_at(r);
    std::vector<ClientUpdate> updates(selected.size());
    std::vector<std::exception_ptr> errors(selected.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < selected.size(); i = next++) {
        try {
          Client& c = clients[static_cast<std::size_t>(selected[i])];
          updates[i] = c.local_train(server.params, cfg.local_steps, lr, loss, cfg.batch_size,
                                     batch_seed(cfg.client_seed, c.id(), server.round));
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    const auto n_threads = static_cast<std::size_t>(std::min<Index>(cfg.threads, static_cast<Index>(selected.size())));
    if (n_threads <= 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }
    for (std::size_t i = 0; i < errors.size(); ++i) {
      if (!errors[i]) continue;
      try {
        std::rethrow_exception(errors[i]);
      } catch (const NumericError& e) {
        throw NumericError("round " + std::to_string(server.round) + ", " + e.what());
      }
    }

    RoundReport report;
    report.round = server.round;
    report.participants = selected;
    report.bytes = round_bytes(static_cast<Index>(selected.size()), server.params);
    double loss_sum = 0.0;
    double ce_sum = 0.0;
    double crp_sum = 0.0;
    for (std::size_t i = 0; i < updates.size(); ++i) {
      const ClientUpdate& u = updates[i];
      if (u.local_loss_trace.empty()) {
        Client& c = clients[static_cast<std::size_t>(selected[i])];
        ModelParams probe = server.params;
        const Client::LossParts parts = c.measure_loss(probe, loss);
        loss_sum += parts.loss;
        ce_sum += parts.ce;
        crp_sum += parts.crp;
        continue;
      }
      const auto k = static_cast<double>(u.local_loss_trace.size());
      loss_sum += std::accumulate(u.local_loss_trace.begin(), u.local_loss_trace.end(), 0.0) / k;
      ce_sum += std::accumulate(u.ce_trace.begin(), u.ce_trace.end(), 0.0) / k;
      crp_sum += std::accumulate(u.crp_trace.begin(), u.crp_trace.end(), 0.0) / k;
    }
    const auto count = static_cast<double>(updates.size());
    report.train_loss = loss_sum / count;
    report.ce = ce_sum / count;
    report.crp = crp_sum / count;

    server.params = aggregate_fedavg(std::move(updates), cfg.weighted);
    ++server.round;

    if (server.round % cfg.eval_cadence == 0) {
      if (evaluate) {
        const EvalResult acc = evaluate(server.params, clients);
        report.acc_local = acc.acc_local;
        report.acc_base = acc.acc_base;
        report.acc_new = acc.acc_new;
        report.hm = acc.hm;
      }
      server.history.push_back(report);
      reports.push_back(std::move(report));
    }
  }
  return reports;
}

}  // namespace fedcsap
