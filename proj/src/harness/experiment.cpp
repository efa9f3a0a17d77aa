#include "fedcsap/harness/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <thread>

#include "fedcsap/fedruntime/checkpoint.hpp"
#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/random.hpp"

namespace fedcsap::harness {

namespace {

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string format_metrics_row(const RoundReport& r) {
  std::string participants;
  for (std::size_t i = 0; i < r.participants.size(); ++i) {
    if (i > 0) participants += ';';
    participants += std::to_string(r.participants[i]);
  }
  return std::to_string(r.round) + ',' + fmt_real(r.train_loss) + ',' + fmt_real(r.ce) + ',' + fmt_real(r.crp) + ',' +
         fmt_real(r.acc_local) + ',' + fmt_real(r.acc_base) + ',' + fmt_real(r.acc_new) + ',' + fmt_real(r.hm) + ',' +
         std::to_string(r.bytes) + ',' + participants;
}

Index client_threads() {
  if (const char* env = std::getenv("FEDCSAP_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("FEDCSAP_THREADS: expected a positive integer");
    return static_cast<Index>(v);
  }
  return std::max<Index>(1, static_cast<Index>(std::thread::hardware_concurrency()));
}

Experiment::Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)), audit_(std::make_shared<NameAudit>()) {
  cfg_.resolve();
  cfg_.validate();
  data_ = generate_dataset(cfg_.data);
  std::vector<Index> ids(static_cast<std::size_t>(data_.num_classes));
  std::iota(ids.begin(), ids.end(), Index{0});
  split_ = base_new_split(ids);

  auto encoders = std::make_shared<FrozenEncoders>(cfg_.model, derive_seed(cfg_.master_seed, "encoders"));
  encoders->text.set_audit(audit_);
  encoders_ = encoders;
  model_ = std::make_unique<FedCsapModel>(cfg_.model, encoders_);

  audit_->arm(true);
  for (ClientShard& shard : partition_clients(data_, split_.base, cfg_.per_client_classes, data_.shots_per_class)) {
    clients_.emplace_back(std::move(shard), *model_);
  }
  audit_->arm(false);

  server_.params = model_->init_params(derive_seed(cfg_.master_seed, "init"));
  server_.rng = Rng(derive_seed(cfg_.master_seed, "server.sampling"));
  evaluator_ = std::make_unique<ProtocolEvaluator>(*model_, data_, split_, clients_, cfg_.loss.tau);
}

std::vector<RoundReport> Experiment::run(Index threads) {
  RoundConfig fed = cfg_.fed;
  fed.threads = std::max<Index>(1, threads);
  const ProtocolEvaluator& eval = *evaluator_;
  audit_->arm(true);
  try {
    std::vector<RoundReport> reports = run_rounds(
        server_, clients_, fed, cfg_.loss, [this, &eval](ModelParams& p, std::span<const Client> cs) {
          audit_->arm(false);
          EvalResult r = eval(p, cs);
          audit_->arm(true);
          return r;
        });
    audit_->arm(false);
    return reports;
  } catch (...) {
    audit_->arm(false);
    throw;
  }
}

EvalResult Experiment::evaluate() { return (*evaluator_)(server_.params, clients_); }

GradCheckReport Experiment::gradcheck(double h) {
  const Index trainable = server_.params.communicated_count();
  if (trainable > kGradcheckMaxParameters) {
    throw ConfigError("gradcheck: " + std::to_string(trainable) + " trainable parameters exceed the limit of " +
                      std::to_string(kGradcheckMaxParameters) + "; use a smaller model");
  }
  const BatchFeatures batch = clients_.front().full_batch();
  ModelParams& params = server_.params;
  LossBuilder loss = [&](Tape& tape) { return model_->forward(tape, params, batch, cfg_.loss, true).loss; };
  ParameterStore* stores[] = {&params.theta, &params.phi};
  GradCheckReport report = finite_diff_check(loss, stores, h);
  for (std::size_t i = 0; i < report.blocks.size(); ++i) {
    report.blocks[i].name = (i < params.theta.size() ? "theta." : "phi.") + report.blocks[i].name;
  }
  return report;
}

int run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  namespace fs = std::filesystem;
  const fs::path out_dir(cfg.output_dir);
  fs::create_directories(out_dir);
  {
    std::ofstream resolved(out_dir / "config.resolved.json");
    resolved << to_json(cfg).dump(2) << '\n';
    if (!resolved) throw FormatError("cannot write " + (out_dir / "config.resolved.json").string());
  }
  Experiment exp(cfg);
  std::vector<RoundReport> reports;
  try {
    reports = exp.run(client_threads());
  } catch (const NumericError& e) {
    log << "non-finite value: " << e.what() << '\n';
    return 3;
  }
  std::ofstream csv(out_dir / "metrics.csv", std::ios::binary);
  csv << kMetricsHeader << '\n';
  for (const RoundReport& r : reports) csv << format_metrics_row(r) << '\n';
  if (!csv) throw FormatError("cannot write " + (out_dir / "metrics.csv").string());
  save_checkpoint((out_dir / "final.fckp").string(), exp.params(), exp.clients());
  if (!reports.empty()) {
    const RoundReport& last = reports.back();
    log << "round " << last.round << ": train_loss " << fmt_real(last.train_loss) << ", acc_local "
        << last.acc_local << ", acc_base " << last.acc_base << ", acc_new " << last.acc_new << ", hm " << last.hm
        << '\n';
  }
  log << "wrote " << out_dir.string() << '\n';
  return 0;
}

int gradcheck_command(const ExperimentConfig& cfg, std::ostream& out) {
  Experiment exp(cfg);
  const GradCheckReport report = exp.gradcheck();
  bool ok = true;
  for (const BlockError& b : report.blocks) {
    char line[160];
    if (b.skipped) {
      std::snprintf(line, sizeof line, "%-40s %6lld  frozen/skipped", b.name.c_str(),
                    static_cast<long long>(b.coordinates));
    } else {
      const bool pass = b.max_rel_error < kGradcheckTolerance;
      ok = ok && pass;
      std::snprintf(line, sizeof line, "%-40s %6lld  max_rel_err %.3e  %s", b.name.c_str(),
                    static_cast<long long>(b.coordinates), b.max_rel_error, pass ? "ok" : "FAIL");
    }
    out << line << '\n';
  }
  char summary[80];
  std::snprintf(summary, sizeof summary, "overall max_rel_err %.3e (tolerance %.0e)", report.max_rel_error,
                kGradcheckTolerance);
  out << summary << '\n';
  return ok ? 0 : 1;
}

int eval_command(const ExperimentConfig& cfg, const std::string& checkpoint, std::ostream& out) {
  Experiment exp(cfg);
  restore_checkpoint(checkpoint, exp.params(), exp.clients());
  const EvalResult r = exp.evaluate();
  out << "acc_local " << fmt_real(r.acc_local) << '\n'
      << "acc_base " << fmt_real(r.acc_base) << '\n'
      << "acc_new " << fmt_real(r.acc_new) << '\n'
      << "hm " << fmt_real(r.hm) << '\n';
  return 0;
}

}  // namespace fedcsap::harness
