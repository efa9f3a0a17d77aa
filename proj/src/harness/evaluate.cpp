#include "fedcsap/harness/evaluate.hpp"

#include <algorithm>

#include "fedcsap/numerics/errors.hpp"

namespace fedcsap::harness {

double harmonic_mean(double a, double b, double c) {
  if (!(a >= 0.0 && b >= 0.0 && c >= 0.0)) throw InputError("harmonic_mean: values must be non-negative");
  if (a == 0.0 || b == 0.0 || c == 0.0) return 0.0;
  return 3.0 / (1.0 / a + 1.0 / b + 1.0 / c);
}

Tensor style_for_domain(Index domain, std::span<const Client> clients) {
  if (clients.empty()) throw InputError("style_for_domain: no clients");
  for (const Client& c : clients) {
    if (c.shard().domain_id == domain) return c.style().value();
  }
  Tensor mean = Tensor::zeros({clients.front().style().value().size()});
  for (const Client& c : clients) mean.data() += c.style().value().data();
  mean.data() /= static_cast<double>(clients.size());
  return mean;
}

ProtocolEvaluator::ProtocolEvaluator(const FedCsapModel& model, const Dataset& data, const ClassSplit& split,
                                     std::span<const Client> clients, double tau)
    : model_(&model), tau_(tau) {
  for (const Client& c : clients) {
    local_.push_back(make_group(data, c.shard().class_ids, c.shard().domain_id));
  }
  // Base rows are the union of the local rows, relabelled against all base classes.
  std::vector<Example> base_rows;
  for (std::size_t ci = 0; ci < clients.size(); ++ci) {
    const Client& c = clients[ci];
    for (const Example& ex : data.eval) {
      const auto& ids = c.shard().class_ids;
      if (ex.domain == c.shard().domain_id && std::find(ids.begin(), ids.end(), ex.label) != ids.end()) {
        base_rows.push_back(ex);
        base_.owners.push_back(static_cast<Index>(ci));
      }
    }
  }
  std::vector<std::string> base_names;
  for (Index k : split.base) base_names.push_back(data.class_names[static_cast<std::size_t>(k)]);
  if (base_rows.empty()) throw InputError("evaluate: empty base evaluation split");
  base_.features = model.encode_images(base_rows);
  base_.class_embeds = model.encoders().text.embed_class_names(base_names);
  for (const Example& ex : base_rows) {
    base_.labels.push_back(static_cast<Index>(std::find(split.base.begin(), split.base.end(), ex.label) -
                                              split.base.begin()));
    base_.domains.push_back(ex.domain);
  }
  novel_ = make_group(data, split.novel, -1);
}

ProtocolEvaluator::Group ProtocolEvaluator::make_group(const Dataset& data, std::span<const Index> classes,
                                                       Index only_domain) const {
  Group g;
  std::vector<Example> rows;
  for (const Example& ex : data.eval) {
    auto it = std::find(classes.begin(), classes.end(), ex.label);
    if (it == classes.end() || (only_domain >= 0 && ex.domain != only_domain)) continue;
    rows.push_back(ex);
    g.labels.push_back(static_cast<Index>(it - classes.begin()));
    g.domains.push_back(ex.domain);
  }
  if (rows.empty()) throw InputError("evaluate: empty evaluation split");
  g.features = model_->encode_images(rows);
  std::vector<std::string> names;
  for (Index k : classes) names.push_back(data.class_names[static_cast<std::size_t>(k)]);
  g.class_embeds = model_->encoders().text.embed_class_names(names);
  return g;
}

double ProtocolEvaluator::accuracy(const Group& group, ModelParams& params, std::span<const Client> clients,
                                   const Tensor* fixed_style) const {
  const Index b = group.features.embeds.dim(0);
  BatchFeatures batch;
  batch.image_embeds = group.features.embeds;
  batch.content = group.features.pooled;
  batch.style = Tensor(group.features.pooled.shape());
  batch.class_embeds = group.class_embeds;
  batch.labels = group.labels;
  for (Index i = 0; i < b; ++i) {
    const auto row = static_cast<std::size_t>(i);
    Tensor mu;
    if (fixed_style) {
      mu = *fixed_style;
    } else if (!group.owners.empty()) {
      mu = clients[static_cast<std::size_t>(group.owners[row])].style().value();
    } else {
      mu = style_for_domain(group.domains[row], clients);
    }
    batch.style.matrix().row(i) = mu.data().transpose();
  }
  Tape tape;
  const Tensor& logits = model_->score(tape, params, batch, tau_, false).logits.value();
  Index correct = 0;
  for (Index i = 0; i < b; ++i) {
    Index best = 0;
    logits.matrix().row(i).maxCoeff(&best);
    if (best == group.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(b);
}

EvalResult ProtocolEvaluator::operator()(ModelParams& params, std::span<const Client> clients) const {
  if (clients.size() != local_.size()) throw InputError("evaluate: client count changed since construction");
  EvalResult r;
  double local_sum = 0.0;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    local_sum += accuracy(local_[i], params, clients, &clients[i].style().value());
  }
  r.acc_local = local_sum / static_cast<double>(clients.size());
  r.acc_base = accuracy(base_, params, clients, nullptr);
  r.acc_new = accuracy(novel_, params, clients, nullptr);
  r.hm = harmonic_mean(r.acc_local, r.acc_base, r.acc_new);
  return r;
}

}  // namespace fedcsap::harness
