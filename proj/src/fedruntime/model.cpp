#include "fedcsap/fedruntime/model.hpp"

#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/ops.hpp"
#include "fedcsap/numerics/random.hpp"

namespace fedcsap {

const std::string FedCsapModel::kStaticPrompts = "static_prompts";

Index ModelConfig::content_width() const {
  Index total = 0;
  for (const StageShape& s : stages) total += s.channels;
  return total;
}

PromptGenConfig ModelConfig::prompt_gen() const {
  PromptGenConfig g;
  g.width = width;
  g.prompt_length = prompt_length;
  g.heads = heads;
  g.init_std = init_std;
  return g;
}

InjectionConfig ModelConfig::injection() const {
  InjectionConfig c;
  c.width = width;
  c.content_width = content_width();
  c.se_layers = se_layers;
  c.reduction = reduction;
  c.tokens = prompt_length;
  c.init_std = init_std;
  return c;
}

void ModelConfig::validate() const {
  prompt_gen().validate();
  if (stages.empty()) throw ConfigError("model.stage_shapes: need at least one stage");
  for (std::size_t l = 1; l < stages.size(); ++l) {
    if (stages[l].width > stages[l - 1].width || stages[l].height > stages[l - 1].height) {
      throw ConfigError("model.stage_shapes[" + std::to_string(l) + "]: spatial extent may not grow");
    }
  }
  injection().validate();
}

FrozenEncoders::FrozenEncoders(const ModelConfig& cfg, std::uint64_t seed)
    : text(cfg.width, cfg.prompt_length, derive_seed(seed, "encoders.text")),
      vision(cfg.image, cfg.stages, cfg.width, derive_seed(seed, "encoders.vision")) {}

FedCsapModel::FedCsapModel(ModelConfig cfg, std::shared_ptr<const FrozenEncoders> encoders)
    : cfg_(std::move(cfg)),
      encoders_(std::move(encoders)),
      generator_(cfg_.prompt_gen()),
      injection_(cfg_.injection()) {
  cfg_.validate();
  if (!encoders_) throw ConfigError("model needs frozen encoders");
}

ModelParams FedCsapModel::init_params(std::uint64_t seed) const {
  ModelParams params;
  Rng theta_rng(derive_seed(seed, "init.theta"));
  if (cfg_.static_prompts) {
    params.theta.add(kStaticPrompts, normal_tensor({cfg_.prompt_length, cfg_.width}, cfg_.init_std, theta_rng));
  } else {
    generator_.register_parameters(params.theta, theta_rng);
  }
  Rng phi_rng(derive_seed(seed, "init.phi"));
  injection_.register_parameters(params.phi, phi_rng);
  params.phi.set_frozen(cfg_.disable_injection);
  return params;
}

ImageFeatures FedCsapModel::encode_images(std::span<const Example> examples) const {
  const auto n = static_cast<Index>(examples.size());
  if (n == 0) throw InputError("encode_images: empty batch");
  ImageFeatures out{Tensor({n, cfg_.width}), Tensor({n, cfg_.content_width()})};
  for (Index i = 0; i < n; ++i) {
    const FrozenVisionEncoder::Output v = encoders_->vision.forward(examples[i].image);
    out.embeds.matrix().row(i) = v.embedding.data().transpose();
    out.pooled.matrix().row(i) = gap_multiscale(v.features).data().transpose();
  }
  return out;
}

Var FedCsapModel::context_prompts(Tape& tape, ModelParams& params, Var class_embeds, bool trainable) const {
  if (cfg_.static_prompts) return bind(tape, params.theta.at(kStaticPrompts), trainable);
  return generator_.forward(tape, class_embeds, params.theta, trainable).prompts;
}

FedCsapModel::Forward FedCsapModel::score(Tape& tape, ModelParams& params, const BatchFeatures& batch, double tau,
                                          bool trainable) const {
  const Index b = batch.batch();
  const Index n = batch.class_embeds.dim(0);
  const Index d = cfg_.width;
  const Index m = cfg_.prompt_length;
  if (batch.content.shape() != Shape{b, cfg_.content_width()} || batch.style.shape() != batch.content.shape()) {
    throw DimensionError("batch features: content " + to_string(batch.content.shape()) + ", style " +
                         to_string(batch.style.shape()) + " for batch of " + std::to_string(b));
  }
  Var class_embeds = tape.constant(batch.class_embeds);
  Var prompts = context_prompts(tape, params, class_embeds, trainable);
  Var shared = tile_rows(reshape(prompts, {1, m * d}), b);

  Forward out;
  if (cfg_.disable_injection) {
    out.c_prime = shared;
  } else {
    const Index D = injection_.config().fused_width();
    const Index c = cfg_.content_width();
    Tensor fused({b, D});
    MatrixMap f = fused.matrix();
    f.leftCols(d).rowwise() = batch.class_embeds.matrix().colwise().mean();
    f.middleCols(d, c) = batch.content.matrix();
    f.rightCols(c) = batch.style.matrix();
    const bool train_phi = trainable && !params.phi.frozen();
    Var o_q = injection_.se_forward(tape, tape.constant(std::move(fused)), params.phi, train_phi);
    Var visual = injection_.project_visual_tokens(tape, o_q, params.phi, train_phi);
    out.c_prime = shared + visual;
  }
  Var sequences = assemble_prompt_batch(out.c_prime, class_embeds);
  Var prompt_embeds = encoders_->text.encode_prompt_batch(tape, sequences);
  out.logits = cosine_logits(tape.constant(batch.image_embeds), prompt_embeds, n, tau);
  return out;
}

FedCsapModel::Forward FedCsapModel::forward(Tape& tape, ModelParams& params, const BatchFeatures& batch,
                                            const LossConfig& loss, bool trainable) const {
  loss.validate();
  Forward out = score(tape, params, batch, loss.tau, trainable);
  out.ce = ce_loss(out.logits, batch.labels);
  out.crp = crp_loss_batch(out.c_prime, cfg_.prompt_length, loss.crp_variant);
  out.loss = total_loss(out.ce, out.crp, loss);
  return out;
}

}  // namespace fedcsap
