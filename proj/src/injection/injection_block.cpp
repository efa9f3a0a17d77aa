#include "fedcsap/injection/injection_block.hpp"

#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/ops.hpp"
#include "fedcsap/prompt_gen/prompt_generator.hpp"

namespace fedcsap {

const std::string InjectionBlock::kPrefix = "injection.";

void InjectionConfig::validate() const {
  if (width < 1 || content_width < 1) throw ConfigError("injection widths must be positive");
  if (se_layers < 1) throw ConfigError("model.Q_se: need at least one gating layer");
  if (reduction < 1) throw ConfigError("model.r: must be positive");
  if (tokens < 1) throw ConfigError("model.m: must be positive");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std: must be positive");
}

Tensor build_fused_input(const Tensor& class_embeddings, const Tensor& content, const Tensor& style) {
  if (class_embeddings.rank() != 2 || class_embeddings.dim(0) < 1) {
    throw DimensionError("build_fused_input: class embeddings must be [n x d], got " +
                         to_string(class_embeddings.shape()));
  }
  if (content.rank() != 1 || style.shape() != content.shape()) {
    throw DimensionError("build_fused_input: content " + to_string(content.shape()) + " and style " +
                         to_string(style.shape()) + " must be equal-length vectors");
  }
  const Index d = class_embeddings.dim(1);
  const Index c = content.size();
  Tensor out({d + 2 * c});
  out.data().head(d) = class_embeddings.matrix().colwise().mean().transpose();
  out.data().segment(d, c) = content.data();
  out.data().tail(c) = style.data();
  return out;
}

InjectionBlock::InjectionBlock(InjectionConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void InjectionBlock::register_parameters(ParameterStore& phi, Rng& rng) const {
  const Index D = cfg_.fused_width();
  const Index hidden = cfg_.bottleneck();
  for (Index q = 0; q < cfg_.se_layers; ++q) {
    const std::string layer = kPrefix + "se." + std::to_string(q) + ".";
    phi.add(layer + "w1", normal_tensor({D, hidden}, cfg_.init_std, rng));
    phi.add(layer + "w2", normal_tensor({hidden, D}, cfg_.init_std, rng));
  }
  for (Index m = 0; m < cfg_.tokens; ++m) {
    const std::string head = kPrefix + "token_head." + std::to_string(m) + ".";
    phi.add(head + "weight", normal_tensor({D, cfg_.width}, cfg_.init_std, rng));
    phi.add(head + "bias", Tensor::zeros({cfg_.width}));
  }
}

Var InjectionBlock::se_forward(Tape& tape, Var fused, ParameterStore& phi, bool trainable) const {
  const Tensor& x = fused.value();
  const Index D = cfg_.fused_width();
  if (x.dim(x.rank() - 1) != D || x.rank() > 2) {
    throw DimensionError("se_forward expects [D] or [B x D] with D = " + std::to_string(D) + ", got " +
                         to_string(x.shape()));
  }
  const bool single = x.rank() == 1;
  Var out = single ? reshape(fused, {1, D}) : fused;
  for (Index q = 0; q < cfg_.se_layers; ++q) {
    const std::string layer = kPrefix + "se." + std::to_string(q) + ".";
    Var w1 = bind(tape, phi.at(layer + "w1"), trainable);
    Var w2 = bind(tape, phi.at(layer + "w2"), trainable);
    Var gate = sigmoid(matmul(relu(matmul(out, w1)), w2));
    out = out * gate + out;
  }
  return single ? reshape(out, {D}) : out;
}

Var InjectionBlock::project_visual_tokens(Tape& tape, Var o_q, ParameterStore& phi, bool trainable) const {
  const Tensor& x = o_q.value();
  const Index D = cfg_.fused_width();
  if (x.dim(x.rank() - 1) != D || x.rank() > 2) {
    throw DimensionError("project_visual_tokens expects [D] or [B x D], got " + to_string(x.shape()));
  }
  const bool single = x.rank() == 1;
  std::vector<Var> tokens;
  for (Index m = 0; m < cfg_.tokens; ++m) {
    const std::string head = kPrefix + "token_head." + std::to_string(m) + ".";
    Var v = affine(o_q, bind(tape, phi.at(head + "weight"), trainable), bind(tape, phi.at(head + "bias"), trainable));
    tokens.push_back(single ? reshape(v, {1, cfg_.width}) : v);
  }
  return concat(tokens, single ? 0 : 1);
}

std::vector<Var> inject_and_assemble(Var prompts, Var visual_tokens, Var class_embeddings) {
  const Tensor& p = prompts.value();
  if (p.shape() != visual_tokens.value().shape() || p.rank() != 2) {
    throw DimensionError("inject_and_assemble: prompts " + to_string(p.shape()) + " and visual tokens " +
                         to_string(visual_tokens.value().shape()) + " must match");
  }
  const Tensor& t = class_embeddings.value();
  if (t.rank() != 2 || t.dim(1) != p.dim(1) || t.dim(0) < 1) {
    throw DimensionError("inject_and_assemble: class embeddings must be [n x " + std::to_string(p.dim(1)) + "], got " +
                         to_string(t.shape()));
  }
  Var c_prime = prompts + visual_tokens;
  std::vector<Var> sequences;
  for (Index j = 0; j < t.dim(0); ++j) {
    const Var parts[] = {c_prime, slice(class_embeddings, 0, j, 1)};
    sequences.push_back(concat(parts, 0));
  }
  return sequences;
}

Var assemble_prompt_batch(Var c_prime, Var class_embeddings) {
  const Tensor& c = c_prime.value();
  const Tensor& t = class_embeddings.value();
  if (c.rank() != 2 || t.rank() != 2 || c.dim(1) % t.dim(1) != 0) {
    throw DimensionError("assemble_prompt_batch: c' " + to_string(c.shape()) + " incompatible with classes " +
                         to_string(t.shape()));
  }
  const Index n = t.dim(0);
  const Index batch = c.dim(0);
  const Var parts[] = {repeat_rows(c_prime, n), tile_rows(class_embeddings, batch)};
  return concat(parts, 1);
}

}  // namespace fedcsap
