#include "fedcsap/losses/losses.hpp"

#include <cmath>
#include <vector>

#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/ops.hpp"

namespace fedcsap {

void LossConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("loss.tau: must be positive");
  if (!(lambda_crp >= 0.0)) throw ConfigError("loss.lambda_crp: must be non-negative");
}

Var cosine_logits(Var image_embeds, Var prompt_embeds, Index classes, double tau) {
  if (!(tau > 0.0)) throw InputError("cosine_logits: tau must be positive");
  const Tensor& img = image_embeds.value();
  const Tensor& txt = prompt_embeds.value();
  if (img.rank() != 2 || txt.rank() != 2 || img.dim(1) != txt.dim(1)) {
    throw DimensionError("cosine_logits: image " + to_string(img.shape()) + " vs prompts " + to_string(txt.shape()));
  }
  const Index batch = img.dim(0);
  if (txt.dim(0) == classes) {
    return scale(matmul(image_embeds, transpose(prompt_embeds)), 1.0 / tau);
  }
  if (txt.dim(0) != batch * classes) {
    throw DimensionError("cosine_logits: expected " + std::to_string(classes) + " or " +
                         std::to_string(batch * classes) + " prompt rows, got " + std::to_string(txt.dim(0)));
  }
  Var dots = reduce(ReduceOp::sum, repeat_rows(image_embeds, classes) * prompt_embeds, {1});
  return scale(reshape(dots, {batch, classes}), 1.0 / tau);
}

Var class_probs(Var image_embed, Var prompt_embeds, double tau) {
  if (!(tau > 0.0)) throw InputError("class_probs: tau must be positive");
  const Index d = image_embed.value().size();
  const Index n = prompt_embeds.value().dim(0);
  Var logits = cosine_logits(reshape(image_embed, {1, d}), prompt_embeds, n, tau);
  return reshape(softmax(logits, 1), {n});
}

Var ce_loss(Var logits, std::span<const Index> labels) { return cross_entropy(logits, labels); }

Var crp_loss(Var c_prime, CrpVariant variant) {
  const Tensor& c = c_prime.value();
  if (c.rank() != 2) throw DimensionError("crp_loss expects [m x d], got " + to_string(c.shape()));
  Tape& tape = *c_prime.tape;
  const Index m = c.dim(0);
  if (m < 2) return tape.constant(Tensor::scalar(0.0));
  if (variant == CrpVariant::normalized) {
    Var unit = l2_normalize(c_prime);
    Var gram = matmul(unit, transpose(unit));
    Tensor off_diag = Tensor::constant({m, m}, 1.0);
    for (Index j = 0; j < m; ++j) off_diag[j * m + j] = 0.0;
    return sum(abs(gram) * tape.constant(std::move(off_diag)));
  }
  Var gram = matmul(c_prime, transpose(c_prime));
  Tensor eye({m, m});
  for (Index j = 0; j < m; ++j) eye[j * m + j] = 1.0;
  return sum(abs(gram - tape.constant(std::move(eye))));
}

Var crp_loss_batch(Var c_prime_batch, Index prompt_length, CrpVariant variant) {
  const Tensor& c = c_prime_batch.value();
  if (c.rank() != 2 || prompt_length < 1 || c.dim(1) % prompt_length != 0) {
    throw DimensionError("crp_loss_batch: c' " + to_string(c.shape()) + " incompatible with m = " +
                         std::to_string(prompt_length));
  }
  const Index batch = c.dim(0);
  const Index d = c.dim(1) / prompt_length;
  std::vector<Var> per_image;
  per_image.reserve(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    per_image.push_back(crp_loss(reshape(slice(c_prime_batch, 0, b, 1), {prompt_length, d}), variant));
  }
  return mean(concat(per_image, 0));
}

Var total_loss(Var ce, Var crp, const LossConfig& cfg) {
  if (cfg.lambda_crp == 0.0) return ce;
  return ce + cfg.lambda_crp * crp;
}

double mean_offdiag_similarity(const Tensor& c_prime) {
  const Index m = c_prime.dim(0);
  if (m < 2) return 0.0;
  const Tensor unit = l2_normalize(c_prime).value;
  const RowMatrix gram = unit.matrix() * unit.matrix().transpose();
  double total = 0.0;
  for (Index j = 0; j < m; ++j) {
    for (Index l = 0; l < m; ++l) {
      if (j != l) total += std::abs(gram(j, l));
    }
  }
  return total / static_cast<double>(m * (m - 1));
}

}  // namespace fedcsap
