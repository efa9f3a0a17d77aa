#pragma once

#include <span>

#include "fedcsap/numerics/tape.hpp"

namespace fedcsap {

enum class CrpVariant {
  /// Row-normalize c', then sum |G_jl| over j != l of the Gram matrix.
  normalized,
  /// Sum |(C' C'^T - I)_jl| over all j, l on raw tokens.
  unnormalized,
};

struct LossConfig {
  double tau = 0.01;
  double lambda_crp = 0.1;
  CrpVariant crp_variant = CrpVariant::normalized;

  void validate() const;
};

/// Cosine logits: rows of `image_embeds` [B x d] against rows of
/// `prompt_embeds`, both assumed unit norm, divided by tau.
/// prompt_embeds is either [n x d] (shared by all images) or [B*n x d]
/// (row b*n + j belongs to image b). Returns [B x n].
Var cosine_logits(Var image_embeds, Var prompt_embeds, Index classes, double tau);

/// softmax(cos(image, prompt_j) / tau) for one image: [d], [n x d] -> [n].
Var class_probs(Var image_embed, Var prompt_embeds, double tau);

/// Mean over the batch of -log p(label); evaluated in log space from logits.
Var ce_loss(Var logits, std::span<const Index> labels);

/// Context redundancy penalty for one image's tokens c' [m x d].
/// Defined as 0 when m < 2.
Var crp_loss(Var c_prime, CrpVariant variant = CrpVariant::normalized);

/// CRP averaged over a batch; c_prime_batch is [B x m*d].
Var crp_loss_batch(Var c_prime_batch, Index prompt_length, CrpVariant variant = CrpVariant::normalized);

/// ce + lambda * crp.
Var total_loss(Var ce, Var crp, const LossConfig& cfg);

/// Mean |G_jl| over j != l for row-normalized tokens [m x d].
double mean_offdiag_similarity(const Tensor& c_prime);

}  // namespace fedcsap
