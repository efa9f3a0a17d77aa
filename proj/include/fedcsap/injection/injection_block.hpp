#pragma once

#include <string>
#include <vector>

#include "fedcsap/numerics/parameter_store.hpp"
#include "fedcsap/numerics/random.hpp"
#include "fedcsap/numerics/tape.hpp"

namespace fedcsap {

struct InjectionConfig {
  Index width = 64;          // d, text width and visual token width
  Index content_width = 56;  // sum of stage channels
  Index se_layers = 2;       // Q_se
  Index reduction = 4;       // r
  Index tokens = 4;          // M, equals the prompt length m
  double init_std = 0.02;

  /// D = d + 2 * sum C_l: pooled text, pooled content, style.
  Index fused_width() const { return width + 2 * content_width; }
  Index bottleneck() const { return std::max<Index>(1, fused_width() / reduction); }
  void validate() const;
};

/// M(x) = [mean of T rows ; F_hat ; mu], length d + 2 * sum C_l.
Tensor build_fused_input(const Tensor& class_embeddings, const Tensor& content, const Tensor& style);

/// Channel-gating injection block.
///
/// Each of the Q_se layers applies O <- O * A(O) + O with
/// A(v) = sigmoid(relu(v W1) W2); the final O is mapped by M linear heads to
/// the visual tokens v_1..v_M. Parameters live in the phi store under
/// "injection.*". Token-head biases start at zero.
class InjectionBlock {
 public:
  explicit InjectionBlock(InjectionConfig cfg);

  const InjectionConfig& config() const { return cfg_; }

  void register_parameters(ParameterStore& phi, Rng& rng) const;

  /// fused: [D] or [B x D] -> same shape.
  Var se_forward(Tape& tape, Var fused, ParameterStore& phi, bool trainable = true) const;

  /// o_q: [D] -> [M x d]; [B x D] -> [B x M*d] with row b = [v_1 ... v_M].
  Var project_visual_tokens(Tape& tape, Var o_q, ParameterStore& phi, bool trainable = true) const;

  static const std::string kPrefix;

 private:
  InjectionConfig cfg_;
};

/// c' = P + V, then t_j = [c'_1, ..., c'_m, class_j] for every class.
/// P, V: [m x d]; class_embeddings: [n x d]. Returns n tensors [(m+1) x d].
std::vector<Var> inject_and_assemble(Var prompts, Var visual_tokens, Var class_embeddings);

/// Batched assembly used in training. c_prime: [B x m*d], one image per row;
/// class_embeddings: [n x d]. Returns [B*n x (m+1)*d] where row b*n + j is
/// the flattened prompt sequence of image b for class j.
Var assemble_prompt_batch(Var c_prime, Var class_embeddings);

}  // namespace fedcsap
