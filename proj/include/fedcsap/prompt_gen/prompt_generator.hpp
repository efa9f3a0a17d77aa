#pragma once

#include <string>

#include "fedcsap/numerics/parameter_store.hpp"
#include "fedcsap/numerics/random.hpp"
#include "fedcsap/numerics/tape.hpp"

namespace fedcsap {

struct PromptGenConfig {
  Index width = 64;        // d
  Index prompt_length = 4; // m
  Index heads = 4;
  Index hidden = 0;        // MLP width; 0 means 2 * width
  double init_std = 0.02;
  double ln_eps = 1e-5;

  Index mlp_width() const { return hidden > 0 ? hidden : 2 * width; }
  Index head_width() const { return width / heads; }
  void validate() const;
};

/// Cross-attention prompt generator.
///
/// m learnable queries attend over the class-name embeddings T [n x d] with
/// K = T W_K and V = T W_V split into heads, per head
/// softmax(Q_h K_h^T / sqrt(d_head)) V_h. The heads are concatenated,
/// projected by W_O, layer-normalized and passed through a two-layer ReLU MLP
/// to give the context tokens P [m x d]. There are no residual paths.
///
/// Parameters live in the theta store under "prompt_gen.*".
class PromptGenerator {
 public:
  struct Output {
    Var attention;  // concatenated head outputs before W_O, [m x d]
    Var prompts;    // P, [m x d]
  };

  explicit PromptGenerator(PromptGenConfig cfg);

  const PromptGenConfig& config() const { return cfg_; }

  void register_parameters(ParameterStore& theta, Rng& rng) const;

  /// Binds theta on the tape (as parameters when `trainable`, else as
  /// constants) and runs the generator on the class embeddings.
  Output forward(Tape& tape, Var class_embeddings, ParameterStore& theta, bool trainable = true) const;

  static const std::string kPrefix;

 private:
  PromptGenConfig cfg_;
};

/// Binds a stored tensor on the tape either as a trainable leaf or as a
/// constant copy.
Var bind(Tape& tape, Tensor& t, bool trainable);

}  // namespace fedcsap
