#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedcsap/datagen/dataset.hpp"
#include "fedcsap/encoders/text_encoder.hpp"
#include "fedcsap/encoders/vision_encoder.hpp"
#include "fedcsap/injection/injection_block.hpp"
#include "fedcsap/losses/losses.hpp"
#include "fedcsap/numerics/parameter_store.hpp"
#include "fedcsap/prompt_gen/prompt_generator.hpp"

namespace fedcsap {

struct ModelConfig {
  Index width = 64;  // d
  Index prompt_length = 4;
  Index heads = 4;
  ImageShape image;
  std::vector<StageShape> stages{{16, 16, 8}, {8, 8, 16}, {4, 4, 32}};
  Index se_layers = 2;
  Index reduction = 4;
  double init_std = 0.02;
  double style_momentum = 0.9;
  /// Skip the injection block: c' = P and phi stays frozen.
  bool disable_injection = false;
  /// Replace the generator with a directly learned [m x d] prompt matrix.
  bool static_prompts = false;

  Index content_width() const;
  PromptGenConfig prompt_gen() const;
  InjectionConfig injection() const;
  void validate() const;
};

/// Frozen encoders shared read-only by every client.
struct FrozenEncoders {
  FrozenEncoders(const ModelConfig& cfg, std::uint64_t seed);

  FrozenTextEncoder text;
  FrozenVisionEncoder vision;
};

/// theta: generator (or static prompts); phi: injection block.
struct ModelParams {
  ParameterStore theta;
  ParameterStore phi;

  bool identical(const ModelParams& other) const {
    return theta.identical(other.theta) && phi.identical(other.phi);
  }
  /// Scalars exchanged per transfer; frozen stores are not sent.
  Index communicated_count() const {
    return (theta.frozen() ? 0 : theta.parameter_count()) + (phi.frozen() ? 0 : phi.parameter_count());
  }
};

/// Frozen-encoder outputs for a batch. Nothing here is trainable.
struct BatchFeatures {
  Tensor image_embeds;  // [B x d], unit rows
  Tensor content;       // [B x sum C_l], pooled multi-scale features
  Tensor style;         // [B x sum C_l], style statistic used for each row
  Tensor class_embeds;  // [n x d]
  std::vector<Index> labels;  // row labels as positions in the class list

  Index batch() const { return image_embeds.dim(0); }
};

struct ImageFeatures {
  Tensor embeds;  // [N x d]
  Tensor pooled;  // [N x sum C_l]
};

/// The full prompt-learning pipeline on top of the frozen encoders:
/// class names -> context prompts -> injected visual tokens -> prompt
/// sequences -> cosine logits -> loss.
class FedCsapModel {
 public:
  struct Forward {
    Var logits;   // [B x n]
    Var c_prime;  // [B x m*d], injected context tokens per image
    Var ce;
    Var crp;
    Var loss;
  };

  FedCsapModel(ModelConfig cfg, std::shared_ptr<const FrozenEncoders> encoders);

  const ModelConfig& config() const { return cfg_; }
  const FrozenEncoders& encoders() const { return *encoders_; }
  const PromptGenerator& generator() const { return generator_; }
  const InjectionBlock& injection() const { return injection_; }

  ModelParams init_params(std::uint64_t seed) const;

  ImageFeatures encode_images(std::span<const Example> examples) const;

  /// Logits and injected tokens only.
  Forward score(Tape& tape, ModelParams& params, const BatchFeatures& batch, double tau, bool trainable) const;
  /// Logits plus ce, crp and the combined loss.
  Forward forward(Tape& tape, ModelParams& params, const BatchFeatures& batch, const LossConfig& loss,
                  bool trainable = true) const;

  /// Context prompts P [m x d] for the given class embeddings.
  Var context_prompts(Tape& tape, ModelParams& params, Var class_embeds, bool trainable) const;

  static const std::string kStaticPrompts;

 private:
  ModelConfig cfg_;
  std::shared_ptr<const FrozenEncoders> encoders_;
  PromptGenerator generator_;
  InjectionBlock injection_;
};

}  // namespace fedcsap
