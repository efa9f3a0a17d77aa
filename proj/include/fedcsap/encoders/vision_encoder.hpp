#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedcsap/numerics/tensor.hpp"

namespace fedcsap {

struct ImageShape {
  Index channels = 3;
  Index height = 16;
  Index width = 16;

  Shape shape() const { return {channels, height, width}; }
  Index size() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

/// Output extent of one tapped encoder stage (W_l x H_l x C_l).
struct StageShape {
  Index width = 0;
  Index height = 0;
  Index channels = 0;
  bool operator==(const StageShape&) const = default;
};

/// Frozen multi-scale stand-in for the vision tower.
///
/// Stage l average-pools its input down to H_l x W_l, mixes channels with a
/// fixed 1x1 map plus bias and applies ReLU. Feature maps are stored
/// channel-major as [C_l, H_l, W_l]. The head flattens the last stage and
/// projects it to an L2-normalized R^d embedding.
class FrozenVisionEncoder {
 public:
  struct Output {
    std::vector<Tensor> features;  // one [C_l, H_l, W_l] map per stage
    Tensor embedding;              // [d], unit norm
  };

  FrozenVisionEncoder(ImageShape input, std::vector<StageShape> stages, Index embed_width, std::uint64_t seed);

  Output forward(const Tensor& image) const;

  const ImageShape& input_shape() const { return input_; }
  const std::vector<StageShape>& stages() const { return stages_; }
  Index embed_width() const { return embed_width_; }
  /// Sum of stage channel counts.
  Index pooled_width() const;

  /// Weights in a fixed order, for frozen-ness checks.
  std::vector<const Tensor*> weights() const;

 private:
  ImageShape input_;
  std::vector<StageShape> stages_;
  Index embed_width_;
  std::vector<Tensor> mix_;    // [C_l x C_{l-1}]
  std::vector<Tensor> bias_;   // [C_l]
  Tensor head_;                // [C_L*H_L*W_L x d]
};

/// Per-layer spatial means concatenated in layer order -> [sum C_l].
Tensor gap_multiscale(std::span<const Tensor> features);

/// Exponential moving average of batch style statistics:
/// running <- momentum * running + (1 - momentum) * batch. Starts at zero.
class RunningStyle {
 public:
  explicit RunningStyle(Index width = 0, double momentum = 0.9);

  void update(const Tensor& batch_mean);
  const Tensor& value() const { return value_; }
  Index updates() const { return updates_; }
  double momentum() const { return momentum_; }
  void restore(Tensor value, Index updates);

 private:
  Tensor value_;
  double momentum_;
  Index updates_ = 0;
};

enum class StyleMode { batch, running };

/// Style statistic mu for a batch. In batch mode, the per-channel mean over
/// batch and spatial positions of every tapped stage; in running mode, the
/// tracker's current average.
Tensor batch_style_stats(std::span<const std::vector<Tensor>> batch_features, StyleMode mode,
                         const RunningStyle* running = nullptr);
/// Same statistic from already pooled [sum C_l] vectors.
Tensor batch_style_stats(std::span<const Tensor> pooled);

}  // namespace fedcsap
