#include "fedcsap/encoders/vision_encoder.hpp"

#include <cmath>
#include <string>

#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/ops.hpp"
#include "fedcsap/numerics/random.hpp"

namespace fedcsap {

FrozenVisionEncoder::FrozenVisionEncoder(ImageShape input, std::vector<StageShape> stages, Index embed_width,
                                         std::uint64_t seed)
    : input_(input), stages_(std::move(stages)), embed_width_(embed_width) {
  if (stages_.empty()) throw ConfigError("vision encoder needs at least one stage");
  if (embed_width < 1) throw ConfigError("vision encoder embedding width must be positive");
  if (input_.channels < 1 || input_.height < 1 || input_.width < 1) throw ConfigError("image extents must be positive");
  Index in_c = input_.channels;
  Index in_h = input_.height;
  Index in_w = input_.width;
  for (std::size_t l = 0; l < stages_.size(); ++l) {
    const StageShape& s = stages_[l];
    const std::string where = "stage " + std::to_string(l);
    if (s.width < 1 || s.height < 1 || s.channels < 1) throw ConfigError(where + ": extents must be positive");
    if (s.height > in_h || s.width > in_w) throw ConfigError(where + ": spatial extent may not grow");
    if (in_h % s.height != 0 || in_w % s.width != 0) {
      throw ConfigError(where + ": spatial extent must divide the previous one");
    }
    Rng rng(derive_seed(seed, "vision.stage", l));
    mix_.push_back(normal_tensor({s.channels, in_c}, std::sqrt(2.0 / static_cast<double>(in_c)), rng));
    bias_.push_back(normal_tensor({s.channels}, 0.1, rng));
    in_c = s.channels;
    in_h = s.height;
    in_w = s.width;
  }
  const Index flat = in_c * in_h * in_w;
  Rng head_rng(derive_seed(seed, "vision.head"));
  head_ = normal_tensor({flat, embed_width}, 1.0 / std::sqrt(static_cast<double>(flat)), head_rng);
}

Index FrozenVisionEncoder::pooled_width() const {
  Index total = 0;
  for (const StageShape& s : stages_) total += s.channels;
  return total;
}

std::vector<const Tensor*> FrozenVisionEncoder::weights() const {
  std::vector<const Tensor*> out;
  for (std::size_t l = 0; l < mix_.size(); ++l) {
    out.push_back(&mix_[l]);
    out.push_back(&bias_[l]);
  }
  out.push_back(&head_);
  return out;
}

FrozenVisionEncoder::Output FrozenVisionEncoder::forward(const Tensor& image) const {
  if (image.shape() != input_.shape()) {
    throw DimensionError("vision encoder expects " + to_string(input_.shape()) + ", got " + to_string(image.shape()));
  }
  Output out;
  // current: [C, H*W]
  RowMatrix current = ConstMatrixMap(image.data().data(), input_.channels, input_.height * input_.width);
  Index h = input_.height;
  Index w = input_.width;
  for (std::size_t l = 0; l < stages_.size(); ++l) {
    const StageShape& s = stages_[l];
    const Index fh = h / s.height;
    const Index fw = w / s.width;
    RowMatrix pooled = RowMatrix::Zero(current.rows(), s.height * s.width);
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        pooled.col((y / fh) * s.width + x / fw) += current.col(y * w + x);
      }
    }
    pooled /= static_cast<double>(fh * fw);
    RowMatrix mixed = mix_[l].matrix() * pooled;
    mixed.colwise() += bias_[l].data();
    current = mixed.cwiseMax(0.0);
    h = s.height;
    w = s.width;
    Tensor fmap({s.channels, s.height, s.width});
    MatrixMap(fmap.data().data(), s.channels, s.height * s.width) = current;
    out.features.push_back(std::move(fmap));
  }
  const Tensor& last = out.features.back();
  Tensor embed({embed_width_});
  embed.matrix().noalias() = last.data().transpose() * head_.matrix();
  out.embedding = l2_normalize(embed).value;
  return out;
}

Tensor gap_multiscale(std::span<const Tensor> features) {
  if (features.empty()) throw InputError("gap_multiscale: need at least one feature map");
  Index total = 0;
  for (const Tensor& f : features) {
    if (f.rank() != 3) throw DimensionError("gap_multiscale: feature maps must be [C,H,W], got " + to_string(f.shape()));
    total += f.dim(0);
  }
  Tensor out({total});
  Index offset = 0;
  for (const Tensor& f : features) {
    const Index c = f.dim(0);
    const ConstMatrixMap m(f.data().data(), c, f.dim(1) * f.dim(2));
    out.data().segment(offset, c) = m.rowwise().mean();
    offset += c;
  }
  return out;
}

RunningStyle::RunningStyle(Index width, double momentum) : momentum_(momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("style momentum must lie in [0, 1)");
  if (width > 0) value_ = Tensor({width});
}

void RunningStyle::update(const Tensor& batch_mean) {
  if (value_.size() == 0) value_ = Tensor(batch_mean.shape());
  if (batch_mean.shape() != value_.shape()) {
    throw DimensionError("running style " + to_string(value_.shape()) + " vs batch " + to_string(batch_mean.shape()));
  }
  value_.data() = momentum_ * value_.data() + (1.0 - momentum_) * batch_mean.data();
  ++updates_;
}

void RunningStyle::restore(Tensor value, Index updates) {
  value_ = std::move(value);
  updates_ = updates;
}

Tensor batch_style_stats(std::span<const Tensor> pooled) {
  if (pooled.empty()) throw InputError("batch_style_stats: empty batch");
  Tensor out(pooled[0].shape());
  for (const Tensor& p : pooled) {
    if (p.shape() != out.shape()) throw DimensionError("batch_style_stats: inconsistent pooled widths");
    out.data() += p.data();
  }
  out.data() /= static_cast<double>(pooled.size());
  return out;
}

Tensor batch_style_stats(std::span<const std::vector<Tensor>> batch_features, StyleMode mode,
                         const RunningStyle* running) {
  if (mode == StyleMode::running) {
    if (running == nullptr || running->value().size() == 0) {
      throw InputError("batch_style_stats: running mode needs an initialized tracker");
    }
    return running->value();
  }
  if (batch_features.empty()) throw InputError("batch_style_stats: empty batch");
  std::vector<Tensor> pooled;
  pooled.reserve(batch_features.size());
  for (const auto& feats : batch_features) pooled.push_back(gap_multiscale(feats));
  return batch_style_stats(pooled);
}

}  // namespace fedcsap
