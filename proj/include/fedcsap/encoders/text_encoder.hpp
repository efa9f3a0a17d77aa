#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedcsap/numerics/tape.hpp"

namespace fedcsap {

/// Records class names passed to a text encoder while armed.
class NameAudit {
 public:
  void arm(bool on);
  void record(std::span<const std::string> names);
  std::set<std::string> names() const;

 private:
  mutable std::mutex mutex_;
  std::set<std::string> names_;
  bool armed_ = false;
};

/// Frozen stand-in for the vision-language text tower.
///
/// Class names are tokenized (lowercase, split on anything that is not a
/// letter or digit), each token is padded as "#tok#" and its character
/// trigrams are hashed into a fixed bag of bins. Each token's bag is projected
/// to R^d and normalized, so every token weighs the same in the name. Prompt
/// sequences of m context tokens plus one class token are mixed by a fixed
/// linear map from R^{(m+1)d} to R^d. All weights come from the seed and
/// never receive gradients.
class FrozenTextEncoder {
 public:
  static constexpr Index kHashBins = 4096;

  FrozenTextEncoder(Index width, Index prompt_length, std::uint64_t seed);

  Index width() const { return width_; }
  Index prompt_length() const { return prompt_length_; }

  /// One L2-normalized row per name; each row depends only on (seed, name).
  Tensor embed_class_names(std::span<const std::string> names) const;

  /// tokens: [(m+1) x d] -> L2-normalized [d].
  Var encode_prompt_sequence(Tape& tape, Var tokens) const;
  /// Batched form: each row of sequences [N x (m+1)d] is one flattened prompt
  /// sequence. Returns L2-normalized [N x d].
  Var encode_prompt_batch(Tape& tape, Var sequences) const;

  static std::vector<std::string> tokenize(std::string_view text);
  static std::vector<Index> trigram_bins(std::string_view token);

  const Tensor& vocab_projection() const { return vocab_; }
  const Tensor& sequence_mixer() const { return mixer_; }

  void set_audit(std::shared_ptr<NameAudit> audit) { audit_ = std::move(audit); }

 private:
  Index width_;
  Index prompt_length_;
  Tensor vocab_;  // [bins x d]
  Tensor mixer_;  // [(m+1)d x d]
  std::shared_ptr<NameAudit> audit_;
};

}  // namespace fedcsap
