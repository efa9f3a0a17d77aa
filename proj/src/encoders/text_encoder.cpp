#include "fedcsap/encoders/text_encoder.hpp"

#include <cctype>
#include <cmath>

#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/ops.hpp"
#include "fedcsap/numerics/random.hpp"

namespace fedcsap {

void NameAudit::arm(bool on) {
  std::lock_guard lock(mutex_);
  armed_ = on;
}

void NameAudit::record(std::span<const std::string> names) {
  std::lock_guard lock(mutex_);
  if (!armed_) return;
  names_.insert(names.begin(), names.end());
}

std::set<std::string> NameAudit::names() const {
  std::lock_guard lock(mutex_);
  return names_;
}

FrozenTextEncoder::FrozenTextEncoder(Index width, Index prompt_length, std::uint64_t seed)
    : width_(width), prompt_length_(prompt_length) {
  if (width < 1 || prompt_length < 1) throw ConfigError("text encoder needs width >= 1 and prompt length >= 1");
  Rng vocab_rng(derive_seed(seed, "text.vocab"));
  vocab_ = normal_tensor({kHashBins, width}, 1.0, vocab_rng);
  Rng mixer_rng(derive_seed(seed, "text.mixer"));
  const Index fan_in = (prompt_length + 1) * width;
  mixer_ = normal_tensor({fan_in, width}, 1.0 / std::sqrt(static_cast<double>(fan_in)), mixer_rng);
}

std::vector<std::string> FrozenTextEncoder::tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::vector<Index> FrozenTextEncoder::trigram_bins(std::string_view token) {
  const std::string padded = "#" + std::string(token) + "#";
  std::vector<Index> bins;
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    bins.push_back(static_cast<Index>(fnv1a64(std::string_view(padded).substr(i, 3)) % kHashBins));
  }
  return bins;
}

Tensor FrozenTextEncoder::embed_class_names(std::span<const std::string> names) const {
  if (names.empty()) throw InputError("embed_class_names: need at least one class name");
  if (audit_) audit_->record(names);
  const auto n = static_cast<Index>(names.size());
  Tensor out({n, width_});
  MatrixMap rows = out.matrix();
  const ConstMatrixMap vocab = vocab_.matrix();
  for (Index j = 0; j < n; ++j) {
    const std::vector<std::string> tokens = tokenize(names[j]);
    if (tokens.empty()) throw InputError("embed_class_names: class name " + std::to_string(j) + " is empty");
    rows.row(j).setZero();
    for (const std::string& tok : tokens) {
      Eigen::RowVectorXd t = Eigen::RowVectorXd::Zero(width_);
      for (Index bin : trigram_bins(tok)) t += vocab.row(bin);
      rows.row(j) += t / t.norm();
    }
    rows.row(j) /= rows.row(j).norm();
  }
  return out;
}

Var FrozenTextEncoder::encode_prompt_sequence(Tape& tape, Var tokens) const {
  if (tokens.value().shape() != Shape{prompt_length_ + 1, width_}) {
    throw DimensionError("encode_prompt_sequence: expected " + to_string({prompt_length_ + 1, width_}) + " tokens, got " +
                         to_string(tokens.value().shape()));
  }
  Var flat = reshape(tokens, {1, (prompt_length_ + 1) * width_});
  return reshape(encode_prompt_batch(tape, flat), {width_});
}

Var FrozenTextEncoder::encode_prompt_batch(Tape& tape, Var sequences) const {
  const Tensor& s = sequences.value();
  if (s.rank() != 2 || s.dim(1) != (prompt_length_ + 1) * width_) {
    throw DimensionError("encode_prompt_batch: expected [N x " + std::to_string((prompt_length_ + 1) * width_) +
                         "], got " + to_string(s.shape()));
  }
  Var mixer = tape.constant(mixer_);
  return l2_normalize(matmul(sequences, mixer));
}

}  // namespace fedcsap
