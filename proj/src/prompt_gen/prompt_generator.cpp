#include "fedcsap/prompt_gen/prompt_generator.hpp"

#include <cmath>
#include <vector>

#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/ops.hpp"

namespace fedcsap {

const std::string PromptGenerator::kPrefix = "prompt_gen.";

void PromptGenConfig::validate() const {
  if (width < 1) throw ConfigError("model.d: must be positive");
  if (prompt_length < 1) throw ConfigError("model.m: must be positive");
  if (heads < 1 || width % heads != 0) throw ConfigError("model.heads: must divide model.d");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std: must be positive");
}

Var bind(Tape& tape, Tensor& t, bool trainable) {
  return trainable ? tape.parameter(t) : tape.constant(Tensor(t.shape(), t.data()));
}

PromptGenerator::PromptGenerator(PromptGenConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void PromptGenerator::register_parameters(ParameterStore& theta, Rng& rng) const {
  const Index d = cfg_.width;
  const Index ff = cfg_.mlp_width();
  const double s = cfg_.init_std;
  theta.add(kPrefix + "queries", normal_tensor({cfg_.prompt_length, d}, s, rng));
  theta.add(kPrefix + "w_k", normal_tensor({d, d}, s, rng));
  theta.add(kPrefix + "w_v", normal_tensor({d, d}, s, rng));
  theta.add(kPrefix + "w_o", normal_tensor({d, d}, s, rng));
  theta.add(kPrefix + "ln_gamma", Tensor::constant({d}, 1.0));
  theta.add(kPrefix + "ln_beta", Tensor::zeros({d}));
  theta.add(kPrefix + "mlp_w1", normal_tensor({d, ff}, s, rng));
  theta.add(kPrefix + "mlp_b1", Tensor::zeros({ff}));
  theta.add(kPrefix + "mlp_w2", normal_tensor({ff, d}, s, rng));
  theta.add(kPrefix + "mlp_b2", Tensor::zeros({d}));
}

PromptGenerator::Output PromptGenerator::forward(Tape& tape, Var class_embeddings, ParameterStore& theta,
                                                 bool trainable) const {
  const Tensor& T = class_embeddings.value();
  if (T.rank() != 2 || T.dim(1) != cfg_.width) {
    throw DimensionError("prompt generator expects [n x " + std::to_string(cfg_.width) + "] class embeddings, got " +
                         to_string(T.shape()));
  }
  if (T.dim(0) < 1) throw InputError("prompt generator needs at least one class");

  auto param = [&](const char* name) { return bind(tape, theta.at(kPrefix + name), trainable); };
  Var queries = param("queries");
  Var keys = matmul(class_embeddings, param("w_k"));
  Var values = matmul(class_embeddings, param("w_v"));

  const Index dh = cfg_.head_width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(cfg_.heads));
  for (Index h = 0; h < cfg_.heads; ++h) {
    Var qh = slice(queries, 1, h * dh, dh);
    Var kh = slice(keys, 1, h * dh, dh);
    Var vh = slice(values, 1, h * dh, dh);
    Var weights = softmax(scale * matmul(qh, transpose(kh)), 1);
    heads.push_back(matmul(weights, vh));
  }
  Var attention = heads.size() == 1 ? heads.front() : concat(heads, 1);
  Var projected = matmul(attention, param("w_o"));
  Var normed = layer_norm(projected, param("ln_gamma"), param("ln_beta"), cfg_.ln_eps);
  Var hidden = relu(affine(normed, param("mlp_w1"), param("mlp_b1")));
  Var prompts = affine(hidden, param("mlp_w2"), param("mlp_b2"));
  return {attention, prompts};
}

}  // namespace fedcsap
