#include <cmath>
#include <memory>
#include <numeric>

#include <gtest/gtest.h>

#include "fedcsap/fedruntime/model.hpp"
#include "fedcsap/injection/injection_block.hpp"
#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/ops.hpp"
#include "test_support.hpp"

namespace fedcsap {
namespace {

using testing::random_tensor;

InjectionConfig small_config(Index q = 2) {
  InjectionConfig cfg;
  cfg.width = 8;
  cfg.content_width = 8;
  cfg.se_layers = q;
  cfg.reduction = 4;
  cfg.tokens = 3;
  cfg.init_std = 0.3;
  return cfg;
}

ParameterStore init_phi(const InjectionBlock& block, std::uint64_t seed) {
  ParameterStore phi;
  Rng rng(seed);
  block.register_parameters(phi, rng);
  return phi;
}

void zero_prefix(ParameterStore& store, const std::string& prefix) {
  for (auto& e : store) {
    if (e.name.rfind(prefix, 0) == 0) e.value.data().setZero();
  }
}

Tensor se(const InjectionBlock& block, ParameterStore& phi, const Tensor& x) {
  Tape tape;
  return block.se_forward(tape, tape.constant(x), phi, false).value();
}

TEST(FusedInput, LayoutAndLength) {
  Rng rng(1);
  const Tensor T = random_tensor({5, 8}, rng);
  const Tensor content = random_tensor({6}, rng);
  const Tensor style = random_tensor({6}, rng);
  const Tensor fused = build_fused_input(T, content, style);
  ASSERT_EQ(fused.shape(), (Shape{8 + 2 * 6}));
  const Vector mean = T.matrix().colwise().mean().transpose();
  EXPECT_EQ(Vector(fused.data().head(8)), mean);
  EXPECT_EQ(Vector(fused.data().segment(8, 6)), content.data());
  EXPECT_EQ(Vector(fused.data().tail(6)), style.data());
  EXPECT_EQ(small_config().fused_width(), 8 + 2 * 8);
}

TEST(FusedInput, ZeroVisualsKeepOnlyText) {
  Rng rng(2);
  const Tensor T = random_tensor({3, 4}, rng);
  const Tensor fused = build_fused_input(T, Tensor::zeros({5}), Tensor::zeros({5}));
  EXPECT_EQ(Vector(fused.data().head(4)), Vector(T.matrix().colwise().mean().transpose()));
  EXPECT_EQ(fused.data().tail(10).cwiseAbs().maxCoeff(), 0.0);
}

TEST(FusedInput, PropertyClassOrderInvariance) {
  Rng rng(3);
  for (int c = 0; c < 100; ++c) {
    const Index n = testing::uniform_index(rng, 1, 7);
    const Tensor T = random_tensor({n, 6}, rng);
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor shuffled({n, 6});
    for (Index i = 0; i < n; ++i) shuffled.matrix().row(i) = T.matrix().row(perm[static_cast<std::size_t>(i)]);
    const Tensor content = random_tensor({3}, rng);
    const Tensor a = build_fused_input(T, content, content);
    const Tensor b = build_fused_input(shuffled, content, content);
    EXPECT_LT((a.data() - b.data()).cwiseAbs().maxCoeff(), 1e-14) << "case " << c;
  }
}

TEST(FusedInput, ShapeErrors) {
  EXPECT_THROW(build_fused_input(Tensor({4}), Tensor({2}), Tensor({2})), DimensionError);
  EXPECT_THROW(build_fused_input(Tensor({2, 4}), Tensor({2}), Tensor({3})), DimensionError);
}

TEST(SeGating, PropertyZeroWeightsScaleByOnePointFivePerLayer) {
  Rng rng(4);
  for (int c = 0; c < 100; ++c) {
    const Index q = testing::uniform_index(rng, 1, 4);
    const InjectionBlock block(small_config(q));
    ParameterStore phi = init_phi(block, 1);
    zero_prefix(phi, InjectionBlock::kPrefix + "se.");
    const Tensor x = random_tensor({block.config().fused_width()}, rng, 2.0);
    // A zero gate pre-activation gives sigmoid(0) = 1/2, so each layer maps
    // O to 1.5 * O; iterate in the same order so rounding matches exactly.
    Vector expected = x.data();
    for (Index l = 0; l < q; ++l) expected = expected * 0.5 + expected;
    EXPECT_EQ(se(block, phi, x).data(), expected) << "case " << c;
    EXPECT_LT((expected - std::pow(1.5, static_cast<double>(q)) * x.data()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(SeGating, ZeroInputGivesZero) {
  const InjectionBlock block(small_config());
  ParameterStore phi = init_phi(block, 5);
  const Tensor out = se(block, phi, Tensor::zeros({block.config().fused_width()}));
  EXPECT_EQ(out.data().cwiseAbs().maxCoeff(), 0.0);
}

TEST(SeGating, PropertySignPreservedMagnitudeBounded) {
  Rng rng(6);
  for (int c = 0; c < 100; ++c) {
    const Index q = testing::uniform_index(rng, 1, 3);
    const InjectionBlock block(small_config(q));
    ParameterStore phi = init_phi(block, rng());
    const Tensor x = random_tensor({block.config().fused_width()}, rng, 3.0);
    const Tensor y = se(block, phi, x);
    // Every gate lies in (0, 1), so each layer scales each entry by (1, 2).
    const double upper = std::pow(2.0, static_cast<double>(q));
    for (Index i = 0; i < x.size(); ++i) {
      if (x[i] == 0.0) continue;
      EXPECT_GT(y[i] * x[i], 0.0) << "case " << c;
      EXPECT_GE(std::abs(y[i]), std::abs(x[i]));
      EXPECT_LE(std::abs(y[i]), upper * std::abs(x[i]));
    }
  }
}

TEST(SeGating, BatchedRowsMatchSingle) {
  const InjectionBlock block(small_config());
  ParameterStore phi = init_phi(block, 7);
  Rng rng(7);
  const Index D = block.config().fused_width();
  const Tensor xs = random_tensor({3, D}, rng);
  const Tensor batched = se(block, phi, xs);
  for (Index b = 0; b < 3; ++b) {
    Tensor row({D});
    row.data() = xs.matrix().row(b).transpose();
    const Vector single = se(block, phi, row).data();
    EXPECT_LT((Vector(batched.matrix().row(b).transpose()) - single).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(SeGating, WrongWidthIsDimensionError) {
  const InjectionBlock block(small_config());
  ParameterStore phi = init_phi(block, 1);
  Tape tape;
  EXPECT_THROW(block.se_forward(tape, tape.constant(Tensor({7})), phi), DimensionError);
}

TEST(VisualTokens, ShapeAndZeroMap) {
  const InjectionBlock block(small_config());
  ParameterStore phi = init_phi(block, 8);
  const Index D = block.config().fused_width();
  Tape tape;
  const Tensor v = block.project_visual_tokens(tape, tape.constant(Tensor::zeros({D})), phi, false).value();
  ASSERT_EQ(v.shape(), (Shape{3, 8}));
  // Biases start at zero, so a zero input maps to zero tokens.
  EXPECT_EQ(v.data().cwiseAbs().maxCoeff(), 0.0);
  Rng rng(8);
  const Tensor batch = block.project_visual_tokens(tape, tape.constant(random_tensor({2, D}, rng)), phi, false).value();
  EXPECT_EQ(batch.shape(), (Shape{2, 3 * 8}));
}

TEST(VisualTokens, HeadsAreDistinct) {
  const InjectionBlock block(small_config());
  ParameterStore phi = init_phi(block, 9);
  Rng rng(9);
  Tape tape;
  const Tensor v =
      block.project_visual_tokens(tape, tape.constant(random_tensor({block.config().fused_width()}, rng)), phi, false)
          .value();
  for (Index a = 0; a < 3; ++a) {
    for (Index b = a + 1; b < 3; ++b) EXPECT_GT((v.matrix().row(a) - v.matrix().row(b)).norm(), 1e-3);
  }
}

TEST(InjectAndAssemble, ZeroVisualTokensLeavePrompts) {
  Rng rng(10);
  const Tensor P = random_tensor({3, 8}, rng);
  const Tensor T = random_tensor({4, 8}, rng);
  Tape tape;
  const std::vector<Var> seqs = inject_and_assemble(tape.constant(P), tape.constant(Tensor::zeros({3, 8})), tape.constant(T));
  ASSERT_EQ(seqs.size(), 4u);
  for (Index j = 0; j < 4; ++j) {
    const Tensor& s = seqs[static_cast<std::size_t>(j)].value();
    ASSERT_EQ(s.shape(), (Shape{4, 8}));
    EXPECT_TRUE(s.matrix().topRows(3) == P.matrix());
    EXPECT_TRUE(s.matrix().row(3) == T.matrix().row(j));
  }
  // Sequences for different classes differ only in the last row.
  EXPECT_TRUE(seqs[0].value().matrix().topRows(3) == seqs[1].value().matrix().topRows(3));
}

TEST(InjectAndAssemble, AddsVisualTokens) {
  Rng rng(11);
  const Tensor P = random_tensor({3, 8}, rng);
  const Tensor V = random_tensor({3, 8}, rng);
  const Tensor T = random_tensor({2, 8}, rng);
  Tape tape;
  const std::vector<Var> seqs = inject_and_assemble(tape.constant(P), tape.constant(V), tape.constant(T));
  const RowMatrix expected = P.matrix() + V.matrix();
  for (const Var& s : seqs) EXPECT_TRUE(s.value().matrix().topRows(3) == expected);
  EXPECT_THROW(inject_and_assemble(tape.constant(P), tape.constant(Tensor({2, 8})), tape.constant(T)), DimensionError);
  EXPECT_THROW(inject_and_assemble(tape.constant(P), tape.constant(V), tape.constant(Tensor({2, 5}))), DimensionError);
}

TEST(InjectAndAssemble, BatchLayoutMatchesPerImageAssembly) {
  Rng rng(12);
  const Index B = 3, n = 4, m = 2, d = 5;
  const Tensor cp = random_tensor({B, m * d}, rng);
  const Tensor T = random_tensor({n, d}, rng);
  Tape tape;
  const Tensor batch = assemble_prompt_batch(tape.constant(cp), tape.constant(T)).value();
  ASSERT_EQ(batch.shape(), (Shape{B * n, (m + 1) * d}));
  for (Index b = 0; b < B; ++b) {
    Tensor c({m, d});
    c.data() = cp.matrix().row(b).transpose();
    const std::vector<Var> seqs =
        inject_and_assemble(tape.constant(c), tape.constant(Tensor::zeros({m, d})), tape.constant(T));
    for (Index j = 0; j < n; ++j) {
      const Vector flat = seqs[static_cast<std::size_t>(j)].value().data();
      EXPECT_EQ(Vector(batch.matrix().row(b * n + j).transpose()), flat);
    }
  }
}

TEST(InjectionBlock, GradientMatchesFiniteDifferences) {
  InjectionConfig cfg = small_config(2);
  cfg.width = 8;
  cfg.content_width = 8;  // D = 24
  const InjectionBlock block(cfg);
  ParameterStore phi = init_phi(block, 13);
  Rng rng(13);
  const Tensor x = random_tensor({2, 24}, rng);
  const Tensor w = random_tensor({2, 3 * 8}, rng);
  auto loss = [&](Tape& tape) {
    Var o = block.se_forward(tape, tape.constant(x), phi, true);
    return sum(block.project_visual_tokens(tape, o, phi, true) * tape.constant(w));
  };
  EXPECT_LT(testing::store_grad_error(loss, {&phi}), 1e-4);
}

TEST(InjectionBlock, ParameterNamesAndValidation) {
  const InjectionBlock block(small_config());
  const ParameterStore phi = init_phi(block, 1);
  EXPECT_EQ(phi.size(), 2u * 2u + 2u * 3u);
  for (const auto& e : phi) EXPECT_EQ(e.name.rfind(InjectionBlock::kPrefix, 0), 0u) << e.name;
  EXPECT_EQ(phi.at(InjectionBlock::kPrefix + "se.0.w1").shape(), (Shape{24, 6}));
  InjectionConfig bad = small_config();
  bad.se_layers = 0;
  EXPECT_THROW(InjectionBlock{bad}, ConfigError);
  bad = small_config();
  bad.reduction = 0;
  EXPECT_THROW(InjectionBlock{bad}, ConfigError);
}

ModelConfig tiny_model(bool disable) {
  ModelConfig cfg;
  cfg.width = 8;
  cfg.prompt_length = 2;
  cfg.heads = 2;
  cfg.image = {2, 4, 4};
  cfg.stages = {{4, 4, 2}, {2, 2, 4}};
  cfg.init_std = 0.3;
  cfg.disable_injection = disable;
  return cfg;
}

BatchFeatures random_batch(const ModelConfig& cfg, Rng& rng) {
  BatchFeatures b;
  b.image_embeds = random_tensor({3, cfg.width}, rng);
  b.image_embeds.matrix().rowwise().normalize();
  b.content = random_tensor({3, cfg.content_width()}, rng);
  b.style = random_tensor({3, cfg.content_width()}, rng);
  b.class_embeds = random_tensor({4, cfg.width}, rng);
  b.labels = {0, 2, 3};
  return b;
}

TEST(InjectionInModel, DisabledMatchesZeroVisualTokensBitwise) {
  auto encoders = std::make_shared<const FrozenEncoders>(tiny_model(false), 3);
  const FedCsapModel on(tiny_model(false), encoders);
  const FedCsapModel off(tiny_model(true), encoders);
  ModelParams with_zero_v = on.init_params(4);
  zero_prefix(with_zero_v.phi, InjectionBlock::kPrefix + "token_head.");
  ModelParams disabled = off.init_params(4);
  EXPECT_TRUE(disabled.phi.frozen());
  EXPECT_TRUE(disabled.theta.identical(with_zero_v.theta));
  Rng rng(5);
  const BatchFeatures batch = random_batch(on.config(), rng);
  Tape t1, t2;
  const Tensor a = on.score(t1, with_zero_v, batch, 0.05, false).logits.value();
  const Tensor b = off.score(t2, disabled, batch, 0.05, false).logits.value();
  EXPECT_TRUE(a.identical(b));
}

TEST(InjectionInModel, VisualTokensDependOnStyle) {
  auto encoders = std::make_shared<const FrozenEncoders>(tiny_model(false), 3);
  const FedCsapModel model(tiny_model(false), encoders);
  ModelParams params = model.init_params(6);
  Rng rng(6);
  BatchFeatures batch = random_batch(model.config(), rng);
  Tape t1;
  const Tensor before = model.score(t1, params, batch, 0.05, false).c_prime.value();
  batch.style.data() *= 2.0;
  Tape t2;
  const Tensor after = model.score(t2, params, batch, 0.05, false).c_prime.value();
  EXPECT_GT((before.data() - after.data()).cwiseAbs().maxCoeff(), 1e-6);
}

}  // namespace
}  // namespace fedcsap
