#include <gtest/gtest.h>

#include <numeric>

#include "gen.hpp"
#include "toy.hpp"
#include "vitscope/gradcheck.hpp"
#include "vitscope/ops.hpp"
#include "vitscope/vit.hpp"

namespace vitscope {
namespace {

using testing::for_all;
using testing::Gen;
using testing::tiny_config;

Tensor images(Gen& g, const ViTConfig& c, std::size_t n) {
  return g.tensor({n, c.channels, c.image_size, c.image_size}, 0.0, 1.0);
}

TEST(ViTConfig, ToyDefaults) {
  const ViTConfig c;
  EXPECT_EQ(c.image_size, 16u);
  EXPECT_EQ(c.patch_size, 4u);
  EXPECT_EQ(c.n_blocks, 4u);
  EXPECT_EQ(c.d_model, 32u);
  EXPECT_EQ(c.head_dim(), 8u);
  EXPECT_EQ(c.tokens(), 16u);
  EXPECT_EQ(c.seq_len(), 17u);
}

TEST(ViTConfig, RejectsIndivisibleSizes) {
  ViTConfig c;
  c.patch_size = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ViTConfig{};
  c.n_heads = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(InitParams, DeterministicForSeed) {
  const auto c = tiny_config();
  EXPECT_TRUE(testing::params_equal(init_params(c, 3), init_params(c, 3)));
  EXPECT_FALSE(testing::params_equal(init_params(c, 3), init_params(c, 4)));
}

TEST(InitParams, ShapesAndZeroMeanPositional) {
  const ViTConfig c;
  const ModelParams p = init_params(c, 1);
  EXPECT_EQ(p.head_weight.shape(), (Shape{c.n_classes, c.d_model}));
  EXPECT_EQ(p.patch_weight.shape(), (Shape{c.d_model, c.patch_dim()}));
  EXPECT_EQ(p.positional.shape(), (Shape{c.seq_len(), c.d_model}));
  for (std::size_t j = 0; j < c.d_model; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < c.seq_len(); ++i) mu += p.positional.data()[i * c.d_model + j];
    EXPECT_NEAR(mu, 0.0, 1e-15);
  }
  for (double b : p.blocks[0].mlp_out_bias.data()) EXPECT_EQ(b, 0.0);
}

TEST(InitParams, CopiesAreDeep) {
  ModelParams a = init_params(tiny_config(), 1);
  ModelParams b = a;
  b.head_weight.mutable_data()[0] += 1.0;
  EXPECT_NE(a.head_weight.data()[0], b.head_weight.data()[0]);
}

TEST(ResidualWriters, StableOrderAndShapes) {
  const auto c = tiny_config();
  const auto w = residual_writers(init_params(c, 1));
  ASSERT_EQ(w.size(), 1 + 2 * c.n_blocks);
  EXPECT_EQ(w[0].name, "patch_embed.weight");
  EXPECT_EQ(w[1].name, "blocks.0.attn.out.weight");
  EXPECT_EQ(w[2].name, "blocks.0.mlp.out.weight");
  for (const auto& t : w) EXPECT_EQ(t.tensor.dim(0), c.d_model) << t.name;
}

TEST(Patchify, EightByEightGivesFourTokens) {
  ViTConfig c = tiny_config();
  c.channels = 2;
  Gen g(1);
  Tape tape;
  const Tensor tokens = patchify(tape, images(g, c, 1), 4);
  EXPECT_EQ(tokens.shape(), (Shape{1, 4, 16 * 2}));
}

TEST(Patchify, RowIsRasterPatchFlattening) {
  std::vector<double> px(64);
  std::iota(px.begin(), px.end(), 0.0);
  Tape tape;
  const Tensor tokens = patchify(tape, Tensor::from({1, 1, 8, 8}, px), 4);
  // Patch 1 is the top-right block: rows 0..3, columns 4..7.
  const auto row = tokens.data().subspan(16, 16);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t col = 0; col < 4; ++col) EXPECT_EQ(row[r * 4 + col], r * 8 + 4 + col);
  }
}

TEST(Patchify, ConstantImageGivesEqualRows) {
  Tape tape;
  const Tensor tokens = patchify(tape, Tensor::full({1, 1, 8, 8}, 0.25), 4);
  for (double v : tokens.data()) EXPECT_EQ(v, 0.25);
}

TEST(Patchify, UnpatchifyRoundTripsExactly) {
  for_all(10, 21, [](Gen& g) {
    ViTConfig c = tiny_config();
    c.channels = g.index(1, 3);
    const Tensor img = images(g, c, 1);
    Tape tape;
    const Tensor tokens = patchify(tape, img, c.patch_size);
    const Tensor back = unpatchify(tokens.reshaped({c.tokens(), c.patch_dim()}), c.channels,
                                   c.image_size, c.patch_size);
    EXPECT_TRUE(testing::bit_equal(back.data(), img.data()));
  });
}

TEST(Patchify, RejectsIndivisibleImage) {
  Tape tape;
  EXPECT_THROW(patchify(tape, Tensor::zeros({1, 1, 6, 6}), 4), ShapeError);
}

TEST(Forward, ZeroInterventionIsBitwiseNoOp) {
  const auto c = tiny_config();
  const ModelParams p = init_params(c, 2);
  Gen g(2);
  const Tensor x = images(g, c, 3);
  for (auto mode : {SteeringMode::cls, SteeringMode::all_tokens}) {
    for (std::size_t layer = 0; layer <= c.n_blocks; ++layer) {
      SteeringHook hook;
      hook.mode = mode;
      hook.layer = layer;
      hook.vector.assign(mode == SteeringMode::cls ? c.d_model : c.seq_len() * c.d_model, 0.0);
      Tape t1(Tape::Mode::inference), t2(Tape::Mode::inference);
      EXPECT_TRUE(testing::bit_equal(forward(t1, p, x).data(), forward(t2, p, x, &hook).data()));
    }
  }
}

TEST(Forward, IdenticalImagesGiveIdenticalRows) {
  const auto c = tiny_config();
  const ModelParams p = init_params(c, 2);
  Gen g(3);
  const Tensor one = images(g, c, 1);
  std::vector<double> rep;
  for (int i = 0; i < 3; ++i) rep.insert(rep.end(), one.data().begin(), one.data().end());
  Tape tape(Tape::Mode::inference);
  const Tensor logits = forward(tape, p, Tensor::from({3, 1, 8, 8}, rep));
  for (std::size_t i = 1; i < 3; ++i) {
    for (std::size_t k = 0; k < c.n_classes; ++k) {
      EXPECT_EQ(logits.data()[i * c.n_classes + k], logits.data()[k]);
    }
  }
}

TEST(Forward, LastTapFeedsTheHead) {
  const auto c = tiny_config();
  const ModelParams p = init_params(c, 4);
  Gen g(4);
  const Tensor x = images(g, c, 5);
  Tape tape(Tape::Mode::inference);
  const auto taps = all_taps(c);
  const auto out = forward_with_taps(tape, p, x, taps);
  ASSERT_EQ(out.acts.layers.size(), c.n_taps());
  std::vector<double> cls;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto row = out.acts.cls(c.n_blocks, i);
    cls.insert(cls.end(), row.begin(), row.end());
  }
  const Tensor again = head_from_cls(tape, p, Tensor::from({5, c.d_model}, cls));
  EXPECT_LE(testing::max_abs_diff(again.data(), out.logits.data()), 1e-10);
}

TEST(Forward, TapZeroIsEmbeddingWithConstantClsRow) {
  const auto c = tiny_config();
  const ModelParams p = init_params(c, 4);
  Gen g(5);
  Tape tape(Tape::Mode::inference);
  const std::vector<std::size_t> taps{0};
  const auto out = forward_with_taps(tape, p, images(g, c, 2), taps);
  for (std::size_t j = 0; j < c.d_model; ++j) {
    const double want = p.cls_token.data()[j] + p.positional.data()[j];
    EXPECT_EQ(out.acts.cls(0, 0)[j], want);
    EXPECT_EQ(out.acts.cls(0, 1)[j], want);
  }
}

TEST(Forward, RejectsBadTapsAndHooks) {
  const auto c = tiny_config();
  const ModelParams p = init_params(c, 4);
  Gen g(6);
  const Tensor x = images(g, c, 1);
  Tape tape(Tape::Mode::inference);
  const std::vector<std::size_t> bad{c.n_blocks + 1};
  EXPECT_THROW(forward_with_taps(tape, p, x, bad), std::out_of_range);
  SteeringHook hook;
  hook.vector.assign(c.d_model + 1, 0.0);
  EXPECT_THROW(forward(tape, p, x, &hook), ShapeError);
  hook.mode = SteeringMode::all_tokens;
  hook.vector.assign(c.d_model, 0.0);
  EXPECT_THROW(forward(tape, p, x, &hook), ShapeError);
  EXPECT_THROW(forward(tape, p, Tensor::zeros({1, 1, 16, 16})), ShapeError);
}

TEST(Forward, HookIsLinearAtInjectionLayer) {
  const auto c = tiny_config();
  const ModelParams p = init_params(c, 7);
  for_all(6, 22, [&](Gen& g) {
    const Tensor x = images(g, c, 2);
    const std::size_t layer = g.index(0, c.n_blocks);
    const auto mode = g.coin() ? SteeringMode::cls : SteeringMode::all_tokens;
    const std::size_t n = mode == SteeringMode::cls ? c.d_model : c.seq_len() * c.d_model;
    const auto v = g.values(n), w = g.values(n);
    std::vector<double> vw(n);
    for (std::size_t i = 0; i < n; ++i) vw[i] = v[i] + w[i];
    const std::vector<std::size_t> taps{layer};
    auto act = [&](const std::vector<double>& vec) {
      SteeringHook h;
      h.layer = layer;
      h.mode = mode;
      h.vector = vec;
      Tape tape(Tape::Mode::inference);
      return forward_with_taps(tape, p, x, taps, &h).acts.at(layer).clone();
    };
    const Tensor a0 = act(std::vector<double>(n, 0.0));
    const Tensor av = act(v), aw = act(w), avw = act(vw);
    for (std::size_t i = 0; i < a0.numel(); ++i) {
      EXPECT_NEAR(avw.data()[i], av.data()[i] + aw.data()[i] - a0.data()[i], 1e-12);
    }
  });
}

TEST(Forward, BatchPermutationPermutesLogits) {
  const auto c = tiny_config();
  const ModelParams p = init_params(c, 8);
  Gen g(8);
  const Tensor x = images(g, c, 4);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tape tape(Tape::Mode::inference);
  const Tensor a = forward(tape, p, x);
  const Tensor b = forward(tape, p, gather_rows(x, perm));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < c.n_classes; ++k) {
      EXPECT_EQ(b.data()[i * c.n_classes + k], a.data()[perm[i] * c.n_classes + k]);
    }
  }
}

TEST(Forward, PredictLogitsMatchesForwardAcrossChunks) {
  const auto c = tiny_config();
  const ModelParams p = init_params(c, 9);
  Gen g(9);
  const Tensor x = images(g, c, 7);
  Tape tape(Tape::Mode::inference);
  const Tensor a = forward(tape, p, x);
  const Tensor b = predict_logits(p, x, nullptr, 3);
  EXPECT_LE(testing::max_abs_diff(a.data(), b.data()), 1e-12);
}

TEST(Gradients, InputGradientMatchesFiniteDifferences) {
  const auto c = tiny_config();
  const ModelParams p = init_params(c, 10);
  Gen g(10);
  const Tensor x = g.tensor({2, 1, 8, 8}, 0.1, 0.9);
  const std::vector<int> labels{1, 2};
  const double err = finite_diff_check(
      [&](Tape& t, const Tensor& in) { return ops::cross_entropy(t, forward(t, p, in), labels); },
      x, 1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(Gradients, WeightGradientMatchesFiniteDifferences) {
  const auto c = tiny_config();
  const ModelParams base = init_params(c, 11);
  Gen g(11);
  const Tensor x = images(g, c, 2);
  const std::vector<int> labels{0, 1};
  const double err = finite_diff_check(
      [&](Tape& t, const Tensor& w) {
        ModelParams p = base;
        p.blocks[1].mlp_in_weight = w;
        return ops::cross_entropy(t, forward(t, p, x), labels);
      },
      base.blocks[1].mlp_in_weight, 1e-5);
  EXPECT_LT(err, 1e-4);
}

}  // namespace
}  // namespace vitscope
