#include <gtest/gtest.h>

#include <cmath>

#include "gen.hpp"
#include "toy.hpp"
#include "vitscope/directions.hpp"

namespace vitscope {
namespace {

using testing::for_all;
using testing::Gen;

ContrastivePairs random_pairs(Gen& g, const ViTConfig& c, std::size_t n) {
  const Shape s{n, c.channels, c.image_size, c.image_size};
  return {g.tensor(s, 0, 1), g.tensor(s, 0, 1)};
}

// Forward each image on its own, subtract, then average.
std::vector<std::vector<double>> naive_directions(const ModelParams& p,
                                                  const ContrastivePairs& pairs,
                                                  SteeringMode mode) {
  const auto& c = p.config;
  const auto taps = all_taps(c);
  std::vector<std::vector<double>> out(c.n_taps());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    Tape tape(Tape::Mode::inference);
    const auto a = forward_with_taps(tape, p, row_range(pairs.clean, i, i + 1), taps);
    const auto b = forward_with_taps(tape, p, row_range(pairs.triggered, i, i + 1), taps);
    for (std::size_t l = 0; l < c.n_taps(); ++l) {
      const auto va = mode == SteeringMode::cls ? a.acts.cls(l, 0) : a.acts.all_tokens(l, 0);
      const auto vb = mode == SteeringMode::cls ? b.acts.cls(l, 0) : b.acts.all_tokens(l, 0);
      out[l].resize(va.size(), 0.0);
      for (std::size_t j = 0; j < va.size(); ++j) out[l][j] += vb[j] - va[j];
    }
  }
  for (auto& v : out) {
    for (auto& x : v) x /= static_cast<double>(pairs.size());
  }
  return out;
}

TEST(DeriveDirections, MatchesNaiveLoop) {
  const auto c = testing::tiny_config();
  const ModelParams p = init_params(c, 1);
  for_all(4, 31, [&](Gen& g) {
    const auto pairs = random_pairs(g, c, g.index(1, 9));
    for (auto mode : {SteeringMode::cls, SteeringMode::all_tokens}) {
      const DirectionSet d = derive_directions(p, pairs, mode, g.index(1, 4));
      const auto ref = naive_directions(p, pairs, mode);
      ASSERT_EQ(d.layers(), c.n_taps());
      EXPECT_EQ(d.pair_count, pairs.size());
      for (std::size_t l = 0; l < ref.size(); ++l) {
        ASSERT_EQ(d.vectors[l].size(), ref[l].size());
        EXPECT_LE(testing::max_abs_diff(d.vectors[l], ref[l]), 1e-10) << "layer " << l;
      }
    }
  });
}

TEST(DeriveDirections, IdenticalPairsGiveZero) {
  const auto c = testing::tiny_config();
  Gen g(2);
  const Tensor x = g.tensor({3, 1, 8, 8}, 0, 1);
  const DirectionSet d =
      derive_directions(init_params(c, 2), {x, x.clone()}, SteeringMode::all_tokens);
  for (const auto& v : d.vectors) {
    for (double e : v) EXPECT_EQ(e, 0.0);
  }
}

TEST(DeriveDirections, SinglePairIsItsDifference) {
  const auto c = testing::tiny_config();
  const ModelParams p = init_params(c, 3);
  Gen g(3);
  const auto pairs = random_pairs(g, c, 1);
  const DirectionSet d = derive_directions(p, pairs, SteeringMode::cls);
  Tape tape(Tape::Mode::inference);
  const auto taps = all_taps(c);
  const auto a = forward_with_taps(tape, p, pairs.clean, taps);
  const auto b = forward_with_taps(tape, p, pairs.triggered, taps);
  for (std::size_t l = 0; l < c.n_taps(); ++l) {
    for (std::size_t j = 0; j < c.d_model; ++j) {
      EXPECT_EQ(d.vectors[l][j], b.acts.cls(l, 0)[j] - a.acts.cls(l, 0)[j]);
    }
  }
}

TEST(DeriveDirections, ConcatenationIsSizeWeightedAverage) {
  const auto c = testing::tiny_config();
  const ModelParams p = init_params(c, 4);
  for_all(4, 32, [&](Gen& g) {
    const std::size_t n1 = g.index(1, 5), n2 = g.index(1, 5);
    const auto a = random_pairs(g, c, n1), b = random_pairs(g, c, n2);
    std::vector<double> cc(a.clean.data().begin(), a.clean.data().end());
    cc.insert(cc.end(), b.clean.data().begin(), b.clean.data().end());
    std::vector<double> tt(a.triggered.data().begin(), a.triggered.data().end());
    tt.insert(tt.end(), b.triggered.data().begin(), b.triggered.data().end());
    const Shape s{n1 + n2, 1, 8, 8};
    const auto both = derive_directions(p, {Tensor::from(s, cc), Tensor::from(s, tt)},
                                        SteeringMode::all_tokens);
    const auto da = derive_directions(p, a, SteeringMode::all_tokens);
    const auto db = derive_directions(p, b, SteeringMode::all_tokens);
    for (std::size_t l = 0; l < both.layers(); ++l) {
      for (std::size_t j = 0; j < both.vectors[l].size(); ++j) {
        const double w = (n1 * da.vectors[l][j] + n2 * db.vectors[l][j]) / double(n1 + n2);
        EXPECT_NEAR(both.vectors[l][j], w, 1e-10);
      }
    }
  });
}

TEST(DeriveDirections, ClsRowsOfAllTokenVectorsAreExact) {
  const auto c = testing::tiny_config();
  const ModelParams p = init_params(c, 5);
  Gen g(5);
  const auto pairs = random_pairs(g, c, 6);
  const auto all = derive_directions(p, pairs, SteeringMode::all_tokens);
  const auto cls = derive_directions(p, pairs, SteeringMode::cls);
  const auto extracted = cls_directions(all, c.d_model);
  EXPECT_EQ(extracted.mode, SteeringMode::cls);
  for (std::size_t l = 0; l < cls.layers(); ++l) EXPECT_EQ(extracted.vectors[l], cls.vectors[l]);
  EXPECT_THROW(cls_directions(cls, c.d_model), std::invalid_argument);
}

TEST(DeriveDirections, RejectsEmptyOrMismatchedPairs) {
  const auto c = testing::tiny_config();
  const ModelParams p = init_params(c, 6);
  EXPECT_THROW(derive_directions(p, {}, SteeringMode::cls), std::invalid_argument);
  EXPECT_THROW(derive_directions(p, {Tensor::zeros({2, 1, 8, 8}), Tensor::zeros({3, 1, 8, 8})},
                                 SteeringMode::cls),
               ShapeError);
}

TEST(SteeringMode, Names) {
  EXPECT_EQ(steering_mode_from_string("all"), SteeringMode::all_tokens);
  EXPECT_EQ(steering_mode_from_string(to_string(SteeringMode::cls)), SteeringMode::cls);
  EXPECT_THROW(steering_mode_from_string("tokens"), std::invalid_argument);
}

TEST(SelectLayer, WorkedExamples) {
  const std::vector<double> jump{0.1, 0.1, 0.9, 0.95};
  EXPECT_EQ(select_layer(jump), 2u);
  const std::vector<double> flat{0.4, 0.4, 0.4, 0.4};
  EXPECT_EQ(select_layer(flat), 1u);
  const std::vector<double> one{0.1};
  EXPECT_THROW(select_layer(one), std::invalid_argument);
}

TEST(SelectLayer, MatchesBruteForceArgmax) {
  for_all(100, 33, [](Gen& g) {
    std::vector<double> v(g.index(2, 8));
    for (auto& x : v) x = std::round(g.uniform(0, 2) * 4) / 4;  // coarse, so ties occur
    std::size_t best = 1;
    for (std::size_t l = 2; l < v.size(); ++l) {
      if (v[l] - v[l - 1] > v[best] - v[best - 1]) best = l;
    }
    EXPECT_EQ(select_layer(v), best);
  });
}

SteeringSweep fake_sweep(const std::vector<double>& asr, const std::vector<double>& ra) {
  SteeringSweep s;
  s.mode = SteeringMode::cls;
  s.asr_plus = asr;
  s.ra_minus = ra;
  return s;
}

DirectionSet fake_dirs(Gen& g, std::size_t layers, std::size_t d) {
  DirectionSet dirs;
  dirs.mode = SteeringMode::cls;
  for (std::size_t l = 0; l < layers; ++l) dirs.vectors.push_back(g.values(d));
  return dirs;
}

TEST(SelectRHat, UnitNormAndScaleInvariance) {
  for_all(20, 34, [](Gen& g) {
    const auto sweep = fake_sweep(g.values(4, 0, 1), g.values(4, 0, 1));
    const DirectionSet dirs = fake_dirs(g, 5, 8);
    DirectionSet scaled = dirs;
    const double k = g.uniform(0.01, 100);
    for (auto& v : scaled.vectors) {
      for (auto& x : v) x *= k;
    }
    const RHat a = select_rhat(sweep, dirs), b = select_rhat(sweep, scaled);
    EXPECT_GE(a.layer, 1u);
    EXPECT_EQ(a.layer, b.layer);
    double norm = 0.0;
    for (double x : a.direction) norm += x * x;
    EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-12);
    EXPECT_LE(testing::max_abs_diff(a.direction, b.direction), 1e-12);
  });
}

TEST(SelectRHat, ZeroDirectionAtChosenLayerIsAnError) {
  Gen g(35);
  DirectionSet dirs = fake_dirs(g, 4, 4);
  dirs.vectors[2].assign(4, 0.0);
  EXPECT_THROW(select_rhat(fake_sweep({0.1, 0.1, 0.9}, {0, 0, 0}), dirs), std::domain_error);
}

TEST(SelectRHat, RequiresClsMode) {
  Gen g(36);
  DirectionSet dirs = fake_dirs(g, 4, 4);
  dirs.mode = SteeringMode::all_tokens;
  EXPECT_THROW(select_rhat(fake_sweep({0, 0, 1}, {0, 0, 0}), dirs), std::invalid_argument);
}

TEST(SteeringSweep, ZeroScaleReproducesBaseline) {
  const auto& w = testing::tiny_world();
  const auto& d = w.poisoned.dataset;
  const auto dirs = derive_directions(w.params, w.poisoned.pairs, SteeringMode::all_tokens);
  const SteeringSweep s = steering_sweep(w.params, d.clean_test, d.triggered_test, 0, dirs, 0.0);
  ASSERT_EQ(s.layers(), w.config.n_blocks);
  const EvalMetrics base = evaluate(w.params, d.clean_test, d.triggered_test, 0);
  // Spontaneous target rate over clean non-target items.
  const auto preds = argmax_rows(predict_logits(w.params, d.clean_test.images));
  std::size_t n = 0, hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (d.clean_test.labels[i] == 0) continue;
    ++n;
    hits += preds[i] == 0;
  }
  for (std::size_t l = 0; l < s.layers(); ++l) {
    EXPECT_DOUBLE_EQ(s.asr_plus[l], static_cast<double>(hits) / n);
    EXPECT_DOUBLE_EQ(s.ra_minus[l], base.ra);
  }
}

TEST(SteeringSweep, ParallelMatchesSerialAndValuesAreFractions) {
  const auto& w = testing::tiny_world();
  const auto& d = w.poisoned.dataset;
  const auto dirs = derive_directions(w.params, w.poisoned.pairs, SteeringMode::cls);
  const auto a = steering_sweep(w.params, d.clean_test, d.triggered_test, 0, dirs, 3.0, 1);
  const auto b = steering_sweep(w.params, d.clean_test, d.triggered_test, 0, dirs, 3.0, 3);
  EXPECT_EQ(a.asr_plus, b.asr_plus);
  EXPECT_EQ(a.ra_minus, b.ra_minus);
  for (std::size_t l = 0; l < a.layers(); ++l) {
    EXPECT_GE(a.asr_plus[l], 0.0);
    EXPECT_LE(a.asr_plus[l], 1.0);
    EXPECT_GE(a.ra_minus[l], 0.0);
    EXPECT_LE(a.ra_minus[l], 1.0);
  }
}

TEST(SteeringSweep, RejectsShortDirectionSet) {
  const auto& w = testing::tiny_world();
  const auto& d = w.poisoned.dataset;
  DirectionSet dirs;
  dirs.vectors.assign(1, std::vector<double>(w.config.d_model, 0.0));
  EXPECT_THROW(steering_sweep(w.params, d.clean_test, d.triggered_test, 0, dirs),
               std::invalid_argument);
}

}  // namespace
}  // namespace vitscope
