#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

#include "gen.hpp"
#include "toy.hpp"
#include "vitscope/adversarial.hpp"

namespace vitscope {
namespace {

using testing::for_all;
using testing::Gen;

double mean_cross_entropy(const ModelParams& p, const Tensor& x, std::span<const int> labels) {
  const Tensor logits = predict_logits(p, x);
  const std::size_t k = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.data().subspan(i * k, k);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    total += m + std::log(z) - row[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(labels.size());
}

TEST(AdvConfig, Validation) {
  EXPECT_NO_THROW((AdvConfig{0.0, 1, 0.01}.validate()));
  EXPECT_THROW((AdvConfig{-0.1, 1, 0.01}.validate()), std::invalid_argument);
  EXPECT_THROW((AdvConfig{0.1, 0, 0.01}.validate()), std::invalid_argument);
  EXPECT_THROW((AdvConfig{0.1, 1, 0.0}.validate()), std::invalid_argument);
}

TEST(PgdAttack, ZeroEpsilonReturnsInputs) {
  const auto& w = testing::tiny_world();
  const auto& t = w.poisoned.dataset.clean_test;
  const Tensor adv = pgd_attack(w.params, t.images, t.labels, {0.0, 3, 0.05});
  EXPECT_TRUE(testing::bit_equal(adv.data(), t.images.data()));
}

TEST(PgdAttack, StaysInBallAndBox) {
  const auto& w = testing::tiny_world();
  const auto& t = w.poisoned.dataset.clean_test;
  for_all(4, 51, [&](Gen& g) {
    const AdvConfig cfg{g.uniform(0.0, 0.3), g.index(1, 6), g.uniform(0.005, 0.1)};
    const Tensor adv = pgd_attack(w.params, t.images, t.labels, cfg, g.index(1, 32));
    ASSERT_EQ(adv.shape(), t.images.shape());
    const auto a = adv.data(), x = t.images.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
      ASSERT_LE(std::abs(a[i] - x[i]), cfg.epsilon + 1e-12);
      ASSERT_GE(a[i], 0.0);
      ASSERT_LE(a[i], 1.0);
    }
  });
}

TEST(PgdAttack, RaisesLossOfSuppliedLabels) {
  const auto& w = testing::tiny_world();
  const auto& t = w.poisoned.dataset.clean_test;
  const Tensor adv = pgd_attack(w.params, t.images, t.labels, {0.1, 5, 0.03});
  EXPECT_GT(mean_cross_entropy(w.params, adv, t.labels),
            mean_cross_entropy(w.params, t.images, t.labels));
}

TEST(PgdAttack, ChunkingAndThreadsDoNotChangeResult) {
  const auto& w = testing::tiny_world();
  const auto& t = w.poisoned.dataset.clean_test;
  const AdvConfig cfg{0.05, 3, 0.02};
  const Tensor a = pgd_attack(w.params, t.images, t.labels, cfg, 64, 1);
  const Tensor b = pgd_attack(w.params, t.images, t.labels, cfg, 7, 3);
  EXPECT_TRUE(testing::bit_equal(a.data(), b.data()));
}

TEST(PgdAttack, RejectsBadInputs) {
  const auto& w = testing::tiny_world();
  const auto& t = w.poisoned.dataset.clean_test;
  Tensor bad = t.images.clone();
  bad.mutable_data()[0] = 1.5;
  EXPECT_THROW(pgd_attack(w.params, bad, t.labels, {}), std::invalid_argument);
  std::vector<int> short_labels(t.labels.begin(), t.labels.end() - 1);
  EXPECT_THROW(pgd_attack(w.params, t.images, short_labels, {}), ShapeError);
}

TEST(ActivationDiffs, ZeroAntisymmetricAndPerItem) {
  const auto c = testing::tiny_config();
  const ModelParams p = init_params(c, 13);
  Gen g(52);
  const Tensor x = g.tensor({5, 1, 8, 8}, 0, 1), y = g.tensor({5, 1, 8, 8}, 0, 1);

  const auto same = activation_diffs(p, x, x);
  for (const auto& t : same.layers) {
    for (double v : t.data()) EXPECT_EQ(v, 0.0);
  }
  const auto fwd = activation_diffs(p, x, y, 2), bwd = activation_diffs(p, y, x);
  ASSERT_EQ(fwd.n_layers(), c.n_taps());
  const auto taps = all_taps(c);
  for (std::size_t i = 0; i < 5; ++i) {
    Tape tape(Tape::Mode::inference);
    const auto a = forward_with_taps(tape, p, row_range(x, i, i + 1), taps);
    const auto b = forward_with_taps(tape, p, row_range(y, i, i + 1), taps);
    for (std::size_t l = 0; l < c.n_taps(); ++l) {
      const auto f = fwd.at(l, i), r = bwd.at(l, i);
      for (std::size_t j = 0; j < c.d_model; ++j) {
        EXPECT_EQ(f[j], -r[j]);
        EXPECT_NEAR(f[j], b.acts.cls(l, 0)[j] - a.acts.cls(l, 0)[j], 1e-10);
      }
    }
  }
  EXPECT_THROW(activation_diffs(p, x, g.tensor({4, 1, 8, 8}, 0, 1)), ShapeError);
}

ActivationDiffs diffs_of(std::vector<std::vector<double>> rows) {
  ActivationDiffs d;
  const std::size_t n = rows.size(), w = rows[0].size();
  std::vector<double> flat;
  for (auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  d.layers.push_back(Tensor::from({n, w}, flat));
  return d;
}

DirectionSet one_layer(std::vector<double> r) {
  DirectionSet s;
  s.mode = SteeringMode::cls;
  s.vectors.push_back(std::move(r));
  return s;
}

TEST(CosineTrace, WorkedExamples) {
  const auto diffs = diffs_of({{2, 0}, {-3, 0}, {0, 1}, {0, 0}});
  const auto tr = cosine_trace(diffs, one_layer({1, 0}), {true, true, false, false});
  ASSERT_EQ(tr.cosines.size(), 1u);
  EXPECT_DOUBLE_EQ(tr.cosines[0][0], 1.0);
  EXPECT_DOUBLE_EQ(tr.cosines[0][1], -1.0);
  EXPECT_DOUBLE_EQ(tr.cosines[0][2], 0.0);
  EXPECT_TRUE(std::isnan(tr.cosines[0][3]));
  EXPECT_EQ(tr.in_group[0].count, 2u);
  EXPECT_DOUBLE_EQ(tr.in_group[0].mean, 0.0);
  EXPECT_DOUBLE_EQ(tr.in_group[0].std, 1.0);
  EXPECT_EQ(tr.out_group[0].count, 1u);
}

TEST(CosineTrace, ZeroDirectionLeavesLayerUndefined) {
  const auto tr = cosine_trace(diffs_of({{1, 2}}), one_layer({0, 0}), {true});
  EXPECT_FALSE(tr.layer_defined[0]);
  EXPECT_TRUE(std::isnan(tr.cosines[0][0]));
  EXPECT_EQ(tr.in_group[0].count, 0u);
  EXPECT_TRUE(std::isnan(tr.in_group[0].median));
}

TEST(CosineTrace, RangeScaleAndPermutationProperties) {
  for_all(30, 53, [](Gen& g) {
    const std::size_t n = g.index(1, 10), d = g.index(1, 6);
    std::vector<std::vector<double>> rows(n);
    for (auto& r : rows) r = g.values(d);
    const auto r = g.values(d);
    std::vector<bool> group(n);
    for (std::size_t i = 0; i < n; ++i) group[i] = g.coin();

    const auto base = cosine_trace(diffs_of(rows), one_layer(r), group);
    const double k = g.uniform(0.1, 10);
    auto rows_k = rows;
    for (auto& row : rows_k) {
      for (auto& x : row) x *= k;
    }
    auto r_k = r;
    const double kr = g.uniform(0.1, 10);
    for (auto& x : r_k) x *= kr;
    const auto scaled = cosine_trace(diffs_of(rows_k), one_layer(r_k), group);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g.engine());
    std::vector<std::vector<double>> rows_p(n);
    std::vector<bool> group_p(n);
    for (std::size_t i = 0; i < n; ++i) rows_p[i] = rows[perm[i]], group_p[i] = group[perm[i]];
    const auto permuted = cosine_trace(diffs_of(rows_p), one_layer(r), group_p);

    for (std::size_t i = 0; i < n; ++i) {
      const double c = base.cosines[0][i];
      if (std::isnan(c)) continue;
      EXPECT_GE(c, -1.0);
      EXPECT_LE(c, 1.0);
      EXPECT_NEAR(scaled.cosines[0][i], c, 1e-12);
    }
    EXPECT_EQ(permuted.in_group[0].count, base.in_group[0].count);
    if (base.in_group[0].count > 0) {
      EXPECT_NEAR(permuted.in_group[0].median, base.in_group[0].median, 1e-12);
      EXPECT_NEAR(permuted.in_group[0].mean, base.in_group[0].mean, 1e-12);
    }
  });
}

TEST(CosineTrace, RejectsAllTokenDirectionsAndBadMask) {
  auto dirs = one_layer({1, 0});
  EXPECT_THROW(cosine_trace(diffs_of({{1, 0}}), dirs, {true, false}), ShapeError);
  dirs.mode = SteeringMode::all_tokens;
  EXPECT_THROW(cosine_trace(diffs_of({{1, 0}}), dirs, {true}), std::invalid_argument);
}

TEST(Summarize, SkipsNaNAndHandlesEvenCounts) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::vector<double> v{4, nan, 1, 3, 2};
  const auto s = summarize(v);
  EXPECT_EQ(s.count, 4u);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_DOUBLE_EQ(s.std, std::sqrt(1.25));
}

TEST(ClassDistribution, WorkedExample) {
  const std::vector<int> preds{0, 0, 1, 2, 2, 2}, labels{1, 0, 1, 1, 2, 0};
  const auto dist = class_distribution(preds, labels, 2, 3);
  EXPECT_EQ(dist.histogram, (std::vector<std::size_t>{2, 1, 3}));
  EXPECT_EQ(dist.total, 6u);
  EXPECT_DOUBLE_EQ(dist.target_fraction, 0.5);
  EXPECT_DOUBLE_EQ(dist.original_fraction, 0.5);
  const std::vector<int> bad{3};
  const std::vector<int> one{0};
  EXPECT_THROW(class_distribution(bad, one, 0, 3), std::out_of_range);
  EXPECT_THROW(class_distribution(preds, one, 0, 3), ShapeError);
}

TEST(ClassDistribution, UniformPredictionsStayNearUniform) {
  Gen g(54);
  const std::size_t n = 4000, k = 4;
  std::vector<int> preds(n), labels(n, 0);
  for (auto& p : preds) p = static_cast<int>(g.index(0, k - 1));
  const auto dist = class_distribution(preds, labels, 1, k);
  // Four binomial standard deviations at p = 1/4.
  const double tol = 4.0 * std::sqrt(0.25 * 0.75 / n);
  for (auto h : dist.histogram) EXPECT_NEAR(double(h) / n, 0.25, tol);
  std::size_t sum = 0;
  for (auto h : dist.histogram) sum += h;
  EXPECT_EQ(sum, n);
}

}  // namespace
}  // namespace vitscope
