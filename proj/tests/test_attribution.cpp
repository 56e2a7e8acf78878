#include <cmath>

#include <gtest/gtest.h>

#include "rlab/attribution.hpp"
#include "rlab/error.hpp"
#include "test_util.hpp"

using namespace rlab;

namespace {

struct Model {
  EncoderConfig cfg;
  ParamStore q, c;
  AttributionObjective obj;
};

Model tiny_model(uint64_t seed, Tower tower) {
  Model m;
  m.cfg.n_layers = 2;
  m.cfg.d_model = 8;
  m.cfg.n_heads = 2;
  m.cfg.d_intermediate = 12;
  m.cfg.max_seq = 16;
  m.cfg.vocab_size = 30;
  Rng rng(seed);
  m.q = init_params(m.cfg, rng);
  m.c = init_params(m.cfg, rng);
  m.obj.query = tu::random_sequence(m.cfg, rng, 6);
  m.obj.passage = tu::random_sequence(m.cfg, rng, 9);
  m.obj.tower = tower;
  m.obj.input_id = 0;
  return m;
}

AttributionMap hand_map(std::vector<double> scores, int layers = 1, int d = 2, int di = 3) {
  AttributionMap m;
  m.n_layers = layers;
  m.d_model = d;
  m.d_intermediate = di;
  m.scores = std::move(scores);
  return m;
}

}  // namespace

TEST(RiemannMean, IsExactForLinearIntegrands) {
  for (int m : {1, 4, 20, 200}) {
    const double got = riemann_mean([](double a) { return 3.0 - 2.0 * a; }, m);
    EXPECT_DOUBLE_EQ(got, 3.0 - 2.0 * (m + 1.0) / (2.0 * m));
  }
  EXPECT_NEAR(riemann_mean([](double a) { return a * a; }, 2000), 1.0 / 3.0, 1e-3);
}

TEST(PathGradients, MatchDifferencesOfTheScaledObjective) {
  for (Tower tower : {Tower::kQuery, Tower::kContext}) {
    const Model m = tiny_model(tower == Tower::kQuery ? 3 : 4, tower);
    Rng rng(6);
    std::vector<ScaledNeuron> points;
    for (int k = 0; k < 12; ++k) {
      NeuronRef n{static_cast<int>(rng.below(2)), k % 2 ? Sublayer::kOutput : Sublayer::kIntermediate, 0};
      n.neuron_index = static_cast<int>(rng.below(n.sublayer == Sublayer::kOutput ? 8 : 12));
      points.push_back({n, rng.uniform(0.0f, 1.0f)});
    }
    const auto grads = path_gradients(m.obj, m.q, m.c, m.cfg, points, 64);
    ASSERT_EQ(grads.size(), points.size());
    for (size_t i = 0; i < points.size(); ++i) {
      const auto& p = points[i];
      auto P = [&](float a) { return objective_value(m.obj, m.q, m.c, m.cfg, p.neuron, a); };
      const float h = 1e-2f;
      const double coarse = (P(p.alpha + h) - P(p.alpha - h)) / (2.0 * h);
      const double fine = (P(p.alpha + h / 2) - P(p.alpha - h / 2)) / h;
      const double fd = (4.0 * fine - coarse) / 3.0;
      EXPECT_NEAR(grads[i], fd, 2e-3 * (1.0 + std::abs(fd))) << tower_name(tower) << " point " << i;
    }
  }
}

TEST(Attribute, ScoresAreRiemannMeansOfPathGradients) {
  const Model m = tiny_model(7, Tower::kQuery);
  AttributionConfig ac;
  ac.riemann_steps = 5;
  const AttributionMap map = attribute(m.obj, m.q, m.c, m.cfg, ac);
  ASSERT_EQ(map.scores.size(), static_cast<size_t>(2 * (12 + 8)));
  EXPECT_EQ(map.input_id, 0);
  for (size_t i : {size_t{0}, size_t{13}, size_t{25}, size_t{39}}) {
    const NeuronRef n = map.neuron_at(i);
    EXPECT_EQ(map.index(n), i);
    std::vector<ScaledNeuron> pts;
    for (int k = 1; k <= 5; ++k) pts.push_back({n, static_cast<float>(k) / 5.0f});
    const auto g = path_gradients(m.obj, m.q, m.c, m.cfg, pts);
    double mean = 0.0;
    for (double v : g) mean += v / 5.0;
    EXPECT_NEAR(map.scores[i], mean, 1e-9 + 1e-6 * std::abs(mean));
  }
}

TEST(Attribute, ZeroWeightNeuronScoresExactlyZero) {
  Model m = tiny_model(8, Tower::kQuery);
  auto& w = m.q.at("block1.intermediate.weight");
  for (int64_t c = 0; c < w.cols(); ++c) w.at(5, c) = 0.0f;
  m.q.at("block1.intermediate.bias")[5] = 0.0f;
  AttributionConfig ac;
  ac.riemann_steps = 3;
  const AttributionMap map = attribute(m.obj, m.q, m.c, m.cfg, ac);
  EXPECT_EQ(map.score({1, Sublayer::kIntermediate, 5}), 0.0);
  EXPECT_NE(map.score({1, Sublayer::kIntermediate, 4}), 0.0);
}

TEST(Attribute, RejectsBadReferencesAndConfigs) {
  const Model m = tiny_model(9, Tower::kQuery);
  EXPECT_THROW(objective_value(m.obj, m.q, m.c, m.cfg, {2, Sublayer::kOutput, 0}, 1.0f), ReferenceError);
  EXPECT_THROW(objective_value(m.obj, m.q, m.c, m.cfg, {0, Sublayer::kOutput, 8}, 1.0f), ReferenceError);
  AttributionConfig ac;
  ac.threshold = 1.5;
  EXPECT_THROW(ac.validate(), ConfigError);
  ac = AttributionConfig{};
  ac.riemann_steps = 0;
  EXPECT_THROW(attribute(m.obj, m.q, m.c, m.cfg, ac), ConfigError);
  Model bad = tiny_model(9, Tower::kQuery);
  bad.q.at("block0.output.bias")[0] = std::nanf("");
  EXPECT_THROW(attribute(bad.obj, bad.q, bad.c, bad.cfg, AttributionConfig{}), NumericError);
}

TEST(StrongNeurons, CountsNestAcrossThresholdsAndFlagEmptyMaps) {
  Rng rng(11);
  std::vector<double> s(2 * (3 + 2));
  for (auto& v : s) v = rng.uniform(-1.0f, 1.0f);
  const AttributionMap map = hand_map(s, 2);
  double mx = -1e9;
  for (double v : s) mx = std::max(mx, v);
  int64_t prev = -1;
  std::vector<char> prev_set;
  for (auto it = kSweepThresholds.rbegin(); it != kSweepThresholds.rend(); ++it) {
    const StrongCount c = strong_neuron_count(map, *it);
    EXPECT_FALSE(c.all_zero);
    int64_t expect = 0;
    for (double v : s) expect += v >= *it * mx;
    EXPECT_EQ(c.count, expect);
    EXPECT_GE(c.count, prev);
    const auto set = strong_set(map, *it, mx);
    for (size_t i = 0; i < prev_set.size(); ++i)
      if (prev_set[i]) EXPECT_TRUE(set[i]);
    prev = c.count;
    prev_set = set;
  }
  const AttributionMap negative = hand_map({-1, -2, -0.5, -3, -4});
  const StrongCount c = strong_neuron_count(negative, 0.1);
  EXPECT_TRUE(c.all_zero);
  EXPECT_EQ(c.count, 0);
  // Absolute scoring looks at magnitudes.
  EXPECT_EQ(strong_neuron_count(negative, 0.5, true).count, 3);
}

TEST(ActivationProfile, PerInputAndPerLayerNormsMatchHandCounts) {
  // One block: 3 intermediate then 2 output neurons.
  const std::vector<AttributionMap> maps = {hand_map({1.0, 0.5, 0.0, 0.2, 0.1}), hand_map({0.1, 0.0, 0.0, 4.0, 2.0})};
  const ActivationProfile per_input = activation_profile("m", maps, {0.4}, MaxNorm::kPerInput);
  const ActivationProfile per_layer = activation_profile("m", maps, {0.4}, MaxNorm::kPerLayer);
  auto cell = [](const ActivationProfile& p, Sublayer s) {
    for (const auto& c : p.cells)
      if (c.block == 0 && c.sublayer == s) return c.any_input_count;
    return int64_t{-1};
  };
  // Per input: map 0 max 1.0 -> {i0, i1}; map 1 max 4.0 -> {o0, o1}.
  EXPECT_EQ(cell(per_input, Sublayer::kIntermediate), 2);
  EXPECT_EQ(cell(per_input, Sublayer::kOutput), 2);
  // Per layer: intermediate max 1.0 -> {i0, i1}; output max 4.0 -> {o0, o1}.
  EXPECT_EQ(cell(per_layer, Sublayer::kIntermediate), 2);
  EXPECT_EQ(cell(per_layer, Sublayer::kOutput), 2);
  const ActivationProfile low = activation_profile("m", maps, {0.04}, MaxNorm::kPerLayer);
  // Intermediate threshold 0.04: i0 (1.0, 0.1), i1 (0.5) -> 2; output threshold 0.16: o0, o1 -> 2.
  EXPECT_EQ(cell(low, Sublayer::kIntermediate), 2);
  const ActivationProfile low_in = activation_profile("m", maps, {0.05}, MaxNorm::kPerInput);
  // Map 0 threshold 0.05: i0, i1, o0, o1. Map 1 threshold 0.2: o0, o1.
  EXPECT_EQ(cell(low_in, Sublayer::kIntermediate), 2);
  EXPECT_EQ(cell(low_in, Sublayer::kOutput), 2);
  ASSERT_EQ(per_input.per_input_counts.size(), 2u);
  EXPECT_EQ(per_input.per_input_counts[0][0], 2);
  EXPECT_EQ(per_input.per_input_counts[1][0], 2);

  std::vector<AttributionMap> mixed = maps;
  mixed[1].d_model = 3;
  EXPECT_THROW(activation_profile("m", mixed, {0.1}, MaxNorm::kPerInput), ConfigError);
  EXPECT_THROW(activation_profile("m", {}, {0.1}, MaxNorm::kPerInput), ContractError);
}
