#include <algorithm>
#include <set>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "rlab/corpus.hpp"
#include "rlab/probe.hpp"
#include "rlab/trainer.hpp"
#include "test_util.hpp"

using namespace rlab;

namespace {

struct Fixture {
  KnowledgeBase kb = generate_kb(5, 30, 6);
  QuerySplit qs = make_queries(kb, 4);
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

// Roughly unit variance.
std::vector<float> normal_vec(Rng& rng, int d, float scale = 1.0f) {
  std::vector<float> v(static_cast<size_t>(d));
  for (auto& x : v) x = scale * rng.uniform(-1.7f, 1.7f);
  return v;
}

// One-layer bank where a query's feature is its gold passage's feature plus
// small noise, so a pairwise scorer on q*c can separate gold from negatives.
FeatureBank matched_bank(int d, uint64_t seed) {
  Rng rng(seed);
  FeatureBank bank;
  bank.n_layers = 1;
  bank.d_model = d;
  for (size_t p = 0; p < fx().kb.passages.size(); ++p)
    bank.passages.push_back({normal_vec(rng, d), normal_vec(rng, d)});
  for (const auto& q : fx().qs.queries) {
    auto f = bank.passages[static_cast<size_t>(q.gold)][1];
    for (auto& x : f) x += 0.1f * rng.uniform(-1.7f, 1.7f);
    bank.queries.push_back({normal_vec(rng, d), f});
  }
  return bank;
}

FeatureBank noise_bank(int d, uint64_t seed) {
  Rng rng(seed);
  FeatureBank bank;
  bank.n_layers = 1;
  bank.d_model = d;
  for (size_t p = 0; p < fx().kb.passages.size(); ++p)
    bank.passages.push_back({normal_vec(rng, d), normal_vec(rng, d)});
  for (size_t q = 0; q < fx().qs.queries.size(); ++q) bank.queries.push_back({normal_vec(rng, d), normal_vec(rng, d)});
  return bank;
}

ProbeConfig fast_probe() {
  ProbeConfig c;
  c.epochs = 200;
  c.seed = 2;
  return c;
}

}  // namespace

TEST(ProbeDataset, GoldPositionsAreBalancedAndSplitsDisjoint) {
  const auto& f = fx();
  for (int n : {2, 3, 5}) {
    const ProbeDataset ds = make_probe_dataset(f.kb, f.qs, n, 4, 17);
    for (const auto* split : {&ds.train, &ds.held_out}) {
      ASSERT_FALSE(split->empty());
      std::vector<double> counts(static_cast<size_t>(n), 0.0);
      for (const auto& ex : *split) {
        ASSERT_EQ(static_cast<int>(ex.candidates.size()), n);
        const Query& q = f.qs.queries[static_cast<size_t>(ex.query)];
        EXPECT_EQ(ex.candidates[static_cast<size_t>(ex.gold_position)], q.gold);
        EXPECT_EQ(std::set<int32_t>(ex.candidates.begin(), ex.candidates.end()).size(), static_cast<size_t>(n));
        EXPECT_EQ(q.held_out, split == &ds.held_out);
        counts[static_cast<size_t>(ex.gold_position)] += 1.0;
      }
      const double expected = static_cast<double>(split->size()) / n;
      double chi2 = 0.0;
      for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
      const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(n - 1), chi2));
      EXPECT_GT(p, 0.01) << "N=" << n;
    }
    // Reproducible for a fixed seed.
    const ProbeDataset again = make_probe_dataset(f.kb, f.qs, n, 4, 17);
    ASSERT_EQ(again.train.size(), ds.train.size());
    for (size_t i = 0; i < ds.train.size(); ++i) {
      EXPECT_EQ(again.train[i].candidates, ds.train[i].candidates);
      EXPECT_EQ(again.train[i].gold_position, ds.train[i].gold_position);
    }
  }
}

TEST(Probe, UntrainedProbesSitAtChance) {
  const auto& f = fx();
  const FeatureBank bank = noise_bank(16, 3);
  for (int n : {2, 4}) {
    const ProbeDataset ds = make_probe_dataset(f.kb, f.qs, n, 12, 5);
    const auto train = extract_features(bank, ds.train, 1);
    const auto held = extract_features(bank, ds.held_out, 1);
    const auto all = [&] {
      auto v = train;
      v.insert(v.end(), held.begin(), held.end());
      return v;
    }();
    for (ProbeMode mode : {ProbeMode::kPairwise, ProbeMode::kConcat}) {
      const Probe untrained(1, n, 16, mode, 9);
      EXPECT_NEAR(evaluate_probe(untrained, all), 1.0 / n, 0.05) << probe_mode_name(mode) << " N=" << n;
    }
  }
}

TEST(Probe, PairwiseLogitsArePermutationEquivariant) {
  Rng rng(8);
  const int d = 6, n = 5;
  Probe p(0, n, d, ProbeMode::kPairwise, 4);
  for (auto& w : p.weights()) w = rng.uniform(-1.7f, 1.7f);
  ProbeExample ex;
  ex.query = normal_vec(rng, d);
  for (int j = 0; j < n; ++j) ex.candidates.push_back(normal_vec(rng, d));
  const auto base = p.logits(ex);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> perm(n);
    for (int j = 0; j < n; ++j) perm[static_cast<size_t>(j)] = j;
    rng.shuffle(perm);
    ProbeExample px = ex;
    for (int j = 0; j < n; ++j) px.candidates[static_cast<size_t>(j)] = ex.candidates[static_cast<size_t>(perm[static_cast<size_t>(j)])];
    const auto l = p.logits(px);
    for (int j = 0; j < n; ++j) EXPECT_EQ(l[static_cast<size_t>(j)], base[static_cast<size_t>(perm[static_cast<size_t>(j)])]);
  }
  ProbeExample bad = ex;
  bad.candidates.pop_back();
  EXPECT_THROW(p.logits(bad), ShapeError);
  EXPECT_EQ(p.input_width(), 3 * d);
  EXPECT_EQ(Probe(0, n, d, ProbeMode::kConcat, 4).input_width(), (n + 1) * d);
}

TEST(Probe, LearnsMatchedFeaturesAndFactCheckTracksTheGoldFeature) {
  const auto& f = fx();
  FeatureBank bank = matched_bank(32, 6);
  const ProbeDataset ds = make_probe_dataset(f.kb, f.qs, 2, 4, 7);
  ProbeConfig pc = fast_probe();
  const Probe probe = train_probe(extract_features(bank, ds.train, 1), 1, 2, pc);
  EXPECT_TRUE(probe.trained());
  EXPECT_GT(evaluate_probe(probe, extract_features(bank, ds.held_out, 1)), 0.95);
  EXPECT_NEAR(evaluate_probe(probe, extract_features(bank, ds.held_out, 0)), 0.5, 0.12);

  // Negating the gold feature must always fail the check; pure noise still
  // beats all four negatives about one time in five.
  int checked = 0, passed = 0, flipped_noise = 0, flipped_negated = 0;
  Rng rng(10);
  for (size_t qi = 0; qi < f.qs.queries.size() && checked < 20; ++qi) {
    const Query& q = f.qs.queries[qi];
    if (!q.held_out) continue;
    ++checked;
    if (!probe_fact_check(bank, f.qs, static_cast<int32_t>(qi), probe)) continue;
    ++passed;
    FeatureBank altered = bank;
    auto& gold = altered.passages[static_cast<size_t>(q.gold)][1];
    for (auto& x : gold) x = -x;
    flipped_negated += !probe_fact_check(altered, f.qs, static_cast<int32_t>(qi), probe);
    gold = normal_vec(rng, 32);
    flipped_noise += !probe_fact_check(altered, f.qs, static_cast<int32_t>(qi), probe);
  }
  EXPECT_GE(passed, checked - 1);
  EXPECT_EQ(flipped_negated, passed);
  EXPECT_GE(flipped_noise, passed / 2);
}

TEST(Probe, ContractErrors) {
  const auto& f = fx();
  const FeatureBank bank = noise_bank(4, 1);
  const ProbeDataset ds = make_probe_dataset(f.kb, f.qs, 2, 1, 1);
  EXPECT_THROW(extract_features(bank, ds.train.front(), 2), ReferenceError);
  auto one_position = extract_features(bank, ds.train, 1);
  for (auto& ex : one_position) {
    if (ex.gold_position != 0) std::swap(ex.candidates[0], ex.candidates[static_cast<size_t>(ex.gold_position)]);
    ex.gold_position = 0;
  }
  EXPECT_THROW(train_probe(one_position, 1, 2, fast_probe()), DataError);
  EXPECT_THROW(probe_fact_check(bank, f.qs, 0, Probe(1, 2, 4, ProbeMode::kPairwise, 0)), ContractError);
}

TEST(FeatureBank, LayerZeroIsInputIndependentAndModelsStayFrozen) {
  const auto& f = fx();
  EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_intermediate = 24;
  cfg.max_seq = 64;
  cfg.vocab_size = f.kb.vocab.size();
  Rng rng(12);
  const ParamStore q = init_params(cfg, rng);
  const ParamStore c = init_params(cfg, rng);
  const std::string q_bytes = serialize_checkpoint(q, cfg), c_bytes = serialize_checkpoint(c, cfg);

  const FeatureBank bank = build_feature_bank(q, c, cfg, f.kb, f.qs);
  ASSERT_EQ(bank.queries.size(), f.qs.queries.size());
  ASSERT_EQ(bank.passages.size(), f.kb.passages.size());
  for (const auto& feats : bank.queries) {
    ASSERT_EQ(feats.size(), 3u);
    EXPECT_EQ(feats[0], bank.queries[0][0]);
  }
  for (const auto& feats : bank.passages) EXPECT_EQ(feats[0], bank.passages[0][0]);
  EXPECT_NE(bank.queries[0][2], bank.queries[1][2]);

  ProbeConfig pc = fast_probe();
  pc.epochs = 20;
  const auto rows = probe_table({{"m", &q, &c, cfg}}, f.kb, f.qs, {2}, {0, 2}, pc, 2, true);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows)
    if (r.layer == 0) EXPECT_NEAR(r.accuracy, 0.5, 0.15) << r.model_tag;
  EXPECT_EQ(serialize_checkpoint(q, cfg), q_bytes);
  EXPECT_EQ(serialize_checkpoint(c, cfg), c_bytes);
}
