#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "rlab/corpus.hpp"
#include "rlab/trainer.hpp"
#include "test_util.hpp"

using namespace rlab;

namespace {

EncoderConfig tiny_config(const KnowledgeBase& kb) {
  EncoderConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_intermediate = 32;
  c.max_seq = 64;
  c.vocab_size = kb.vocab.size();
  return c;
}

const KnowledgeBase& tiny_kb() {
  static const KnowledgeBase kb = generate_kb(7, 24, 5);
  return kb;
}

TrainConfig mlm_cfg(int steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 16;
  t.seed = 3;
  t.log_every = 1;
  return t;
}

}  // namespace

TEST(Contrastive, EqualScoresGiveLogK) {
  for (int k : {2, 3, 7}) {
    Graph g;
    Var q = g.input(Tensor({2, 4}, 0.5f));
    Var p = g.input(Tensor({k, 4}, 0.25f));
    const std::vector<int32_t> targets = {0, k - 1};
    const float loss = g.value(contrastive_loss(g, q, p, targets)).item();
    EXPECT_NEAR(loss, std::log(static_cast<float>(k)), 1e-6f) << "K=" << k;
  }
}

TEST(Contrastive, TemperatureScalesScoresAndGradientMatchesDifferences) {
  Rng rng(4);
  Tensor q({3, 5}), p({4, 5});
  for (auto& v : q.vec()) v = rng.uniform(-1, 1);
  for (auto& v : p.vec()) v = rng.uniform(-1, 1);
  const std::vector<int32_t> targets = {2, 0, 3};
  auto loss = [&](float T) {
    Graph g;
    return static_cast<double>(g.value(contrastive_loss(g, g.input(q), g.input(p), targets, T)).item());
  };
  // Hand-computed reference for T = 0.5.
  double ref = 0.0;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> s(4);
    double mx = -1e30;
    for (int j = 0; j < 4; ++j) {
      double d = 0.0;
      for (int c = 0; c < 5; ++c) d += static_cast<double>(q.at(i, c)) * p.at(j, c);
      s[static_cast<size_t>(j)] = d / 0.5;
      mx = std::max(mx, s[static_cast<size_t>(j)]);
    }
    double z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    ref += -(s[static_cast<size_t>(targets[static_cast<size_t>(i)])] - mx - std::log(z));
  }
  EXPECT_NEAR(loss(0.5f), ref / 3.0, 1e-5);

  Tensor gq(q.shape());
  {
    Graph g;
    Var vq = g.param(q, &gq);
    g.backward(contrastive_loss(g, vq, g.input(p), targets, 0.5f));
  }
  Tensor* pq = &q;
  auto fd = tu::richardson_gradient([&] { return loss(0.5f); }, std::span<Tensor* const>(&pq, 1), 1e-2f);
  EXPECT_LT(relative_error(gq, fd[0]), 1e-3);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  ParamStore s;
  s.add("w", Tensor({3}, std::vector<float>{1.0f, -2.0f, 0.5f}));
  s.add("frozen", Tensor({2}, 7.0f));
  Adam opt(s, 0.1f, 0.9f, 0.999f, 1e-8f, {"frozen"});
  s.grad("w") = Tensor({3}, std::vector<float>{0.3f, -4.0f, 0.0f});
  s.grad("frozen") = Tensor({2}, 1.0f);
  opt.step();
  EXPECT_NEAR(s.at("w")[0], 0.9f, 1e-6f);
  EXPECT_NEAR(s.at("w")[1], -1.9f, 1e-6f);
  EXPECT_EQ(s.at("w")[2], 0.5f);
  EXPECT_EQ(s.at("frozen")[0], 7.0f);
  EXPECT_EQ(opt.steps_taken(), 1);
}

TEST(TrainConfig, ValidationRejectsBadValues) {
  TrainConfig t;
  t.validate();
  t.lr = 0.0f;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.mask_prob = 1.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.steps = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(MlmPretrain, LossFallsAndRunsAreBitReproducible) {
  const auto& kb = tiny_kb();
  const EncoderConfig cfg = tiny_config(kb);
  std::vector<MetricRow> m1, m2;
  const ParamStore a = mlm_pretrain(mlm_texts(kb), kb.vocab, cfg, mlm_cfg(150), &m1);
  const ParamStore b = mlm_pretrain(mlm_texts(kb), kb.vocab, cfg, mlm_cfg(150), &m2);
  EXPECT_TRUE(a.bit_equal(b));
  ASSERT_GE(m1.size(), 100u);
  double head = 0.0, tail = 0.0;
  for (size_t i = 0; i < 10; ++i) {
    head += m1[i].loss;
    tail += m1[m1.size() - 1 - i].loss;
  }
  EXPECT_LT(tail, head * 0.8);
  // Initial loss is near ln V for an untrained softmax over the vocabulary.
  EXPECT_NEAR(m1.front().loss, std::log(static_cast<double>(cfg.vocab_size)), 0.5);
}

TEST(MlmPretrain, RejectsMismatchedVocabulary) {
  const auto& kb = tiny_kb();
  EncoderConfig cfg = tiny_config(kb);
  cfg.vocab_size += 1;
  EXPECT_THROW(mlm_pretrain(mlm_texts(kb), kb.vocab, cfg, mlm_cfg(2)), ConfigError);
}

TEST(DprFinetune, ChangesBothTowersDeterministically) {
  const auto& kb = tiny_kb();
  const EncoderConfig cfg = tiny_config(kb);
  Rng rng(1);
  const ParamStore pre = init_params(cfg, rng);
  const QuerySplit qs = make_queries(kb, 2);
  TrainConfig t;
  t.phase = Phase::kDpr;
  t.steps = 5;
  t.batch_size = 4;
  t.lr = 1e-3f;
  std::vector<MetricRow> m;
  const DualEncoder a = dpr_finetune(pre, cfg, kb, qs.train(), t, &m);
  const DualEncoder b = dpr_finetune(pre, cfg, kb, qs.train(), t);
  EXPECT_TRUE(a.query.bit_equal(b.query));
  EXPECT_TRUE(a.context.bit_equal(b.context));
  EXPECT_FALSE(a.query.bit_equal(pre));
  EXPECT_FALSE(a.context.bit_equal(pre));
  EXPECT_FALSE(a.query.bit_equal(a.context));
  for (const auto& r : m) EXPECT_TRUE(std::isfinite(r.loss));

  Query broken = *qs.train().front();
  broken.gold = 10000;
  std::vector<const Query*> bad = {&broken};
  EXPECT_THROW(dpr_finetune(pre, cfg, kb, bad, t), DataError);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg = tiny_config(tiny_kb());
    Rng rng(9);
    params = init_params(cfg, rng);
    bytes = serialize_checkpoint(params, cfg);
  }
  EncoderConfig cfg;
  ParamStore params;
  std::string bytes;
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  const Checkpoint ck = deserialize_checkpoint(bytes);
  EXPECT_TRUE(ck.params.bit_equal(params));
  EXPECT_EQ(ck.config, cfg);
  EXPECT_EQ(serialize_checkpoint(ck.params, ck.config), bytes);
  const std::string dir = tu::temp_dir("ckpt");
  save_checkpoint(params, cfg, dir + "/m.ckpt");
  EXPECT_TRUE(load_checkpoint(dir + "/m.ckpt").params.bit_equal(params));
  EXPECT_EQ(checkpoint_hash(params, cfg), checkpoint_hash(ck.params, ck.config));
  EXPECT_EQ(bytes.substr(0, 5), "RLAB1");
}

TEST_F(CheckpointTest, AnyFlippedByteIsDetected) {
  Rng rng(2);
  for (int trial = 0; trial < 64; ++trial) {
    std::string bad = bytes;
    const size_t pos = 5 + static_cast<size_t>(rng.below(bad.size() - 5));
    bad[pos] = static_cast<char>(bad[pos] ^ (1 << rng.below(8)));
    EXPECT_ANY_THROW(deserialize_checkpoint(bad)) << "byte " << pos;
    try {
      deserialize_checkpoint(bad);
    } catch (const Error& e) {
      EXPECT_TRUE(e.kind() == "corruption" || e.kind() == "format") << e.kind();
    }
  }
}

TEST_F(CheckpointTest, PayloadCorruptionAndTruncationRaiseCorruption) {
  std::string bad = bytes;
  bad[bad.size() - 100] ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint(bad), CorruptionError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 7)), CorruptionError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 2)), Error);
}

TEST_F(CheckpointTest, WrongMagicAndPermutedManifestRaiseFormat) {
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), FormatError);
  // Same tensors, non-canonical order.
  ParamStore permuted;
  const auto& e = params.entries();
  permuted.add(e[1].name, e[1].value);
  permuted.add(e[0].name, e[0].value);
  for (size_t i = 2; i < e.size(); ++i) permuted.add(e[i].name, e[i].value);
  EXPECT_THROW(deserialize_checkpoint(serialize_checkpoint(permuted, cfg)), FormatError);
}
