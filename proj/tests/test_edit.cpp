#include <gtest/gtest.h>

#include "rlab/edit.hpp"
#include "rlab/error.hpp"
#include "test_util.hpp"

using namespace rlab;

namespace {

struct World {
  KnowledgeBase kb = generate_kb(21, 24, 5);
  QuerySplit qs = make_queries(kb, 4);
  EncoderConfig cfg;
  ParamStore model;
  World() {
    cfg.n_layers = 3;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_intermediate = 24;
    cfg.max_seq = 64;
    cfg.vocab_size = kb.vocab.size();
    TrainConfig t;
    t.steps = 200;
    t.batch_size = 16;
    t.object_mask_prob = 1.0;
    model = mlm_pretrain(mlm_texts(kb), kb.vocab, cfg, t);
  }
};

const World& world() {
  static const World w;
  return w;
}

EditConfig fast_edit() {
  EditConfig ec;
  ec.patch_lr = 1e-2f;
  ec.finetune_lr = 1e-2f;
  ec.max_steps = 200;
  ec.finetune_blocks = 2;
  return ec;
}

int32_t object_token(const KnowledgeBase& kb, int32_t entity) { return kb.vocab.id(kb.surface(entity)); }

}  // namespace

TEST(EditRequest, CarriesAFalseObjectAndRephrasings) {
  const auto& w = world();
  for (size_t i = 0; i < 20; ++i) {
    const FactTriple& f = w.kb.facts[i];
    const EditRequest r = make_edit_request(w.kb, f, EditMethod::kLayerPatch);
    EXPECT_EQ(r.target, f);
    EXPECT_NE(r.false_object, f.object);
    EXPECT_GE(r.rephrasings.size(), 10u);
    EXPECT_LE(r.rephrasings.size(), 12u);
    EXPECT_NE(r.false_statement.find(w.kb.surface(r.false_object)), std::string::npos);
  }
}

TEST(PatchNeuron, AppendingLeavesTheModelFunctionUnchanged) {
  const auto& w = world();
  Rng rng(3);
  std::vector<float> key(16);
  for (auto& v : key) v = rng.uniform(-1.0f, 1.0f);
  const ParamStore once = append_patch_neuron(w.model, w.cfg, key, -0.3f);
  const ParamStore twice = append_patch_neuron(once, w.cfg, key, 0.2f);
  EXPECT_TRUE(once.has_patch());
  EXPECT_EQ(twice.at("patch.key.weight").shape(), (Shape{2, 16}));
  for (size_t i = 0; i < 5; ++i) {
    const auto toks = w.kb.vocab.encode_text(w.kb.passages[i].text);
    const auto base = encode(toks, w.model, w.cfg).embedding;
    EXPECT_EQ(encode(toks, once, w.cfg).embedding, base);
    EXPECT_EQ(encode(toks, twice, w.cfg).embedding, base);
  }
  EXPECT_TRUE(frozen_regions_identical(w.model, once, {"patch.key.weight", "patch.key.bias", "patch.value.weight"}));
  EXPECT_THROW(append_patch_neuron(w.model, w.cfg, std::vector<float>(3), 0.0f), ShapeError);
}

TEST(FrozenRegions, DetectsChangedAndUnexpectedEntries) {
  const auto& w = world();
  ParamStore changed = w.model;
  changed.at("block0.output.bias")[2] += 1e-7f;
  EXPECT_FALSE(frozen_regions_identical(w.model, changed, {}));
  EXPECT_TRUE(frozen_regions_identical(w.model, changed, {"block0.output.bias"}));
  const ParamStore patched = append_patch_neuron(w.model, w.cfg, std::vector<float>(16, 0.1f), 0.0f);
  EXPECT_FALSE(frozen_regions_identical(w.model, patched, {}));
}

TEST(Edits, FlipTheMaskedPredictionAndTouchOnlyTheirRegion) {
  const auto& w = world();
  const ParamStore before_bytes = w.model;
  for (EditMethod method : {EditMethod::kLayerPatch, EditMethod::kConstrainedFinetune}) {
    for (size_t i : {size_t{0}, size_t{7}}) {
      const FactTriple& f = w.kb.facts[i];
      const EditRequest req = make_edit_request(w.kb, f, method);
      const EditOutcome out = apply_edit(w.model, w.cfg, w.kb, req, fast_edit());
      EXPECT_EQ(out.method, method);
      ASSERT_TRUE(out.converged) << edit_method_name(method) << " fact " << f.id;
      EXPECT_LE(out.steps, fast_edit().max_steps);
      EXPECT_EQ(predict_object(out.edited, w.cfg, w.kb, f.subject, f.relation, 0), object_token(w.kb, req.false_object));
      EXPECT_TRUE(frozen_regions_identical(w.model, out.edited, out.trainable));
      for (const auto& name : out.trainable) {
        if (method == EditMethod::kLayerPatch) {
          EXPECT_EQ(name.rfind("patch.", 0), 0u) << name;
        } else {
          EXPECT_TRUE(name.rfind("block1.", 0) == 0 || name.rfind("block2.", 0) == 0) << name;
        }
      }
    }
  }
  EXPECT_TRUE(w.model.bit_equal(before_bytes));
}

TEST(Edits, SecondPatchKeepsTheFirstPatchRows) {
  const auto& w = world();
  const EditOutcome first = layer_patch_edit(w.model, w.cfg, w.kb, make_edit_request(w.kb, w.kb.facts[2], EditMethod::kLayerPatch), fast_edit());
  const EditOutcome second = layer_patch_edit(first.edited, w.cfg, w.kb, make_edit_request(w.kb, w.kb.facts[11], EditMethod::kLayerPatch), fast_edit());
  const Tensor& k1 = first.edited.at("patch.key.weight");
  const Tensor& k2 = second.edited.at("patch.key.weight");
  ASSERT_EQ(k2.shape()[0], 2);
  for (int64_t c = 0; c < 16; ++c) EXPECT_EQ(k1.at(0, c), k2.at(0, c));
  EXPECT_EQ(first.edited.at("patch.key.bias")[0], second.edited.at("patch.key.bias")[0]);
  for (int64_t r = 0; r < 16; ++r)
    EXPECT_EQ(first.edited.at("patch.value.weight").at(r, 0), second.edited.at("patch.value.weight").at(r, 0));
}

TEST(Edits, NonConvergenceIsReportedNotThrown) {
  const auto& w = world();
  EditConfig ec = fast_edit();
  ec.max_steps = 1;
  ec.patch_lr = 1e-9f;
  const EditOutcome out = apply_edit(w.model, w.cfg, w.kb, make_edit_request(w.kb, w.kb.facts[4], EditMethod::kLayerPatch), ec);
  EXPECT_FALSE(out.converged);
  EXPECT_EQ(out.steps, 1);
}

TEST(RemovalCheck, UneditedFactStaysAndDestroyedFeaturesAreRemoved) {
  const auto& w = world();
  // Features where each query equals its gold passage, so the probe passes.
  Rng rng(4);
  auto vec = [&] {
    std::vector<float> v(32);
    for (auto& x : v) x = rng.uniform(-1.7f, 1.7f);
    return v;
  };
  RemovalSuite suite;
  suite.bank.n_layers = 1;
  suite.bank.d_model = 32;
  for (size_t p = 0; p < w.kb.passages.size(); ++p) suite.bank.passages.push_back({vec(), vec()});
  for (const auto& q : w.qs.queries) suite.bank.queries.push_back({vec(), suite.bank.passages[static_cast<size_t>(q.gold)][1]});
  const ProbeDataset ds = make_probe_dataset(w.kb, w.qs, 2, 4, 1);
  suite.probe = train_probe(extract_features(suite.bank, ds.train, 1), 1, 2, ProbeConfig{});

  const int32_t qi = query_for_fact(w.qs, w.qs.queries[3].answer_fact.id);
  EXPECT_EQ(qi, 3);
  EXPECT_EQ(query_for_fact(w.qs, -5), -1);
  const RemovalResult kept = removal_check(suite, w.model, w.cfg, w.kb, w.qs, qi);
  EXPECT_FALSE(kept.removed);
  const FactTriple& f = w.qs.queries[3].answer_fact;
  EXPECT_EQ(kept.masked_prefers_true, predict_object(w.model, w.cfg, w.kb, f.subject, f.relation, 0) == object_token(w.kb, f.object));

  RemovalSuite destroyed = suite;
  for (auto& x : destroyed.bank.passages[static_cast<size_t>(w.qs.queries[3].gold)][1]) x = -x;
  EXPECT_TRUE(removal_check(destroyed, w.model, w.cfg, w.kb, w.qs, qi).removed);

  RemovalSuite untrained = suite;
  untrained.probe = Probe(1, 2, 32, ProbeMode::kPairwise, 0);
  EXPECT_THROW(removal_check(untrained, w.model, w.cfg, w.kb, w.qs, qi), ContractError);
}
