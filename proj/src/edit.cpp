#include "rlab/edit.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include "rlab/error.hpp"

namespace rlab {

const char* edit_method_name(EditMethod m) {
  return m == EditMethod::kLayerPatch ? "layer_patch" : "constrained_finetune";
}

EditRequest make_edit_request(const KnowledgeBase& kb, const FactTriple& fact, EditMethod method) {
  const Counterfactual cf = counterfactual(kb, fact);
  EditRequest r;
  r.target = cf.fact;
  r.false_object = cf.false_object;
  r.false_statement = cf.false_statement;
  r.rephrasings = cf.rephrasings;
  r.method = method;
  return r;
}

ParamStore append_patch_neuron(const ParamStore& store, const EncoderConfig& cfg, std::span<const float> key,
                               float bias) {
  const int d = cfg.d_model;
  if (static_cast<int>(key.size()) != d) throw ShapeError("patch key must have d_model entries");
  const int old_p = store.has_patch() ? static_cast<int>(store.at("patch.key.weight").shape()[0]) : 0;
  const int p = old_p + 1;
  Tensor kw(Shape{p, d}), kb(Shape{p}), vw(Shape{d, p});
  if (old_p > 0) {
    const Tensor& okw = store.at("patch.key.weight");
    const Tensor& okb = store.at("patch.key.bias");
    const Tensor& ovw = store.at("patch.value.weight");
    std::copy(okw.data(), okw.data() + okw.numel(), kw.data());
    std::copy(okb.data(), okb.data() + okb.numel(), kb.data());
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < old_p; ++c) vw.at(r, c) = ovw.at(r, c);
  }
  std::copy(key.begin(), key.end(), kw.data() + static_cast<int64_t>(old_p) * d);
  kb[old_p] = bias;
  ParamStore out;
  for (const auto& e : store.entries())
    if (e.name.rfind("patch.", 0) != 0) out.add(e.name, e.value);
  out.add("patch.key.weight", std::move(kw));
  out.add("patch.key.bias", std::move(kb));
  out.add("patch.value.weight", std::move(vw));
  return out;
}

namespace {

struct EditBatch {
  std::vector<MlmExample> examples;
  int32_t target_token = -1;
};

EditBatch edit_examples(const KnowledgeBase& kb, const EncoderConfig& cfg, const EditRequest& req) {
  if (req.rephrasings.size() < 10 || req.rephrasings.size() > 12)
    throw ContractError("an edit needs 10 to 12 rephrasings");
  EditBatch b;
  b.target_token = kb.vocab.id(kb.surface(req.false_object));
  const int32_t true_token = kb.vocab.id(kb.surface(req.target.object));
  if (b.target_token == true_token) throw ContractError("false statement does not contradict the fact");
  std::vector<std::string> texts{req.false_statement};
  texts.insert(texts.end(), req.rephrasings.begin(), req.rephrasings.end());
  for (const auto& t : texts) {
    MlmExample ex;
    ex.tokens = kb.vocab.encode_text(t);
    validate_tokens(ex.tokens, cfg);
    auto it = std::find(ex.tokens.begin(), ex.tokens.end(), b.target_token);
    if (it == ex.tokens.end()) throw DataError("edit sentence does not contain the false object: " + t);
    ex.positions.push_back(it - ex.tokens.begin());
    ex.targets.push_back(b.target_token);
    *it = kMaskId;
    b.examples.push_back(std::move(ex));
  }
  return b;
}

// Hidden state entering the last block's feed-forward map at `position`.
std::vector<float> last_ffn_input(const ParamStore& store, const EncoderConfig& cfg,
                                  std::span<const int32_t> tokens, int64_t position) {
  Graph g;
  EncoderGraph eg(g, store, cfg);
  SequenceBatch sb;
  sb.append(tokens);
  Var x = eg.embed(sb);
  for (int b = 0; b + 1 < cfg.n_layers; ++b) {
    Var x1 = eg.attention_sublayer(b, x, sb.lengths);
    x = eg.finish_block(b, x1, eg.add_patch(b, x1, eg.output_pre(b, g.gelu(eg.intermediate_pre(b, x1)))));
  }
  Var x1 = eg.attention_sublayer(cfg.n_layers - 1, x, sb.lengths);
  const Tensor& v = g.value(x1);
  return {v.data() + position * v.cols(), v.data() + (position + 1) * v.cols()};
}

// Runs the edit objective; `mask_grads` may zero gradient slices before each
// update.
void run_edit(ParamStore& store, const EncoderConfig& cfg, const EditBatch& batch,
              const std::vector<std::string>& frozen, float lr, int max_steps,
              const std::function<void(ParamStore&)>& mask_grads, EditOutcome& out) {
  Adam opt(store, lr, 0.9f, 0.999f, 1e-8f, frozen);
  std::vector<int32_t> pred;
  out.converged = false;
  out.steps = max_steps;
  for (int step = 0; step < max_steps; ++step) {
    const double loss = mlm_loss_and_grad(store, cfg, batch.examples, frozen, nullptr, &pred);
    if (!std::isfinite(loss)) throw TrainingError("edit loss is non-finite at step " + std::to_string(step));
    if (pred.front() == batch.target_token) {
      out.converged = true;
      out.steps = step;
      break;
    }
    if (mask_grads) mask_grads(store);
    opt.step();
  }
  if (!out.converged) {
    const auto& ex = batch.examples.front();
    out.converged = predict_masked(store, cfg, ex.tokens, ex.positions.front()) == batch.target_token;
  }
  store.zero_grad();
}

}  // namespace

EditOutcome layer_patch_edit(const ParamStore& model, const EncoderConfig& cfg, const KnowledgeBase& kb,
                             const EditRequest& req, const EditConfig& ec) {
  const EditBatch batch = edit_examples(kb, cfg, req);
  const auto& ex0 = batch.examples.front();
  std::vector<float> x = last_ffn_input(model, cfg, ex0.tokens, ex0.positions.front());
  double norm = 0.0;
  for (float v : x) norm += static_cast<double>(v) * v;
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) throw NumericError("edit context has a zero hidden state");
  for (auto& v : x) v = static_cast<float>(ec.patch_key_scale * v / norm);
  const float bias = static_cast<float>(-ec.patch_threshold * ec.patch_key_scale * norm);

  EditOutcome out;
  out.method = EditMethod::kLayerPatch;
  out.fact = req.target;
  out.false_object = req.false_object;
  out.lr = ec.patch_lr;
  out.edited = append_patch_neuron(model, cfg, x, bias);
  const int p = static_cast<int>(out.edited.at("patch.key.weight").shape()[0]);
  std::vector<std::string> frozen;
  for (const auto& e : out.edited.entries())
    if (e.name.rfind("patch.", 0) != 0) frozen.push_back(e.name);
  out.trainable = {"patch.key.weight", "patch.key.bias", "patch.value.weight"};
  const int d = cfg.d_model;
  auto keep_new_only = [p, d](ParamStore& s) {
    Tensor& kw = s.grad("patch.key.weight");
    Tensor& kb = s.grad("patch.key.bias");
    Tensor& vw = s.grad("patch.value.weight");
    std::fill(kw.data(), kw.data() + static_cast<int64_t>(p - 1) * d, 0.0f);
    std::fill(kb.data(), kb.data() + (p - 1), 0.0f);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c + 1 < p; ++c) vw.at(r, c) = 0.0f;
  };
  run_edit(out.edited, cfg, batch, frozen, ec.patch_lr, ec.max_steps, keep_new_only, out);
  return out;
}

EditOutcome constrained_finetune_edit(const ParamStore& model, const EncoderConfig& cfg, const KnowledgeBase& kb,
                                      const EditRequest& req, const EditConfig& ec) {
  if (ec.finetune_blocks < 1 || ec.finetune_blocks > cfg.n_layers)
    throw ConfigError("finetune_blocks must be in [1, n_layers]");
  const EditBatch batch = edit_examples(kb, cfg, req);
  EditOutcome out;
  out.method = EditMethod::kConstrainedFinetune;
  out.fact = req.target;
  out.false_object = req.false_object;
  out.lr = ec.finetune_lr;
  out.edited = model;
  std::vector<std::string> frozen;
  for (const auto& e : out.edited.entries()) {
    bool open = false;
    for (int b = cfg.n_layers - ec.finetune_blocks; b < cfg.n_layers; ++b)
      open = open || e.name.rfind("block" + std::to_string(b) + ".", 0) == 0;
    (open ? out.trainable : frozen).push_back(e.name);
  }
  run_edit(out.edited, cfg, batch, frozen, ec.finetune_lr, ec.max_steps, nullptr, out);
  return out;
}

EditOutcome apply_edit(const ParamStore& model, const EncoderConfig& cfg, const KnowledgeBase& kb,
                       const EditRequest& req, const EditConfig& ec) {
  return req.method == EditMethod::kLayerPatch ? layer_patch_edit(model, cfg, kb, req, ec)
                                               : constrained_finetune_edit(model, cfg, kb, req, ec);
}

bool frozen_regions_identical(const ParamStore& before, const ParamStore& after,
                              const std::vector<std::string>& allowed) {
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& e : before.entries()) {
    if (ok.count(e.name)) continue;
    if (!after.contains(e.name) || !after.at(e.name).bit_equal(e.value)) return false;
  }
  for (const auto& e : after.entries())
    if (!before.contains(e.name) && !ok.count(e.name)) return false;
  return true;
}

RemovalSuite build_removal_suite(const ParamStore& query_model, const ParamStore& context_model,
                                 const EncoderConfig& cfg, const KnowledgeBase& kb, const QuerySplit& qs,
                                 const ProbeConfig& pc, int replicates, int workers) {
  RemovalSuite s;
  s.bank = build_feature_bank(query_model, context_model, cfg, kb, qs, workers);
  const ProbeDataset ds = make_probe_dataset(kb, qs, 2, replicates, pc.seed);
  s.probe = train_probe(extract_features(s.bank, ds.train, cfg.n_layers), cfg.n_layers, 2, pc);
  return s;
}

RemovalResult removal_check(const RemovalSuite& suite, const ParamStore& model, const EncoderConfig& cfg,
                            const KnowledgeBase& kb, const QuerySplit& qs, int32_t query_index) {
  if (!suite.probe.trained()) throw ContractError("removal check needs a trained probe suite");
  RemovalResult r;
  r.removed = !probe_fact_check(suite.bank, qs, query_index, suite.probe);
  const FactTriple& f = qs.queries.at(static_cast<size_t>(query_index)).answer_fact;
  r.masked_prefers_true = predict_object(model, cfg, kb, f.subject, f.relation, 0) == kb.vocab.id(kb.surface(f.object));
  return r;
}

int32_t query_for_fact(const QuerySplit& qs, int32_t fact_id) {
  for (size_t i = 0; i < qs.queries.size(); ++i)
    if (qs.queries[i].answer_fact.id == fact_id) return static_cast<int32_t>(i);
  return -1;
}

}  // namespace rlab
