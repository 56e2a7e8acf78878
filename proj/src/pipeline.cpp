#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "rlab/corpus.hpp"
#include "rlab/error.hpp"
#include "rlab/hash.hpp"
#include "rlab/pipeline.hpp"
#include "rlab/retrieval.hpp"
#include "rlab/stats.hpp"

namespace rlab {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

void write_text(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << text;
  if (!os) throw IoError("write failed: " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// NaN is not representable in JSON; undefined rates are written as null.
json rate_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string fmt_rate(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

const char* tower_tag(Tower t) { return t == Tower::kQuery ? "query" : "context"; }

}  // namespace

// --- attribution map files -------------------------------------------------

void write_attribution_maps(const std::vector<AttributionMap>& maps, const std::string& path) {
  json arr = json::array();
  for (const auto& m : maps) {
    arr.push_back({{"n_layers", m.n_layers},
                   {"d_model", m.d_model},
                   {"d_intermediate", m.d_intermediate},
                   {"tower", tower_tag(m.tower)},
                   {"input_id", m.input_id},
                   {"scores", m.scores}});
  }
  write_text(path, arr.dump() + "\n");
}

std::vector<AttributionMap> read_attribution_maps(const std::string& path) {
  std::vector<AttributionMap> out;
  try {
    for (const auto& j : json::parse(read_text(path))) {
      AttributionMap m;
      m.n_layers = j.at("n_layers").get<int>();
      m.d_model = j.at("d_model").get<int>();
      m.d_intermediate = j.at("d_intermediate").get<int>();
      m.tower = j.at("tower").get<std::string>() == "query" ? Tower::kQuery : Tower::kContext;
      m.input_id = j.at("input_id").get<int32_t>();
      m.scores = j.at("scores").get<std::vector<double>>();
      if (m.scores.size() != static_cast<size_t>(m.n_layers) * static_cast<size_t>(m.d_intermediate + m.d_model))
        throw FormatError("attribution map size does not match its grid in " + path);
      out.push_back(std::move(m));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed attribution maps " + path + ": " + e.what());
  }
  return out;
}

// --- pipeline context ------------------------------------------------------

struct Pipeline::Context {
  const RunConfig& cfg;
  std::string out;
  int workers;
  std::optional<KnowledgeBase> kb_;
  std::optional<QuerySplit> qs_;
  std::map<std::string, ParamStore> models;

  std::string path(const std::string& rel) const { return (fs::path(out) / rel).string(); }

  const KnowledgeBase& kb() {
    if (!kb_) kb_ = generate_kb(cfg.seed, cfg.corpus_entities, cfg.corpus_relations);
    return *kb_;
  }
  const QuerySplit& qs() {
    if (!qs_) qs_ = make_queries(kb(), cfg.corpus_hard_negatives, cfg.corpus_held_out_fraction);
    return *qs_;
  }
  EncoderConfig enc() {
    EncoderConfig e = cfg.encoder;
    e.vocab_size = kb().vocab.size();
    return e;
  }
  const ParamStore& model(const std::string& rel) {
    auto it = models.find(rel);
    if (it != models.end()) return it->second;
    Checkpoint ck = load_checkpoint(path(rel));
    if (!(ck.config == enc())) throw ConfigError("checkpoint " + rel + " does not match the run's encoder config");
    return models.emplace(rel, std::move(ck.params)).first->second;
  }
  void store(const std::string& rel, ParamStore p) {
    save_checkpoint(p, enc(), path(rel));
    models.insert_or_assign(rel, std::move(p));
  }
};

namespace {

constexpr const char* kPassages = "corpus/passages.jsonl";
constexpr const char* kQueries = "corpus/queries.jsonl";
constexpr const char* kPretrained = "models/pretrained.ckpt";
constexpr const char* kDprQuery = "models/dpr_query.ckpt";
constexpr const char* kDprContext = "models/dpr_context.ckpt";

// Table 2 / Figure 1 inputs: a seeded sample of held-out queries.
std::vector<const Query*> attribution_queries(const RunConfig& cfg, const QuerySplit& qs) {
  auto held = qs.held_out();
  Rng rng = Rng(cfg.seed).fork(41);
  rng.shuffle(held);
  held.resize(std::min(held.size(), static_cast<size_t>(cfg.attribution_query_inputs)));
  return held;
}

double map_max(const AttributionMap& m, bool absolute) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : m.scores) mx = std::max(mx, absolute ? std::abs(s) : s);
  return mx;
}

struct EditRow {
  std::string method;
  int32_t fact_id = -1;
  int32_t query_index = -1;
  int32_t false_object = -1;
  bool converged = false;
  int steps = 0;
  float lr = 0.0f;
  bool frozen_identical = false;
  bool masked_flip = false;
  bool removed = false;
  bool masked_prefers_true = false;
  double locality_base = 0.0, locality_edited = 0.0;  // control probe accuracy
  double strict_base = 0.0, strict_edited = 0.0;      // control fact-check pass rate
  int control_checked = 0, control_false_positives = 0;
};

json edit_row_json(const EditRow& r) {
  return {{"method", r.method},
          {"fact_id", r.fact_id},
          {"query_index", r.query_index},
          {"false_object", r.false_object},
          {"converged", r.converged},
          {"steps", r.steps},
          {"lr", r.lr},
          {"frozen_identical", r.frozen_identical},
          {"masked_flip", r.masked_flip},
          {"removed", r.removed},
          {"masked_prefers_true", r.masked_prefers_true},
          {"locality_base", r.locality_base},
          {"locality_edited", r.locality_edited},
          {"locality_delta", r.locality_base - r.locality_edited},
          {"strict_pass_base", r.strict_base},
          {"strict_pass_edited", r.strict_edited},
          {"strict_pass_delta", r.strict_base - r.strict_edited},
          {"control_checked", r.control_checked},
          {"control_false_positives", r.control_false_positives}};
}

const std::vector<EditMethod> kMethods = {EditMethod::kLayerPatch, EditMethod::kConstrainedFinetune};

// ---------------------------------------------------------------------------

void stage_corpus(Pipeline::Context& ctx) {
  write_passages_jsonl(ctx.kb(), ctx.path(kPassages));
  write_queries_jsonl(ctx.kb(), ctx.qs(), ctx.path(kQueries));
}

void stage_pretrain(Pipeline::Context& ctx) {
  const auto& kb = ctx.kb();
  std::vector<MetricRow> metrics;
  spdlog::info("pretrain: {} steps", ctx.cfg.mlm_steps);
  ParamStore p = mlm_pretrain(mlm_texts(kb), kb.vocab, ctx.enc(), ctx.cfg.mlm_config(), &metrics);
  fs::create_directories(ctx.path("metrics"));
  write_metrics_csv(metrics, ctx.path("metrics/mlm.csv"));
  const double acc = masked_object_accuracy(p, ctx.enc(), kb, kb.facts);
  spdlog::info("pretrain: masked-object accuracy {:.3f}", acc);
  write_json(ctx.path("metrics/mlm_summary.json"),
             {{"masked_object_accuracy", acc}, {"n_facts", kb.facts.size()}, {"vocab_size", kb.vocab.size()}});
  fs::create_directories(ctx.path("models"));
  ctx.store(kPretrained, std::move(p));
}

void stage_dpr(Pipeline::Context& ctx) {
  const auto& pre = ctx.model(kPretrained);
  std::vector<MetricRow> metrics;
  DualEncoder d = dpr_finetune(pre, ctx.enc(), ctx.kb(), ctx.qs().train(), ctx.cfg.dpr_config(), &metrics);
  write_metrics_csv(metrics, ctx.path("metrics/dpr.csv"));
  ctx.store(kDprQuery, std::move(d.query));
  ctx.store(kDprContext, std::move(d.context));
}

void stage_probe(Pipeline::Context& ctx) {
  const auto enc = ctx.enc();
  const auto& pre = ctx.model(kPretrained);
  const auto& dq = ctx.model(kDprQuery);
  const auto& dc = ctx.model(kDprContext);
  std::vector<ProbeModel> models = {{"pretrained", &pre, &pre, enc}, {"dpr", &dq, &dc, enc}};
  std::vector<int> layers;
  for (int l = 0; l <= enc.n_layers; ++l) layers.push_back(l);
  const auto rows = probe_table(models, ctx.kb(), ctx.qs(), ctx.cfg.probe_ns, layers, ctx.cfg.probe_config(),
                                ctx.cfg.probe_replicates, true, ctx.workers);
  write_probe_table_csv(rows, ctx.path("probe/table1.csv"));
  json j;
  j["rows"] = json::array();
  for (const auto& r : rows) {
    const int64_t k = std::llround(r.accuracy * static_cast<double>(r.n_examples));
    j["rows"].push_back({{"model_tag", r.model_tag},
                         {"n_passages", r.n_passages},
                         {"layer", r.layer},
                         {"accuracy", r.accuracy},
                         {"n_examples", r.n_examples},
                         {"correct", k},
                         {"p_value", binomial_upper_tail(k, r.n_examples, 1.0 / r.n_passages)}});
  }
  j["top_layer"] = enc.n_layers;
  write_json(ctx.path("probe/summary.json"), j);
}

void stage_attribute(Pipeline::Context& ctx) {
  const auto enc = ctx.enc();
  const auto& kb = ctx.kb();
  const auto& pre = ctx.model(kPretrained);
  const auto& dq = ctx.model(kDprQuery);
  const auto& dc = ctx.model(kDprContext);
  const AttributionConfig ac = ctx.cfg.attribution_config();
  const auto queries = attribution_queries(ctx.cfg, ctx.qs());

  std::vector<AttributionMap> qpre, qdpr, cpre, cdpr;
  for (size_t i = 0; i < queries.size(); ++i) {
    const Query* q = queries[i];
    AttributionObjective obj{kb.vocab.encode_text(q->text),
                             kb.vocab.encode_text(kb.passages[static_cast<size_t>(q->gold)].text), Tower::kQuery,
                             q->id};
    spdlog::info("attribute: query {} ({}/{})", q->id, i + 1, queries.size());
    qpre.push_back(attribute(obj, pre, pre, enc, ac));
    qdpr.push_back(attribute(obj, dq, dc, enc, ac));
    if (static_cast<int>(i) < ctx.cfg.attribution_context_inputs) {
      obj.tower = Tower::kContext;
      obj.input_id = q->gold;
      spdlog::info("attribute: passage {}", q->gold);
      cpre.push_back(attribute(obj, pre, pre, enc, ac));
      cdpr.push_back(attribute(obj, dq, dc, enc, ac));
    }
  }
  write_attribution_maps(qpre, ctx.path("attribution/maps_query_pretrained.json"));
  write_attribution_maps(qdpr, ctx.path("attribution/maps_query_dpr.json"));
  write_attribution_maps(cpre, ctx.path("attribution/maps_context_pretrained.json"));
  write_attribution_maps(cdpr, ctx.path("attribution/maps_context_dpr.json"));

  auto profiles = [&](const std::vector<AttributionMap>& p, const std::vector<AttributionMap>& d) {
    std::vector<ActivationProfile> out;
    if (p.empty()) return out;
    for (MaxNorm norm : {MaxNorm::kPerInput, MaxNorm::kPerLayer}) {
      out.push_back(activation_profile(std::string("pretrained:") + max_norm_name(norm), p, ac.sweep, norm, ac.absolute));
      out.push_back(activation_profile(std::string("dpr:") + max_norm_name(norm), d, ac.sweep, norm, ac.absolute));
    }
    return out;
  };
  const auto qprof = profiles(qpre, qdpr);
  const auto cprof = profiles(cpre, cdpr);
  write_profile_csv(qprof, ctx.path("attribution/profile_query.csv"));
  write_profile_dat(qprof, ctx.path("attribution/profile_query.dat"));
  write_profile_csv(cprof, ctx.path("attribution/profile_context.csv"));
  write_profile_dat(cprof, ctx.path("attribution/profile_context.dat"));

  // Exhaustive containment check of the threshold sweep, per map.
  std::ostringstream nest;
  nest << "model_tag,tower,input_id,theta,count,contained_in_previous\n";
  bool nesting_ok = true;
  int64_t all_zero_maps = 0;
  json counts = json::object();
  auto check = [&](const std::string& tag, const std::vector<AttributionMap>& maps) {
    json per_input = json::array();
    for (const auto& m : maps) {
      const double mx = map_max(m, ac.absolute);
      std::vector<char> prev;
      int64_t prev_count = -1;
      for (double theta : ac.sweep) {
        const auto set = strong_set(m, theta, mx, ac.absolute);
        const int64_t count = std::count(set.begin(), set.end(), 1);
        bool contained = true;
        if (!prev.empty())
          for (size_t i = 0; i < set.size(); ++i)
            if (set[i] && !prev[i]) contained = false;
        if (prev_count >= 0 && count > prev_count) contained = false;
        nesting_ok = nesting_ok && contained;
        nest << tag << ',' << tower_tag(m.tower) << ',' << m.input_id << ',' << theta << ',' << count << ','
             << (contained ? 1 : 0) << '\n';
        prev = set;
        prev_count = count;
      }
      const auto sc = strong_neuron_count(m, ac.threshold, ac.absolute);
      all_zero_maps += sc.all_zero;
      per_input.push_back({{"input_id", m.input_id}, {"strong_count", sc.count}, {"all_zero", sc.all_zero}});
    }
    counts[tag] = per_input;
  };
  check("query:pretrained", qpre);
  check("query:dpr", qdpr);
  check("context:pretrained", cpre);
  check("context:dpr", cdpr);
  write_text(ctx.path("attribution/nesting.csv"), nest.str());

  // Intermediate-sublayer counts at the working threshold (per-input max),
  // summed over inputs, per block.
  auto intermediate = [&](const std::vector<ActivationProfile>& prof) {
    json j = json::object();
    for (const auto& p : prof) {
      std::vector<int64_t> per_block(static_cast<size_t>(enc.n_layers), 0);
      for (const auto& c : p.cells)
        if (c.sublayer == Sublayer::kIntermediate && std::abs(c.theta - ac.threshold) < 1e-12)
          per_block[static_cast<size_t>(c.block)] = c.any_input_count;
      j[p.model_tag] = per_block;
    }
    return j;
  };
  write_json(ctx.path("attribution/summary.json"), {{"nesting_ok", nesting_ok},
                                                    {"all_zero_maps", all_zero_maps},
                                                    {"threshold", ac.threshold},
                                                    {"sweep", ac.sweep},
                                                    {"strong_counts", counts},
                                                    {"intermediate_any_input_query", intermediate(qprof)},
                                                    {"intermediate_any_input_context", intermediate(cprof)}});
}

void stage_retrieve(Pipeline::Context& ctx) {
  const auto enc = ctx.enc();
  const auto& kb = ctx.kb();
  const auto& qs = ctx.qs();
  const auto& pre = ctx.model(kPretrained);
  const auto& dq = ctx.model(kDprQuery);
  const auto& dc = ctx.model(kDprContext);
  const auto pi = build_index(pre, enc, kb.vocab, kb.passages, "pretrained", ctx.workers);
  const auto di = build_index(dc, enc, kb.vocab, kb.passages, "dpr", ctx.workers);
  fs::create_directories(ctx.path("index"));
  save_index(pi, ctx.path("index/pretrained.ridx"));
  save_index(di, ctx.path("index/dpr.ridx"));

  const auto queries = attribution_queries(ctx.cfg, qs);
  const auto mp = read_attribution_maps(ctx.path("attribution/maps_query_pretrained.json"));
  const auto md = read_attribution_maps(ctx.path("attribution/maps_query_dpr.json"));
  RetrievalModels models{&pre, &dq, &dc, enc};
  const auto rows = retrieval_rows(models, pi, di, kb, queries, mp, md, ctx.cfg.attribution_threshold,
                                   ctx.cfg.attribution_absolute);
  fs::create_directories(ctx.path("retrieval"));
  write_retrieval_csv(rows, ctx.path("retrieval/table2.csv"));

  const double hp = top1_accuracy(pi, pre, enc, kb, qs.held_out(), ctx.workers);
  const double hd = top1_accuracy(di, dq, enc, kb, qs.held_out(), ctx.workers);
  const double tp = top1_accuracy(pi, pre, enc, kb, qs.train(), ctx.workers);
  const double td = top1_accuracy(di, dq, enc, kb, qs.train(), ctx.workers);
  spdlog::info("retrieve: held-out top-1 pretrained {:.3f} dpr {:.3f}", hp, hd);
  double sp = 0.0, sd = 0.0;
  for (const auto& r : rows) {
    sp += static_cast<double>(r.strong_count_pretrained);
    sd += static_cast<double>(r.strong_count_dpr);
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  write_json(ctx.path("retrieval/summary.json"), {{"heldout_top1_pretrained", hp},
                                                  {"heldout_top1_dpr", hd},
                                                  {"heldout_delta", hd - hp},
                                                  {"train_top1_pretrained", tp},
                                                  {"train_top1_dpr", td},
                                                  {"n_heldout", qs.held_out().size()},
                                                  {"mean_strong_pretrained", sp / n},
                                                  {"mean_strong_dpr", sd / n}});
}

bool dpr_top1(const EmbeddingIndex& idx, const ParamStore& q, const EncoderConfig& enc, const KnowledgeBase& kb,
              const Query& query) {
  const auto r = search_text(idx, q, enc, kb.vocab.encode_text(query.text), 1);
  return !r.hits.empty() && r.hits[0].id == query.gold;
}

double control_accuracy(const RemovalSuite& s, const QuerySplit& qs, const std::vector<int32_t>& controls,
                        std::vector<char>* pass = nullptr) {
  int ok = 0;
  for (int32_t ci : controls) {
    const bool p = probe_fact_check(s.bank, qs, ci, s.probe);
    ok += p;
    if (pass) pass->push_back(p);
  }
  return controls.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(controls.size());
}

// Probe accuracy over the control facts: every hard-negative window in every
// gold position, as in probe_fact_check, scored per example.
double control_probe_accuracy(const RemovalSuite& s, const QuerySplit& qs, const std::vector<int32_t>& controls) {
  const int n = s.probe.n_passages();
  int64_t ok = 0, total = 0;
  for (int32_t ci : controls) {
    const Query& q = qs.queries[static_cast<size_t>(ci)];
    const auto& negs = q.hard_negatives;
    for (size_t start = 0; start < negs.size(); ++start) {
      ExampleSpec spec;
      spec.query = ci;
      spec.candidates.push_back(q.gold);
      for (int k = 0; k < n - 1; ++k) spec.candidates.push_back(negs[(start + static_cast<size_t>(k)) % negs.size()]);
      for (int pos = 0; pos < n; ++pos) {
        ExampleSpec e = spec;
        std::swap(e.candidates[0], e.candidates[static_cast<size_t>(pos)]);
        e.gold_position = pos;
        ok += s.probe.predict(extract_features(s.bank, e, s.probe.layer())) == pos;
        ++total;
      }
    }
  }
  return total ? static_cast<double>(ok) / static_cast<double>(total) : 0.0;
}

void stage_edit(Pipeline::Context& ctx) {
  const auto enc = ctx.enc();
  const auto& kb = ctx.kb();
  const auto& qs = ctx.qs();
  const auto& pre = ctx.model(kPretrained);
  const auto& dq = ctx.model(kDprQuery);
  const auto& dc = ctx.model(kDprContext);
  const ProbeConfig pc = ctx.cfg.probe_config();
  const EditConfig ec = ctx.cfg.edit_config();
  const auto di = build_index(dc, enc, kb.vocab, kb.passages, "dpr", ctx.workers);
  const RemovalSuite base = build_removal_suite(pre, pre, enc, kb, qs, pc, ctx.cfg.probe_replicates, ctx.workers);

  // Cohort: facts the pretrained model completes, the DPR retriever answers
  // top-1 and the pretrained probe matches. Controls: untouched facts.
  std::vector<int32_t> order(qs.queries.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int32_t>(i);
  Rng rng = Rng(ctx.cfg.seed).fork(51);
  rng.shuffle(order);
  std::vector<int32_t> cohort, controls;
  for (int32_t qi : order) {
    const Query& q = qs.queries[static_cast<size_t>(qi)];
    const FactTriple& f = q.answer_fact;
    if (static_cast<int>(cohort.size()) < ctx.cfg.edit_cohort) {
      const bool mlm_ok =
          predict_object(pre, enc, kb, f.subject, f.relation) == kb.vocab.id(kb.surface(f.object));
      if (mlm_ok && dpr_top1(di, dq, enc, kb, q) && probe_fact_check(base.bank, qs, qi, base.probe)) {
        cohort.push_back(qi);
        continue;
      }
    }
    if (static_cast<int>(controls.size()) < ctx.cfg.edit_control_facts) controls.push_back(qi);
  }
  if (cohort.empty()) throw DataError("edit cohort is empty: no fact passes all three checks");
  spdlog::info("edit: cohort {} facts, {} controls", cohort.size(), controls.size());
  std::vector<char> base_pass;
  const double base_strict = control_accuracy(base, qs, controls, &base_pass);
  const double base_acc = control_probe_accuracy(base, qs, controls);

  // Unedited soundness: the base suite never declares a cohort fact removed
  // by construction, so an independently seeded suite is also checked.
  ProbeConfig pc2 = pc;
  pc2.seed = pc.seed + 7919;
  const RemovalSuite alt = build_removal_suite(pre, pre, enc, kb, qs, pc2, ctx.cfg.probe_replicates, ctx.workers);
  int unedited_removed = 0, unedited_removed_alt = 0;
  for (int32_t qi : cohort) {
    unedited_removed += removal_check(base, pre, enc, kb, qs, qi).removed;
    unedited_removed_alt += removal_check(alt, pre, enc, kb, qs, qi).removed;
  }

  std::vector<EditRow> rows;
  for (EditMethod method : kMethods) {
    for (size_t k = 0; k < cohort.size(); ++k) {
      const int32_t qi = cohort[k];
      const FactTriple& f = qs.queries[static_cast<size_t>(qi)].answer_fact;
      const EditRequest req = make_edit_request(kb, f, method);
      EditOutcome out = apply_edit(pre, enc, kb, req, ec);
      EditRow r;
      r.method = edit_method_name(method);
      r.fact_id = f.id;
      r.query_index = qi;
      r.false_object = req.false_object;
      r.converged = out.converged;
      r.steps = out.steps;
      r.lr = out.lr;
      r.frozen_identical = frozen_regions_identical(pre, out.edited, out.trainable);
      r.masked_flip = predict_object(out.edited, enc, kb, f.subject, f.relation) ==
                      kb.vocab.id(kb.surface(req.false_object));
      const RemovalSuite suite =
          build_removal_suite(out.edited, out.edited, enc, kb, qs, pc, ctx.cfg.probe_replicates, ctx.workers);
      const RemovalResult rr = removal_check(suite, out.edited, enc, kb, qs, qi);
      r.removed = rr.removed;
      r.masked_prefers_true = rr.masked_prefers_true;
      std::vector<char> pass;
      r.locality_base = base_acc;
      r.locality_edited = control_probe_accuracy(suite, qs, controls);
      r.strict_base = base_strict;
      r.strict_edited = control_accuracy(suite, qs, controls, &pass);
      for (size_t c = 0; c < controls.size(); ++c)
        if (base_pass[c]) {
          ++r.control_checked;
          r.control_false_positives += !pass[c];
        }
      spdlog::info("edit: {} {}/{} fact {} converged={} steps={} removed={}", r.method, k + 1, cohort.size(),
                   f.id, r.converged, r.steps, r.removed);
      rows.push_back(r);
    }
  }

  std::ostringstream csv;
  csv << "method,fact_id,query_index,false_object,converged,steps,lr,frozen_identical,masked_flip,removed,"
         "masked_prefers_true,locality_base,locality_edited,locality_delta,strict_pass_base,strict_pass_edited,"
         "control_checked,control_false_positives\n";
  json jrows = json::array();
  json methods = json::object();
  for (const auto& r : rows) {
    csv << r.method << ',' << r.fact_id << ',' << r.query_index << ',' << r.false_object << ',' << r.converged
        << ',' << r.steps << ',' << r.lr << ',' << r.frozen_identical << ',' << r.masked_flip << ',' << r.removed
        << ',' << r.masked_prefers_true << ',' << r.locality_base << ',' << r.locality_edited << ','
        << r.locality_base - r.locality_edited << ',' << r.strict_base << ',' << r.strict_edited << ','
        << r.control_checked << ',' << r.control_false_positives
        << '\n';
    jrows.push_back(edit_row_json(r));
  }
  for (EditMethod method : kMethods) {
    const std::string name = edit_method_name(method);
    int n = 0, conv = 0, frozen = 0, flip = 0, removed = 0, both = 0, agree = 0, checked = 0, fps = 0;
    double max_delta = -1.0, sum_delta = 0.0, sum_steps = 0.0, max_strict = -1.0;
    for (const auto& r : rows) {
      if (r.method != name) continue;
      ++n;
      conv += r.converged;
      frozen += r.frozen_identical;
      flip += r.masked_flip;
      removed += r.removed;
      both += r.removed && r.masked_flip;
      agree += r.removed == !r.masked_prefers_true;
      checked += r.control_checked;
      fps += r.control_false_positives;
      const double d = r.locality_base - r.locality_edited;
      max_delta = std::max(max_delta, d);
      max_strict = std::max(max_strict, r.strict_base - r.strict_edited);
      sum_delta += d;
      sum_steps += r.steps;
    }
    methods[name] = {{"n_edits", n},
                     {"converged", conv},
                     {"frozen_identical", frozen},
                     {"masked_flip", flip},
                     {"removed", removed},
                     {"removed_and_flipped", both},
                     {"signal_agreement", n ? static_cast<double>(agree) / n : 0.0},
                     {"mean_steps", n ? sum_steps / n : 0.0},
                     {"max_locality_delta", max_delta},
                     {"mean_locality_delta", n ? sum_delta / n : 0.0},
                     {"max_strict_pass_delta", max_strict},
                     {"control_checked", checked},
                     {"control_false_positives", fps},
                     {"control_false_positive_rate", checked ? static_cast<double>(fps) / checked : 0.0}};
  }
  write_text(ctx.path("edits/edits.csv"), csv.str());
  write_json(ctx.path("edits/summary.json"),
             {{"cohort", cohort},
              {"controls", controls},
              {"control_base_accuracy", base_acc},
              {"control_base_strict_pass", base_strict},
              {"unedited_removed", unedited_removed},
              {"unedited_removed_independent_probe", unedited_removed_alt},
              {"unedited_false_positive_rate_independent_probe",
               static_cast<double>(unedited_removed_alt) / static_cast<double>(cohort.size())},
              {"methods", methods},
              {"edits", jrows}});
}

struct Table3Fact {
  std::string method;
  int32_t fact_id, query_index;
  int group;
  bool gate_both, gate_masked;
  bool still_flipped = false;
  bool dpr_valid = false;
  bool top1_after_dpr = false;
  bool probe_removed_after_dpr = false;
};

void stage_table3(Pipeline::Context& ctx) {
  const auto enc = ctx.enc();
  const auto& kb = ctx.kb();
  const auto& qs = ctx.qs();
  const auto& pre = ctx.model(kPretrained);
  const ProbeConfig pc = ctx.cfg.probe_config();
  const EditConfig ec = ctx.cfg.edit_config();
  const TrainConfig dcfg = ctx.cfg.dpr_config();
  const json edits = json::parse(read_text(ctx.path("edits/summary.json")));

  std::vector<Table3Fact> facts;
  int group_id = 0;
  for (EditMethod method : kMethods) {
    const std::string name = edit_method_name(method);
    std::vector<Table3Fact> gated;
    for (const auto& e : edits.at("edits")) {
      if (e.at("method").get<std::string>() != name) continue;
      const bool masked = e.at("converged").get<bool>() && e.at("masked_flip").get<bool>();
      if (!masked) continue;
      gated.push_back({name, e.at("fact_id").get<int32_t>(), e.at("query_index").get<int32_t>(), -1,
                       masked && e.at("removed").get<bool>(), masked});
    }
    // Edits are applied cumulatively within a group; one DPR run per group.
    for (size_t start = 0; start < gated.size(); start += static_cast<size_t>(ctx.cfg.edit_group_size), ++group_id) {
      const size_t end = std::min(gated.size(), start + static_cast<size_t>(ctx.cfg.edit_group_size));
      ParamStore model = pre;
      for (size_t i = start; i < end; ++i) {
        gated[i].group = group_id;
        EditOutcome out = apply_edit(model, enc, kb, make_edit_request(kb, kb.fact(gated[i].fact_id), method), ec);
        model = std::move(out.edited);
      }
      for (size_t i = start; i < end; ++i) {
        const FactTriple& f = kb.fact(gated[i].fact_id);
        const int32_t fo = counterfactual(kb, f).false_object;
        gated[i].still_flipped = predict_object(model, enc, kb, f.subject, f.relation) == kb.vocab.id(kb.surface(fo));
      }
      spdlog::info("table3: {} group {} ({} edits), dpr fine-tune", name, group_id, end - start);
      std::optional<DualEncoder> d;
      try {
        d = dpr_finetune(model, enc, kb, qs.train(), dcfg);
      } catch (const TrainingError& e) {
        spdlog::warn("table3: group {} dpr diverged: {}", group_id, e.what());
      }
      if (!d) continue;
      const auto idx = build_index(d->context, enc, kb.vocab, kb.passages, "dpr-edited", ctx.workers);
      const RemovalSuite suite =
          build_removal_suite(d->query, d->context, enc, kb, qs, pc, ctx.cfg.probe_replicates, ctx.workers);
      for (size_t i = start; i < end; ++i) {
        const Query& q = qs.queries[static_cast<size_t>(gated[i].query_index)];
        gated[i].dpr_valid = true;
        gated[i].top1_after_dpr = dpr_top1(idx, d->query, enc, kb, q);
        gated[i].probe_removed_after_dpr = !probe_fact_check(suite.bank, qs, gated[i].query_index, suite.probe);
      }
    }
    facts.insert(facts.end(), gated.begin(), gated.end());
  }

  // Unedited control: the cohort through the unedited DPR model (the dpr
  // stage output is the same recipe on the same pretrained model).
  const auto& dq = ctx.model(kDprQuery);
  const auto& dc = ctx.model(kDprContext);
  const auto cidx = build_index(dc, enc, kb.vocab, kb.passages, "dpr", ctx.workers);
  const RemovalSuite csuite = build_removal_suite(dq, dc, enc, kb, qs, pc, ctx.cfg.probe_replicates, ctx.workers);
  std::vector<Table3Fact> control;
  for (const auto& qi_j : edits.at("cohort")) {
    const int32_t qi = qi_j.get<int32_t>();
    const Query& q = qs.queries[static_cast<size_t>(qi)];
    Table3Fact t{"unedited", q.answer_fact.id, qi, -1, true, true};
    t.still_flipped = false;
    t.dpr_valid = true;
    t.top1_after_dpr = dpr_top1(cidx, dq, enc, kb, q);
    t.probe_removed_after_dpr = !probe_fact_check(csuite.bank, qs, qi, csuite.probe);
    control.push_back(t);
  }

  auto n_attempted = [&](const std::string& name) {
    int n = 0;
    for (const auto& e : edits.at("edits")) n += e.at("method").get<std::string>() == name;
    return n;
  };
  json summary = json::object();
  auto table = [&](bool masked_gate) {
    std::ostringstream os;
    os << "method,n_edited,n_removed_pretrained,n_removed_after_dpr,rate,ci_low,ci_high\n";
    json jrows = json::array();
    auto emit = [&](const std::string& tag, int n_edited, const std::vector<Table3Fact>& rows, bool probe_signal,
                    bool use_gate) {
      int64_t n = 0, k = 0;
      for (const auto& f : rows) {
        const bool gate = !use_gate || (masked_gate ? f.gate_masked : f.gate_both);
        if (!gate || !f.dpr_valid) continue;
        ++n;
        k += probe_signal ? f.probe_removed_after_dpr : !f.top1_after_dpr;
      }
      double rate = std::numeric_limits<double>::quiet_NaN();
      Interval ci{rate, rate};
      if (n > 0) {
        rate = static_cast<double>(k) / static_cast<double>(n);
        ci = binomial_ci(k, n);
      }
      os << tag << ',' << n_edited << ',' << n << ',' << k << ',' << fmt_rate(rate) << ',' << fmt_rate(ci.low)
         << ',' << fmt_rate(ci.high) << '\n';
      jrows.push_back({{"method", tag},
                       {"n_edited", n_edited},
                       {"n_removed_pretrained", n},
                       {"n_removed_after_dpr", k},
                       {"rate", rate_json(rate)},
                       {"ci_low", rate_json(ci.low)},
                       {"ci_high", rate_json(ci.high)}});
    };
    for (EditMethod method : kMethods) {
      const std::string name = edit_method_name(method);
      std::vector<Table3Fact> rows;
      for (const auto& f : facts)
        if (f.method == name) rows.push_back(f);
      emit(name + "/probe", n_attempted(name), rows, true, true);
      emit(name + "/retrieval", n_attempted(name), rows, false, true);
    }
    emit("unedited/probe", 0, control, true, false);
    emit("unedited/retrieval", 0, control, false, false);
    summary[masked_gate ? "masked_gate" : "both_signals"] = jrows;
    return os.str();
  };
  write_text(ctx.path("table3/table3.csv"), table(false));
  write_text(ctx.path("table3/table3_masked_gate.csv"), table(true));

  std::ostringstream fcsv;
  fcsv << "method,fact_id,query_index,group,gate_both,gate_masked,still_flipped,dpr_valid,top1_after_dpr,"
          "probe_removed_after_dpr\n";
  for (const auto* list : {&facts, &control})
    for (const auto& f : *list)
      fcsv << f.method << ',' << f.fact_id << ',' << f.query_index << ',' << f.group << ',' << f.gate_both << ','
           << f.gate_masked << ',' << f.still_flipped << ',' << f.dpr_valid << ',' << f.top1_after_dpr << ','
           << f.probe_removed_after_dpr << '\n';
  write_text(ctx.path("table3/facts.csv"), fcsv.str());
  summary["group_size"] = ctx.cfg.edit_group_size;
  write_json(ctx.path("table3/summary.json"), summary);
}

void copy_file(Pipeline::Context& ctx, const std::string& from, const std::string& to) {
  write_text(ctx.path(to), read_text(ctx.path(from)));
}

void stage_report(Pipeline::Context& ctx) {
  copy_file(ctx, "probe/table1.csv", "report/table1_probe.csv");
  copy_file(ctx, "attribution/profile_query.csv", "report/figure1_profile.csv");
  copy_file(ctx, "retrieval/table2.csv", "report/table2_retrieval.csv");
  copy_file(ctx, "table3/table3.csv", "report/table3_removal.csv");
  copy_file(ctx, "attribution/profile_query.dat", "report/figure1_query.dat");
  copy_file(ctx, "attribution/profile_context.dat", "report/figure1_context.dat");

  const json probe = json::parse(read_text(ctx.path("probe/summary.json")));
  const json attr = json::parse(read_text(ctx.path("attribution/summary.json")));
  const json retr = json::parse(read_text(ctx.path("retrieval/summary.json")));
  const json edit = json::parse(read_text(ctx.path("edits/summary.json")));
  const json t3 = json::parse(read_text(ctx.path("table3/summary.json")));
  const int top = probe.at("top_layer").get<int>();

  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "Layerwise probing, top layer " << top << " (held-out accuracy)\n";
  os << "  N   pretrained   dpr      chance\n";
  for (int n : ctx.cfg.probe_ns) {
    double p = NAN, d = NAN;
    for (const auto& r : probe.at("rows")) {
      if (r.at("layer").get<int>() != top || r.at("n_passages").get<int>() != n) continue;
      if (r.at("model_tag") == "pretrained") p = r.at("accuracy").get<double>();
      if (r.at("model_tag") == "dpr") d = r.at("accuracy").get<double>();
    }
    os << "  " << n << "   " << p << "        " << d << "    " << 1.0 / n << '\n';
  }

  os << "\nIntermediate-sublayer neurons above " << attr.at("threshold").get<double>()
     << " x max for any input (query tower, per-input max), per block\n";
  const auto& iq = attr.at("intermediate_any_input_query");
  if (iq.contains("pretrained:per_input") && iq.contains("dpr:per_input")) {
    const auto p = iq.at("pretrained:per_input").get<std::vector<int64_t>>();
    const auto d = iq.at("dpr:per_input").get<std::vector<int64_t>>();
    int more = 0;
    for (size_t b = 0; b < p.size(); ++b) {
      os << "  block " << b << ": pretrained " << p[b] << ", dpr " << d[b] << '\n';
      more += d[b] > p[b];
    }
    os << "  DPR activates more intermediate neurons than the pretrained model in " << more << " of " << p.size()
       << " blocks\n";
  }
  const auto& ic = attr.at("intermediate_any_input_context");
  if (ic.contains("pretrained:per_input") && ic.contains("dpr:per_input")) {
    const auto p = ic.at("pretrained:per_input").get<std::vector<int64_t>>();
    const auto d = ic.at("dpr:per_input").get<std::vector<int64_t>>();
    os << "  context tower:";
    for (size_t b = 0; b < p.size(); ++b) os << " block " << b << " " << p[b] << "->" << d[b] << ';';
    os << '\n';
  }
  os << "  threshold sweep nested for every input: " << (attr.at("nesting_ok").get<bool>() ? "yes" : "no") << '\n';

  os << "\nRetrieval (held-out top-1)\n";
  os << "  pretrained " << retr.at("heldout_top1_pretrained").get<double>() << ", dpr "
     << retr.at("heldout_top1_dpr").get<double>() << ", delta " << retr.at("heldout_delta").get<double>() << '\n';
  os << "  mean strong neurons per query: pretrained " << retr.at("mean_strong_pretrained").get<double>()
     << ", dpr " << retr.at("mean_strong_dpr").get<double>() << '\n';

  os << "\nEdits\n";
  for (const auto& [name, m] : edit.at("methods").items()) {
    os << "  " << name << ": " << m.at("converged").get<int>() << "/" << m.at("n_edits").get<int>()
       << " flipped, mean steps " << m.at("mean_steps").get<double>() << ", removed by probe "
       << m.at("removed").get<int>() << ", max locality delta " << m.at("max_locality_delta").get<double>()
       << ", control false positives " << m.at("control_false_positive_rate").get<double>() << '\n';
  }
  os << "\nRemoval after DPR (gate: probe failure and masked flip)\n";
  for (const auto& r : t3.at("both_signals"))
    os << "  " << r.at("method").get<std::string>() << ": " << r.at("n_removed_after_dpr").get<int>() << "/"
       << r.at("n_removed_pretrained").get<int>() << '\n';
  os << "Removal after DPR (gate: masked flip only)\n";
  for (const auto& r : t3.at("masked_gate"))
    os << "  " << r.at("method").get<std::string>() << ": " << r.at("n_removed_after_dpr").get<int>() << "/"
       << r.at("n_removed_pretrained").get<int>() << '\n';
  write_text(ctx.path("report/summary.txt"), os.str());
}

struct StageSpec {
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<std::string> section;
  std::function<void(Pipeline::Context&)> body;
};

const std::map<std::string, StageSpec>& stage_specs() {
  static const std::map<std::string, StageSpec> specs = [] {
    const std::vector<std::string> corpus = {kPassages, kQueries};
    auto with = [&](std::vector<std::string> extra) {
      std::vector<std::string> v = corpus;
      v.insert(v.end(), extra.begin(), extra.end());
      return v;
    };
    const std::vector<std::string> models = {kPretrained, kDprQuery, kDprContext};
    std::map<std::string, StageSpec> s;
    s["corpus"] = {{}, corpus, {"seed", "corpus."}, stage_corpus};
    s["pretrain"] = {corpus,
                     {kPretrained, "metrics/mlm.csv", "metrics/mlm_summary.json"},
                     {"seed", "encoder.", "mlm."},
                     stage_pretrain};
    s["dpr"] = {with({kPretrained}), {kDprQuery, kDprContext, "metrics/dpr.csv"}, {"seed", "dpr."}, stage_dpr};
    s["probe"] = {with(models), {"probe/table1.csv", "probe/summary.json"}, {"seed", "probe."}, stage_probe};
    s["attribute"] = {with(models),
                      {"attribution/maps_query_pretrained.json", "attribution/maps_query_dpr.json",
                       "attribution/maps_context_pretrained.json", "attribution/maps_context_dpr.json",
                       "attribution/profile_query.csv", "attribution/profile_query.dat",
                       "attribution/profile_context.csv", "attribution/profile_context.dat",
                       "attribution/nesting.csv", "attribution/summary.json"},
                      {"seed", "attribution."},
                      stage_attribute};
    s["retrieve"] = {with({kPretrained, kDprQuery, kDprContext, "attribution/maps_query_pretrained.json",
                           "attribution/maps_query_dpr.json"}),
                     {"index/pretrained.ridx", "index/dpr.ridx", "retrieval/table2.csv", "retrieval/summary.json"},
                     {"seed", "attribution."},
                     stage_retrieve};
    s["edit"] = {with(models), {"edits/edits.csv", "edits/summary.json"}, {"seed", "edit.", "probe."}, stage_edit};
    s["table3"] = {with({kPretrained, kDprQuery, kDprContext, "edits/summary.json"}),
                   {"table3/table3.csv", "table3/table3_masked_gate.csv", "table3/facts.csv", "table3/summary.json"},
                   {"seed", "edit.", "dpr.", "probe."},
                   stage_table3};
    s["report"] = {{"probe/table1.csv", "probe/summary.json", "attribution/profile_query.csv",
                    "attribution/profile_query.dat", "attribution/profile_context.dat", "attribution/summary.json",
                    "retrieval/table2.csv", "retrieval/summary.json", "edits/summary.json", "table3/table3.csv",
                    "table3/summary.json"},
                   {"report/table1_probe.csv", "report/figure1_profile.csv", "report/table2_retrieval.csv",
                    "report/table3_removal.csv", "report/figure1_query.dat", "report/figure1_context.dat",
                    "report/summary.txt"},
                   {"probe.ns"},
                   stage_report};
    return s;
  }();
  return specs;
}

std::string producer_of(const std::string& path) {
  for (const auto& [name, spec] : stage_specs())
    if (std::find(spec.outputs.begin(), spec.outputs.end(), path) != spec.outputs.end()) return name;
  return "?";
}

}  // namespace

Pipeline::Pipeline(RunConfig cfg, std::string out_dir, int workers)
    : cfg_(std::move(cfg)), out_(std::move(out_dir)), workers_(workers) {
  cfg_.validate();
  if (workers_ < 1) throw ConfigError("workers must be >= 1");
  const std::string mpath = (fs::path(out_) / "manifest.json").string();
  if (fs::exists(mpath)) {
    try {
      manifest_ = RunManifest::from_json(read_text(mpath));
    } catch (const FormatError& e) {
      spdlog::warn("ignoring unreadable manifest: {}", e.what());
      manifest_ = RunManifest{};
    }
  }
}

RunManifest Pipeline::run(const std::vector<std::string>& stages) {
  std::set<std::string> wanted;
  for (const auto& s : stages) {
    if (std::find(kStages.begin(), kStages.end(), s) == kStages.end()) throw ConfigError("unknown stage '" + s + "'");
    wanted.insert(s);
  }
  fs::create_directories(out_);
  const std::string canonical = cfg_.canonical();
  write_text((fs::path(out_) / "config.txt").string(), canonical);
  manifest_.config_hash = sha256_hex(canonical);
  manifest_.files = {{"config.txt", manifest_.config_hash}};
  Context ctx{cfg_, out_, workers_, {}, {}, {}};
  failed_.clear();
  for (const auto& name : kStages) {
    if (!wanted.empty() && !wanted.count(name)) continue;
    try {
      run_stage(name, ctx);
    } catch (...) {
      failed_ = name;
      throw;
    }
  }
  return manifest_;
}

void Pipeline::run_stage(const std::string& name, Context& ctx) {
  const StageSpec& spec = stage_specs().at(name);
  StageRecord rec;
  rec.name = name;
  std::string key_text = name + "\n" + cfg_.section(spec.section);
  for (const auto& in : spec.inputs) {
    const std::string p = ctx.path(in);
    if (!fs::exists(p))
      throw DependencyError("stage " + name + " needs " + in + " (produced by stage " + producer_of(in) + ")");
    rec.inputs[in] = sha256_file(p);
    key_text += in + "=" + rec.inputs[in] + "\n";
  }
  rec.key = sha256_hex(key_text);

  if (const StageRecord* old = manifest_.find(name); old && old->key == rec.key) {
    bool intact = true;
    for (const auto& [p, h] : old->outputs)
      if (!fs::exists(ctx.path(p)) || sha256_file(ctx.path(p)) != h) intact = false;
    if (intact) {
      spdlog::info("stage {}: cached", name);
      return;
    }
  }

  spdlog::info("stage {}: running", name);
  for (const auto& o : spec.outputs) fs::create_directories(fs::path(ctx.path(o)).parent_path());
  const auto t0 = std::chrono::steady_clock::now();
  spec.body(ctx);
  rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& o : spec.outputs) {
    const std::string p = ctx.path(o);
    if (!fs::exists(p)) throw IoError("stage " + name + " did not produce " + o);
    rec.outputs[o] = sha256_file(p);
  }
  spdlog::info("stage {}: done in {:.1f}s", name, rec.wall_time_s);

  // Keep records in pipeline order.
  auto pos = std::find(kStages.begin(), kStages.end(), name) - kStages.begin();
  auto it = std::find_if(manifest_.stages.begin(), manifest_.stages.end(), [&](const StageRecord& s) {
    return std::find(kStages.begin(), kStages.end(), s.name) - kStages.begin() >= pos;
  });
  if (it != manifest_.stages.end() && it->name == name) *it = rec;
  else manifest_.stages.insert(it, rec);
  write_text((fs::path(out_) / "manifest.json").string(), manifest_.to_json());
}

}  // namespace rlab
