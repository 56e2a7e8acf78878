#include "rlab/trainer.hpp"

#include <spdlog/spdlog.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "rlab/error.hpp"
#include "rlab/hash.hpp"

namespace rlab {

void TrainConfig::validate() const {
  if (!(lr > 0.0f) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
  if (steps <= 0) throw ConfigError("steps must be > 0");
  if (batch_size <= 0) throw ConfigError("batch_size must be > 0");
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must be in (0,1)");
  if (!(object_mask_prob >= 0.0 && object_mask_prob <= 1.0)) throw ConfigError("object_mask_prob must be in [0,1]");
  if (n_hard_negatives < 0) throw ConfigError("n_hard_negatives must be >= 0");
  if (!(temperature > 0.0f)) throw ConfigError("temperature must be > 0");
}

// --- Adam -------------------------------------------------------------------

Adam::Adam(ParamStore& store, float lr, float beta1, float beta2, float eps, std::vector<std::string> frozen)
    : store_(store), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  std::set<std::string> fz(frozen.begin(), frozen.end());
  for (const auto& e : store_.entries()) {
    trainable_.push_back(fz.count(e.name) ? 0 : 1);
    m_.emplace_back(e.value.shape());
    v_.emplace_back(e.value.shape());
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(static_cast<double>(b1_), static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(static_cast<double>(b2_), static_cast<double>(t_));
  const float step_size = static_cast<float>(lr_ / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  auto& entries = store_.entries();
  if (entries.size() != m_.size()) throw ContractError("Adam: parameter store changed shape");
  for (size_t k = 0; k < entries.size(); ++k) {
    if (!trainable_[k]) continue;
    float* w = entries[k].value.data();
    const float* g = entries[k].grad.data();
    float* m = m_[k].data();
    float* v = v_[k].data();
    const int64_t n = entries[k].value.numel();
    for (int64_t i = 0; i < n; ++i) {
      m[i] = b1_ * m[i] + (1.0f - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0f - b2_) * g[i] * g[i];
      w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps_);
    }
  }
}

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "step,loss,accuracy\n";
  os.precision(9);
  for (const auto& r : rows) os << r.step << ',' << r.loss << ',' << r.accuracy << '\n';
}

// --- MLM --------------------------------------------------------------------

double mlm_loss_and_grad(ParamStore& store, const EncoderConfig& enc, const std::vector<MlmExample>& batch,
                         const std::vector<std::string>& frozen, double* accuracy,
                         std::vector<int32_t>* predictions) {
  if (batch.empty()) throw ContractError("empty MLM batch");
  store.zero_grad();
  Graph g;
  EncoderGraph eg(g, store, enc, true, frozen);
  SequenceBatch sb;
  std::vector<int64_t> rows;
  std::vector<int32_t> targets;
  for (const auto& ex : batch) {
    validate_tokens(ex.tokens, enc);
    if (ex.positions.size() != ex.targets.size() || ex.positions.empty())
      throw ContractError("MLM example needs matching, nonempty positions and targets");
    const int64_t off = static_cast<int64_t>(sb.tokens.size());
    sb.append(ex.tokens);
    for (size_t i = 0; i < ex.positions.size(); ++i) {
      if (ex.positions[i] < 0 || ex.positions[i] >= static_cast<int64_t>(ex.tokens.size()))
        throw ContractError("MLM position out of range");
      rows.push_back(off + ex.positions[i]);
      targets.push_back(ex.targets[i]);
    }
  }
  auto out = eg.forward(sb);
  Var logits = eg.mlm_logits(out.hidden, rows);
  Var loss = g.cross_entropy(logits, targets);
  const double l = g.value(loss).item();
  if (accuracy || predictions) {
    const Tensor& lv = g.value(logits);
    int64_t hit = 0;
    if (predictions) predictions->clear();
    for (int64_t r = 0; r < lv.rows(); ++r) {
      const float* row = lv.data() + r * lv.cols();
      const int64_t best = std::max_element(row, row + lv.cols()) - row;
      hit += best == targets[static_cast<size_t>(r)];
      if (predictions) predictions->push_back(static_cast<int32_t>(best));
    }
    if (accuracy) *accuracy = static_cast<double>(hit) / static_cast<double>(lv.rows());
  }
  if (std::isfinite(l)) g.backward(loss);
  return l;
}

namespace {

MlmExample mask_sequence(const std::vector<int32_t>& seq, int64_t object_pos, double p, double p_obj, Rng& rng) {
  MlmExample ex;
  ex.tokens = seq;
  std::vector<int64_t> eligible;
  for (size_t i = 0; i < seq.size(); ++i)
    if (seq[i] >= kNumReserved) eligible.push_back(static_cast<int64_t>(i));
  if (eligible.empty()) return ex;
  const bool force_obj = object_pos >= 0 && rng.bernoulli(p_obj);
  for (int64_t i : eligible) {
    if (rng.bernoulli(p) || (force_obj && i == object_pos)) ex.positions.push_back(i);
  }
  if (ex.positions.empty()) ex.positions.push_back(eligible[rng.below(eligible.size())]);
  for (int64_t i : ex.positions) {
    ex.targets.push_back(seq[static_cast<size_t>(i)]);
    ex.tokens[static_cast<size_t>(i)] = kMaskId;
  }
  return ex;
}

}  // namespace

ParamStore mlm_pretrain(const std::vector<MlmText>& texts, const Vocab& vocab, const EncoderConfig& enc,
                        const TrainConfig& cfg, std::vector<MetricRow>* metrics) {
  cfg.validate();
  enc.validate();
  if (enc.vocab_size != vocab.size())
    throw ConfigError("encoder vocab_size " + std::to_string(enc.vocab_size) + " differs from vocabulary size " +
                      std::to_string(vocab.size()));
  if (texts.empty()) throw DataError("MLM corpus is empty");
  std::vector<std::vector<int32_t>> seqs;
  std::vector<int64_t> obj;
  for (const auto& t : texts) {
    auto s = vocab.encode_text(t.text);
    validate_tokens(s, enc);
    if (t.object_position >= static_cast<int64_t>(s.size())) throw DataError("object position outside text");
    if (s.size() > 2) {
      seqs.push_back(std::move(s));
      obj.push_back(t.object_position);
    }
  }
  if (seqs.empty()) throw DataError("MLM corpus has no maskable tokens");

  Rng rng(cfg.seed);
  Rng init_rng = rng.fork(11);
  Rng data_rng = rng.fork(12);
  ParamStore store = init_params(enc, init_rng);
  Adam opt(store, cfg.lr);
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<MlmExample> batch;
    batch.reserve(static_cast<size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      const size_t k = data_rng.below(seqs.size());
      batch.push_back(mask_sequence(seqs[k], obj[k], cfg.mask_prob, cfg.object_mask_prob, data_rng));
    }
    double acc = 0.0;
    const double loss = mlm_loss_and_grad(store, enc, batch, {}, &acc);
    if (!std::isfinite(loss)) throw TrainingError("MLM loss is non-finite at step " + std::to_string(step));
    opt.step();
    if (metrics) metrics->push_back({step, loss, acc});
    if (cfg.log_every > 0 && step % cfg.log_every == 0) spdlog::info("mlm step {} loss {:.4f} acc {:.3f}", step, loss, acc);
  }
  return store;
}

std::vector<float> masked_logits(const ParamStore& store, const EncoderConfig& enc, std::span<const int32_t> tokens,
                                 int64_t position) {
  validate_tokens(tokens, enc);
  if (position < 0 || position >= static_cast<int64_t>(tokens.size())) throw ContractError("position out of range");
  Graph g;
  EncoderGraph eg(g, store, enc);
  SequenceBatch sb;
  sb.append(tokens);
  auto out = eg.forward(sb);
  const int64_t row = position;
  Var logits = eg.mlm_logits(out.hidden, std::span<const int64_t>(&row, 1));
  const Tensor& v = g.value(logits);
  return {v.data(), v.data() + v.numel()};
}

int32_t predict_masked(const ParamStore& store, const EncoderConfig& enc, std::span<const int32_t> tokens,
                       int64_t position) {
  auto l = masked_logits(store, enc, tokens, position);
  return static_cast<int32_t>(std::max_element(l.begin(), l.end()) - l.begin());
}

int32_t predict_object(const ParamStore& store, const EncoderConfig& enc, const KnowledgeBase& kb, int32_t subject,
                       int32_t relation, int t) {
  int64_t pos = 0;
  auto toks = masked_statement(kb, subject, relation, t, &pos);
  return predict_masked(store, enc, toks, pos);
}

double masked_object_accuracy(const ParamStore& store, const EncoderConfig& enc, const KnowledgeBase& kb,
                              std::span<const FactTriple> facts, int t) {
  if (facts.empty()) return 0.0;
  int64_t hit = 0;
  for (const auto& f : facts) {
    const int32_t pred = predict_object(store, enc, kb, f.subject, f.relation, t);
    hit += pred == kb.vocab.id(kb.surface(f.object));
  }
  return static_cast<double>(hit) / static_cast<double>(facts.size());
}

// --- DPR --------------------------------------------------------------------

Var contrastive_loss(Graph& g, Var q, Var p, std::span<const int32_t> targets, float temperature) {
  if (!(temperature > 0.0f)) throw ContractError("temperature must be > 0");
  const Tensor& qv = g.value(q);
  const Tensor& pv = g.value(p);
  if (qv.cols() != pv.cols()) throw ShapeError("query and passage dims differ");
  if (static_cast<int64_t>(targets.size()) != qv.rows()) throw ShapeError("one target per query required");
  for (int32_t t : targets)
    if (t < 0 || t >= pv.rows()) throw ContractError("target passage index out of range");
  Var sim = g.matmul(q, p, true);
  if (temperature != 1.0f) sim = g.scale(sim, 1.0f / temperature);
  return g.cross_entropy(sim, targets);
}

DualEncoder dpr_finetune(const ParamStore& pretrained, const EncoderConfig& enc, const KnowledgeBase& kb,
                         const std::vector<const Query*>& queries, const TrainConfig& cfg,
                         std::vector<MetricRow>* metrics) {
  cfg.validate();
  if (queries.empty()) throw DataError("no training queries");
  const int32_t n_passages = static_cast<int32_t>(kb.passages.size());
  for (const Query* q : queries) {
    if (q->gold < 0 || q->gold >= n_passages) throw DataError("gold passage missing for query " + std::to_string(q->id));
  }
  std::vector<std::vector<int32_t>> ptoks(kb.passages.size());
  for (size_t i = 0; i < kb.passages.size(); ++i) {
    ptoks[i] = kb.vocab.encode_text(kb.passages[i].text);
    validate_tokens(ptoks[i], enc);
  }
  std::vector<std::vector<int32_t>> qtoks;
  for (const Query* q : queries) {
    qtoks.push_back(kb.vocab.encode_text(q->text));
    validate_tokens(qtoks.back(), enc);
  }

  DualEncoder dual{pretrained, pretrained};
  Adam opt_q(dual.query, cfg.lr);
  Adam opt_c(dual.context, cfg.lr);
  Rng rng = Rng(cfg.seed).fork(21);
  std::vector<size_t> order(queries.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();

  for (int step = 0; step < cfg.steps; ++step) {
    // Queries with distinct gold passages, so every in-batch passage other
    // than the gold is a true negative.
    std::vector<size_t> picked;
    std::set<int32_t> golds;
    size_t scanned = 0;
    while (static_cast<int>(picked.size()) < cfg.batch_size && scanned < order.size()) {
      if (cursor >= order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const size_t qi = order[cursor++];
      ++scanned;
      if (golds.insert(queries[qi]->gold).second) picked.push_back(qi);
    }
    std::vector<int32_t> cand;  // passage ids in first-seen order
    std::unordered_map<int32_t, int32_t> slot;
    auto slot_of = [&](int32_t pid) {
      auto [it, fresh] = slot.emplace(pid, static_cast<int32_t>(cand.size()));
      if (fresh) cand.push_back(pid);
      return it->second;
    };
    std::vector<int32_t> targets;
    for (size_t qi : picked) targets.push_back(slot_of(queries[qi]->gold));
    for (size_t qi : picked) {
      std::vector<int32_t> negs;
      for (int32_t n : queries[qi]->hard_negatives)
        if (!golds.count(n)) negs.push_back(n);
      rng.shuffle(negs);
      for (int k = 0; k < cfg.n_hard_negatives && k < static_cast<int>(negs.size()); ++k) slot_of(negs[static_cast<size_t>(k)]);
    }

    dual.query.zero_grad();
    dual.context.zero_grad();
    Graph g;
    EncoderGraph qg(g, dual.query, enc, true);
    EncoderGraph cg(g, dual.context, enc, true);
    SequenceBatch qb, pb;
    for (size_t qi : picked) qb.append(qtoks[qi]);
    for (int32_t pid : cand) pb.append(ptoks[static_cast<size_t>(pid)]);
    Var qe = qg.forward(qb).pooled.back();
    Var pe = cg.forward(pb).pooled.back();
    Var loss = contrastive_loss(g, qe, pe, targets, cfg.temperature);
    const double l = g.value(loss).item();
    if (!std::isfinite(l)) throw TrainingError("DPR loss is non-finite at step " + std::to_string(step));
    const Tensor& qv = g.value(qe);
    const Tensor& pv = g.value(pe);
    int64_t hit = 0;
    for (int64_t r = 0; r < qv.rows(); ++r) {
      int64_t best = 0;
      double best_s = -INFINITY;
      for (int64_t c = 0; c < pv.rows(); ++c) {
        double s = 0.0;
        for (int64_t k = 0; k < qv.cols(); ++k) s += static_cast<double>(qv.at(r, k)) * pv.at(c, k);
        if (s > best_s) best_s = s, best = c;
      }
      hit += best == targets[static_cast<size_t>(r)];
    }
    g.backward(loss);
    opt_q.step();
    opt_c.step();
    const double acc = static_cast<double>(hit) / static_cast<double>(qv.rows());
    if (metrics) metrics->push_back({step, l, acc});
    if (cfg.log_every > 0 && step % cfg.log_every == 0) spdlog::info("dpr step {} loss {:.4f} acc {:.3f}", step, l, acc);
  }
  return dual;
}

// --- checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'R', 'L', 'A', 'B', '1'};

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    out.append(reinterpret_cast<const char*>(b), sizeof(T));
  } else {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

class Reader {
 public:
  Reader(const std::string& b, size_t end) : b_(b), end_(end) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, b_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    std::memcpy(&v, raw, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  size_t pos() const { return pos_; }
  size_t remaining() const { return end_ - pos_; }

 private:
  void need(size_t n) const {
    if (pos_ + n > end_) throw CorruptionError("checkpoint truncated");
  }
  const std::string& b_;
  size_t end_;
  size_t pos_ = 0;
};

uint32_t crc_of(const char* p, size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
    c = crc32(c, reinterpret_cast<const Bytef*>(p), chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<uint32_t>(c);
}

int patch_width(const ParamStore& params) {
  return params.has_patch() ? static_cast<int>(params.at("patch.key.weight").shape()[0]) : 0;
}

}  // namespace

std::string serialize_checkpoint(const ParamStore& params, const EncoderConfig& cfg) {
  cfg.validate();
  const auto manifest = canonical_manifest(cfg, patch_width(params));
  if (manifest.size() != params.size()) throw FormatError("parameter store does not match the config manifest");
  for (size_t i = 0; i < manifest.size(); ++i) {
    const auto& e = params.entries()[i];
    if (e.name != manifest[i].first || e.value.shape() != manifest[i].second)
      throw FormatError("parameter store does not match the config manifest at " + e.name);
  }
  std::string out(kMagic, sizeof(kMagic));
  put<uint32_t>(out, kCheckpointVersion);
  for (int v : {cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_intermediate, cfg.max_seq, cfg.vocab_size,
                static_cast<int>(cfg.pooling)})
    put<uint32_t>(out, static_cast<uint32_t>(v));
  put<uint32_t>(out, static_cast<uint32_t>(params.size()));
  uint64_t payload = 0;
  for (const auto& e : params.entries()) {
    put<uint32_t>(out, static_cast<uint32_t>(e.name.size()));
    out += e.name;
    put<uint32_t>(out, static_cast<uint32_t>(e.value.shape().size()));
    for (int64_t d : e.value.shape()) put<uint32_t>(out, static_cast<uint32_t>(d));
    payload += static_cast<uint64_t>(e.value.numel()) * sizeof(float);
  }
  put<uint64_t>(out, payload);
  out.reserve(out.size() + payload + 4);
  for (const auto& e : params.entries()) {
    const float* d = e.value.data();
    for (int64_t i = 0; i < e.value.numel(); ++i) put<float>(out, d[i]);
  }
  put<uint32_t>(out, crc_of(out.data(), out.size()));
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw FormatError("not a checkpoint (bad magic)");
  if (bytes.size() < sizeof(kMagic) + 8) throw CorruptionError("checkpoint truncated");
  Reader r(bytes, bytes.size() - 4);
  r.bytes(sizeof(kMagic));
  const uint32_t version = r.get<uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  EncoderConfig cfg;
  cfg.n_layers = static_cast<int>(r.get<uint32_t>());
  cfg.d_model = static_cast<int>(r.get<uint32_t>());
  cfg.n_heads = static_cast<int>(r.get<uint32_t>());
  cfg.d_intermediate = static_cast<int>(r.get<uint32_t>());
  cfg.max_seq = static_cast<int>(r.get<uint32_t>());
  cfg.vocab_size = static_cast<int>(r.get<uint32_t>());
  const uint32_t pooling = r.get<uint32_t>();
  if (pooling > 1) throw FormatError("unknown pooling mode");
  cfg.pooling = static_cast<Pooling>(pooling);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid encoder config in checkpoint: ") + e.what());
  }
  const uint32_t n = r.get<uint32_t>();
  std::vector<std::pair<std::string, Shape>> manifest;
  for (uint32_t i = 0; i < n; ++i) {
    const uint32_t len = r.get<uint32_t>();
    if (len > r.remaining()) throw CorruptionError("checkpoint truncated");
    std::string name = r.bytes(len);
    const uint32_t rank = r.get<uint32_t>();
    if (rank > 8) throw FormatError("implausible tensor rank in manifest");
    Shape s;
    for (uint32_t k = 0; k < rank; ++k) s.push_back(static_cast<int64_t>(r.get<uint32_t>()));
    manifest.emplace_back(std::move(name), std::move(s));
  }
  int n_patch = 0;
  for (const auto& [name, shape] : manifest)
    if (name == "patch.key.weight" && !shape.empty()) n_patch = static_cast<int>(shape[0]);
  if (manifest != canonical_manifest(cfg, n_patch)) throw FormatError("checkpoint manifest is not canonical");
  const uint64_t payload = r.get<uint64_t>();
  uint64_t expect = 0;
  for (const auto& [name, shape] : manifest) expect += static_cast<uint64_t>(shape_numel(shape)) * sizeof(float);
  if (payload != expect) throw FormatError("payload size disagrees with manifest");
  if (r.remaining() != payload) throw CorruptionError("checkpoint payload truncated or padded");
  uint32_t stored_crc = 0;
  {
    Reader tail(bytes, bytes.size());
    tail.bytes(bytes.size() - 4);
    stored_crc = tail.get<uint32_t>();
  }
  if (crc_of(bytes.data(), bytes.size() - 4) != stored_crc) throw CorruptionError("checkpoint checksum mismatch");

  Checkpoint ck;
  ck.config = cfg;
  for (const auto& [name, shape] : manifest) {
    Tensor t(shape);
    float* d = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) d[i] = r.get<float>();
    ck.params.add(name, std::move(t));
  }
  return ck;
}

void save_checkpoint(const ParamStore& params, const EncoderConfig& cfg, const std::string& path) {
  const std::string bytes = serialize_checkpoint(params, cfg);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str());
}

std::string checkpoint_hash(const ParamStore& params, const EncoderConfig& cfg) {
  return sha256_hex(serialize_checkpoint(params, cfg));
}

}  // namespace rlab
