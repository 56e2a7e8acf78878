#include "rlab/encoder.hpp"

#include <algorithm>
#include <cstring>

#include "rlab/parallel.hpp"

namespace rlab {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("encoder config: " + m); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_intermediate < 1) fail("d_intermediate must be positive");
  if (max_seq < 2) fail("max_seq must be >= 2");
  if (vocab_size <= kNumReserved) fail("vocab_size must exceed the reserved ids");
}

// ---------------------------------------------------------------------------

void ParamStore::add(std::string name, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  Tensor grad(value.shape(), 0.0f);
  value.requires_grad = true;
  entries_.push_back(Entry{std::move(name), std::move(value), std::move(grad)});
}

size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ReferenceError("unknown parameter " + name);
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

int64_t ParamStore::parameter_count() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0f);
}

bool ParamStore::bit_equal(const ParamStore& o) const {
  if (entries_.size() != o.entries_.size()) return false;
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != o.entries_[i].name || !entries_[i].value.bit_equal(o.entries_[i].value)) return false;
  }
  return true;
}

std::vector<std::pair<std::string, Shape>> canonical_manifest(const EncoderConfig& cfg, int n_patch) {
  const int64_t d = cfg.d_model, di = cfg.d_intermediate, v = cfg.vocab_size;
  std::vector<std::pair<std::string, Shape>> m;
  m.push_back({"embed.token", {v, d}});
  m.push_back({"embed.position", {cfg.max_seq, d}});
  m.push_back({"embed.ln.weight", {d}});
  m.push_back({"embed.ln.bias", {d}});
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string b = "block" + std::to_string(i) + ".";
    m.push_back({b + "attn.qkv.weight", {3 * d, d}});
    m.push_back({b + "attn.qkv.bias", {3 * d}});
    m.push_back({b + "attn.out.weight", {d, d}});
    m.push_back({b + "attn.out.bias", {d}});
    m.push_back({b + "ln1.weight", {d}});
    m.push_back({b + "ln1.bias", {d}});
    m.push_back({b + "intermediate.weight", {di, d}});
    m.push_back({b + "intermediate.bias", {di}});
    m.push_back({b + "output.weight", {d, di}});
    m.push_back({b + "output.bias", {d}});
    m.push_back({b + "ln2.weight", {d}});
    m.push_back({b + "ln2.bias", {d}});
  }
  m.push_back({"mlm_head.transform.weight", {d, d}});
  m.push_back({"mlm_head.transform.bias", {d}});
  m.push_back({"mlm_head.ln.weight", {d}});
  m.push_back({"mlm_head.ln.bias", {d}});
  m.push_back({"mlm_head.decoder.weight", {v, d}});
  m.push_back({"mlm_head.decoder.bias", {v}});
  if (n_patch > 0) {
    m.push_back({"patch.key.weight", {n_patch, d}});
    m.push_back({"patch.key.bias", {n_patch}});
    m.push_back({"patch.value.weight", {d, n_patch}});
  }
  return m;
}

ParamStore init_params(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore store;
  for (auto& [name, shape] : canonical_manifest(cfg)) {
    const bool is_gain = name.ends_with("ln.weight") || name.ends_with("ln1.weight") || name.ends_with("ln2.weight");
    const bool is_vector = shape.size() == 1;
    InitScheme scheme = is_gain ? InitScheme::kOnes : (is_vector ? InitScheme::kZeros : InitScheme::kUniformScaled);
    store.add(name, seeded_init(shape, scheme, rng));
  }
  return store;
}

const char* sublayer_name(Sublayer s) { return s == Sublayer::kIntermediate ? "intermediate" : "output"; }

void validate_neuron(const NeuronRef& n, const EncoderConfig& cfg) {
  if (n.layer_index < 0 || n.layer_index >= cfg.n_layers) {
    throw ReferenceError("neuron block " + std::to_string(n.layer_index) + " out of range");
  }
  const int width = n.sublayer == Sublayer::kIntermediate ? cfg.d_intermediate : cfg.d_model;
  if (n.neuron_index < 0 || n.neuron_index >= width) {
    throw ReferenceError(std::string("neuron index ") + std::to_string(n.neuron_index) + " out of range for " +
                         sublayer_name(n.sublayer));
  }
}

void SequenceBatch::append(std::span<const int32_t> seq) {
  tokens.insert(tokens.end(), seq.begin(), seq.end());
  lengths.push_back(static_cast<int32_t>(seq.size()));
}

std::vector<int64_t> SequenceBatch::offsets() const {
  std::vector<int64_t> out;
  out.reserve(lengths.size());
  int64_t off = 0;
  for (int32_t len : lengths) {
    out.push_back(off);
    off += len;
  }
  return out;
}

void validate_tokens(std::span<const int32_t> tokens, const EncoderConfig& cfg) {
  if (tokens.empty() || tokens[0] != kClsId) throw ContractError("sequence must begin with the CLS id");
  if (static_cast<int>(tokens.size()) > cfg.max_seq) {
    throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  for (int32_t t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw VocabError("token id " + std::to_string(t) + " not in vocabulary");
  }
}

// ---------------------------------------------------------------------------

EncoderGraph::EncoderGraph(Graph& g, const ParamStore& store, const EncoderConfig& cfg) : g_(g), cfg_(cfg) {
  bind(store, nullptr, {});
}

EncoderGraph::EncoderGraph(Graph& g, ParamStore& store, const EncoderConfig& cfg, bool trainable,
                           const std::vector<std::string>& frozen)
    : g_(g), cfg_(cfg) {
  bind(store, trainable ? &store : nullptr, frozen);
}

void EncoderGraph::bind(const ParamStore& store, ParamStore* grads, const std::vector<std::string>& frozen) {
  for (size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entries()[i];
    Tensor* grad = nullptr;
    if (grads && std::find(frozen.begin(), frozen.end(), e.name) == frozen.end()) {
      grad = &grads->entries()[i].grad;
    }
    vars_.emplace(e.name, g_.param(e.value, grad));
  }
  has_patch_ = store.has_patch();
}

Var EncoderGraph::p(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ReferenceError("parameter " + name + " not bound");
  return it->second;
}

Var EncoderGraph::embed(const SequenceBatch& batch) {
  std::vector<int32_t> positions;
  positions.reserve(batch.tokens.size());
  for (int32_t len : batch.lengths) {
    if (len > cfg_.max_seq) throw LengthError("sequence exceeds max_seq");
    for (int32_t t = 0; t < len; ++t) positions.push_back(t);
  }
  Var tok = g_.embedding(p("embed.token"), batch.tokens);
  Var pos = g_.embedding(p("embed.position"), positions);
  return g_.layer_norm(g_.add(tok, pos), p("embed.ln.weight"), p("embed.ln.bias"));
}

Var EncoderGraph::attention_sublayer(int block, Var x, std::span<const int32_t> lengths) {
  const std::string b = "block" + std::to_string(block) + ".";
  Var qkv = g_.linear(x, p(b + "attn.qkv.weight"), p(b + "attn.qkv.bias"));
  Var ctx = g_.attention(qkv, lengths, cfg_.n_heads);
  Var a = g_.linear(ctx, p(b + "attn.out.weight"), p(b + "attn.out.bias"));
  return g_.layer_norm(g_.add(x, a), p(b + "ln1.weight"), p(b + "ln1.bias"));
}

Var EncoderGraph::intermediate_pre(int block, Var x1) {
  const std::string b = "block" + std::to_string(block) + ".";
  return g_.linear(x1, p(b + "intermediate.weight"), p(b + "intermediate.bias"));
}

Var EncoderGraph::output_pre(int block, Var h) {
  const std::string b = "block" + std::to_string(block) + ".";
  return g_.linear(h, p(b + "output.weight"), p(b + "output.bias"));
}

Var EncoderGraph::add_patch(int block, Var x1, Var y) {
  if (!has_patch_ || block != cfg_.n_layers - 1) return y;
  Var hp = g_.gelu(g_.linear(x1, p("patch.key.weight"), p("patch.key.bias")));
  return g_.add(y, g_.matmul(hp, p("patch.value.weight"), /*transpose_b=*/true));
}

Var EncoderGraph::finish_block(int block, Var x1, Var y) {
  const std::string b = "block" + std::to_string(block) + ".";
  return g_.layer_norm(g_.add(x1, y), p(b + "ln2.weight"), p(b + "ln2.bias"));
}

Var EncoderGraph::scale_column(Var x, int col, float alpha) {
  const Tensor& X = g_.value(x);
  Tensor mask(X.shape(), 1.0f);
  for (int64_t r = 0; r < X.rows(); ++r) mask.at(r, col) = alpha;
  return g_.mul(x, g_.input(std::move(mask)));
}

Var EncoderGraph::pool(Var x, std::span<const int32_t> lengths) {
  if (cfg_.pooling == Pooling::kCls) {
    std::vector<int64_t> rows;
    rows.reserve(lengths.size());
    int64_t off = 0;
    for (int32_t len : lengths) {
      rows.push_back(off);
      off += len;
    }
    return g_.gather_rows(x, rows);
  }
  std::vector<Var> means;
  int64_t off = 0;
  for (int32_t len : lengths) {
    Var seg = g_.slice_rows(x, off, off + len);
    Tensor ones({1, len}, 1.0f / static_cast<float>(len));
    means.push_back(g_.matmul(g_.input(std::move(ones)), seg));
    off += len;
  }
  return g_.concat_rows(means);
}

Var EncoderGraph::run_blocks(int first_block, Var x, std::span<const int32_t> lengths, std::vector<Var>* pooled) {
  for (int b = first_block; b < cfg_.n_layers; ++b) {
    Var x1 = attention_sublayer(b, x, lengths);
    Var h = g_.gelu(intermediate_pre(b, x1));
    Var y = add_patch(b, x1, output_pre(b, h));
    x = finish_block(b, x1, y);
    if (pooled) pooled->push_back(pool(x, lengths));
  }
  return x;
}

EncoderGraph::Outputs EncoderGraph::forward(const SequenceBatch& batch, const ScaledNeuron* scaled) {
  Outputs out;
  Var x = embed(batch);
  out.pooled.push_back(pool(x, batch.lengths));
  for (int b = 0; b < cfg_.n_layers; ++b) {
    const bool here = scaled && scaled->neuron.layer_index == b;
    Var x1 = attention_sublayer(b, x, batch.lengths);
    Var z = intermediate_pre(b, x1);
    if (here && scaled->neuron.sublayer == Sublayer::kIntermediate) {
      z = scale_column(z, scaled->neuron.neuron_index, scaled->alpha);
    }
    Var y = output_pre(b, g_.gelu(z));
    if (here && scaled->neuron.sublayer == Sublayer::kOutput) {
      y = scale_column(y, scaled->neuron.neuron_index, scaled->alpha);
    }
    x = finish_block(b, x1, add_patch(b, x1, y));
    out.pooled.push_back(pool(x, batch.lengths));
  }
  out.hidden = x;
  return out;
}

Var EncoderGraph::mlm_logits(Var hidden, std::span<const int64_t> rows) {
  Var sel = g_.gather_rows(hidden, rows);
  Var t = g_.gelu(g_.linear(sel, p("mlm_head.transform.weight"), p("mlm_head.transform.bias")));
  t = g_.layer_norm(t, p("mlm_head.ln.weight"), p("mlm_head.ln.bias"));
  return g_.linear(t, p("mlm_head.decoder.weight"), p("mlm_head.decoder.bias"));
}

// ---------------------------------------------------------------------------

namespace {

Encoding encode_impl(std::span<const int32_t> tokens, const ParamStore& params, const EncoderConfig& cfg,
                     const ScaledNeuron* scaled) {
  validate_tokens(tokens, cfg);
  Graph g;
  EncoderGraph enc(g, params, cfg);
  SequenceBatch batch;
  batch.append(tokens);
  auto out = enc.forward(batch, scaled);
  Encoding e;
  e.features.reserve(out.pooled.size());
  for (Var v : out.pooled) e.features.push_back(g.value(v).vec());
  e.embedding = e.features.back();
  return e;
}

}  // namespace

Encoding encode(std::span<const int32_t> tokens, const ParamStore& params, const EncoderConfig& cfg) {
  return encode_impl(tokens, params, cfg, nullptr);
}

Encoding encode_with_scaled_neuron(std::span<const int32_t> tokens, const ParamStore& params,
                                   const EncoderConfig& cfg, const NeuronRef& neuron, float alpha) {
  validate_neuron(neuron, cfg);
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw ContractError("alpha must lie in [0, 1]");
  ScaledNeuron s{neuron, alpha};
  return encode_impl(tokens, params, cfg, &s);
}

std::vector<Encoding> encode_all(const std::vector<std::vector<int32_t>>& seqs, const ParamStore& params,
                                 const EncoderConfig& cfg, int workers) {
  std::vector<Encoding> out(seqs.size());
  parallel_for(seqs.size(), workers, [&](size_t i) { out[i] = encode(seqs[i], params, cfg); });
  return out;
}

}  // namespace rlab
