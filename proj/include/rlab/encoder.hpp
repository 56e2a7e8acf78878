#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rlab/graph.hpp"
#include "rlab/rng.hpp"
#include "rlab/tensor.hpp"

namespace rlab {

// Reserved vocabulary ids shared by the tokenizer and the encoder.
inline constexpr int32_t kPadId = 0;
inline constexpr int32_t kUnkId = 1;
inline constexpr int32_t kClsId = 2;
inline constexpr int32_t kSepId = 3;
inline constexpr int32_t kMaskId = 4;
inline constexpr int32_t kNumReserved = 5;

enum class Pooling { kCls, kMean };

struct EncoderConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_intermediate = 256;
  int max_seq = 64;
  int vocab_size = 0;
  Pooling pooling = Pooling::kCls;

  // Throws ConfigError.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

// Named, ordered parameters with gradient buffers.
//
// Canonical order (the checkpoint contract):
//   embed.token, embed.position, embed.ln.weight, embed.ln.bias,
//   then for each block i:
//     block{i}.attn.qkv.{weight,bias}, block{i}.attn.out.{weight,bias},
//     block{i}.ln1.{weight,bias}, block{i}.intermediate.{weight,bias},
//     block{i}.output.{weight,bias}, block{i}.ln2.{weight,bias},
//   mlm_head.transform.{weight,bias}, mlm_head.ln.{weight,bias},
//   mlm_head.decoder.{weight,bias},
//   and, when a layer patch has been applied to the last block,
//   patch.key.weight [P,d], patch.key.bias [P], patch.value.weight [d,P].
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };

  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  size_t index_of(const std::string& name) const;
  Tensor& at(const std::string& name) { return entries_[index_of(name)].value; }
  const Tensor& at(const std::string& name) const { return entries_[index_of(name)].value; }
  Tensor& grad(const std::string& name) { return entries_[index_of(name)].grad; }

  size_t size() const { return entries_.size(); }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<std::string> names() const;
  int64_t parameter_count() const;

  void zero_grad();
  // True when both stores have identical names, order, shapes and bytes.
  bool bit_equal(const ParamStore& o) const;
  bool has_patch() const { return contains("patch.key.weight"); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// The canonical manifest (names + shapes) for a config; `n_patch` > 0 adds
// the patch entries.
std::vector<std::pair<std::string, Shape>> canonical_manifest(const EncoderConfig& cfg, int n_patch = 0);

// Fresh parameters: weights uniform-scaled, biases zero, layer-norm gains one.
ParamStore init_params(const EncoderConfig& cfg, Rng& rng);

enum class Sublayer { kIntermediate, kOutput };
const char* sublayer_name(Sublayer s);

// One output row of a feed-forward linear map.
struct NeuronRef {
  int layer_index = 0;
  Sublayer sublayer = Sublayer::kIntermediate;
  int neuron_index = 0;
  bool operator==(const NeuronRef&) const = default;
};

// Throws ReferenceError when the reference is outside the config's grid.
void validate_neuron(const NeuronRef& n, const EncoderConfig& cfg);

struct ScaledNeuron {
  NeuronRef neuron;
  float alpha = 1.0f;
};

// Packed token sequences: `tokens` is the concatenation, `lengths` the
// per-sequence lengths.
struct SequenceBatch {
  std::vector<int32_t> tokens;
  std::vector<int32_t> lengths;

  void append(std::span<const int32_t> seq);
  size_t count() const { return lengths.size(); }
  // Row offset of the first token of each sequence.
  std::vector<int64_t> offsets() const;
};

// Per-layer pooled vectors: n_layers + 1 entries, entry 0 taken after the
// embedding layer norm.
using LayerFeatures = std::vector<std::vector<float>>;

struct Encoding {
  LayerFeatures features;
  std::vector<float> embedding;  // == features.back()
};

// Graph-building view of an encoder over one ParamStore. With `trainable`
// set, gradients accumulate into the store's grad buffers; `frozen` names are
// bound without gradients.
class EncoderGraph {
 public:
  EncoderGraph(Graph& g, const ParamStore& store, const EncoderConfig& cfg);
  EncoderGraph(Graph& g, ParamStore& store, const EncoderConfig& cfg, bool trainable,
               const std::vector<std::string>& frozen = {});

  struct Outputs {
    Var hidden;               // [total_tokens, d]
    std::vector<Var> pooled;  // n_layers + 1 entries of [n_seq, d]
  };

  Outputs forward(const SequenceBatch& batch, const ScaledNeuron* scaled = nullptr);

  // Stages of one post-LN block, exposed for partial re-evaluation.
  Var embed(const SequenceBatch& batch);
  Var attention_sublayer(int block, Var x, std::span<const int32_t> lengths);
  Var intermediate_pre(int block, Var x1);
  Var output_pre(int block, Var h);
  // Adds the layer patch contribution when `block` is the last block and the
  // store carries one.
  Var add_patch(int block, Var x1, Var y);
  Var finish_block(int block, Var x1, Var y);
  Var pool(Var x, std::span<const int32_t> lengths);
  // Runs blocks [first_block, n_layers) on x.
  Var run_blocks(int first_block, Var x, std::span<const int32_t> lengths, std::vector<Var>* pooled);

  // MLM head over selected rows of the final hidden states -> [rows, vocab].
  Var mlm_logits(Var hidden, std::span<const int64_t> rows);

  Var p(const std::string& name) const;
  Graph& graph() { return g_; }
  const EncoderConfig& config() const { return cfg_; }

 private:
  void bind(const ParamStore& store, ParamStore* grads, const std::vector<std::string>& frozen);
  Var scale_column(Var x, int col, float alpha);

  Graph& g_;
  EncoderConfig cfg_;
  std::unordered_map<std::string, Var> vars_;
  bool has_patch_ = false;
};

// Validates a token sequence against the config: CLS first (ContractError),
// length <= max_seq (LengthError), ids in range (VocabError).
void validate_tokens(std::span<const int32_t> tokens, const EncoderConfig& cfg);

Encoding encode(std::span<const int32_t> tokens, const ParamStore& params, const EncoderConfig& cfg);
Encoding encode_with_scaled_neuron(std::span<const int32_t> tokens, const ParamStore& params,
                                   const EncoderConfig& cfg, const NeuronRef& neuron, float alpha);

// Encodes each sequence independently (results are bit-identical to encode()).
std::vector<Encoding> encode_all(const std::vector<std::vector<int32_t>>& seqs, const ParamStore& params,
                                 const EncoderConfig& cfg, int workers = 1);

}  // namespace rlab
