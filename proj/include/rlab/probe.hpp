#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rlab/corpus.hpp"
#include "rlab/encoder.hpp"
#include "rlab/rng.hpp"

namespace rlab {

// Per-layer features of every query (indexed like QuerySplit::queries) and
// every passage, taken from a frozen model. Queries go through the query
// tower, passages through the context tower.
struct FeatureBank {
  int n_layers = 0;
  int d_model = 0;
  std::vector<LayerFeatures> queries;
  std::vector<LayerFeatures> passages;
};

FeatureBank build_feature_bank(const ParamStore& query_model, const ParamStore& context_model,
                               const EncoderConfig& cfg, const KnowledgeBase& kb, const QuerySplit& qs,
                               int workers = 1);

// One N-way example: candidates are passage ids in presentation order.
struct ExampleSpec {
  int32_t query = -1;  // index into QuerySplit::queries
  std::vector<int32_t> candidates;
  int32_t gold_position = 0;
};

struct ProbeDataset {
  int n_passages = 0;
  std::vector<ExampleSpec> train;
  std::vector<ExampleSpec> held_out;
};

// `replicates` examples per query with independently drawn negatives (from
// the query's hard negatives plus random passages). Gold positions are
// balanced over [0, N) within each split and then shuffled. Held-out examples
// come from held-out queries only.
ProbeDataset make_probe_dataset(const KnowledgeBase& kb, const QuerySplit& qs, int n_passages, int replicates,
                                uint64_t seed);

struct ProbeExample {
  std::vector<float> query;
  std::vector<std::vector<float>> candidates;
  int32_t gold_position = 0;
  const std::vector<float>& gold() const { return candidates.at(static_cast<size_t>(gold_position)); }
};

// Throws ReferenceError when layer > n_layers.
ProbeExample extract_features(const FeatureBank& bank, const ExampleSpec& spec, int layer);
std::vector<ProbeExample> extract_features(const FeatureBank& bank, const std::vector<ExampleSpec>& specs, int layer);
// Applies one random permutation to the candidates and tracks the gold.
ProbeExample shuffle_candidates(ProbeExample ex, Rng& rng);

// kConcat: one linear map from [q, c_0, ..., c_{N-1}] ((N+1)*d inputs) to N
// logits. kPairwise: one shared linear scorer over [q, c_j, q*c_j] applied to
// every candidate; permutation-equivariant by construction.
enum class ProbeMode { kConcat, kPairwise };
const char* probe_mode_name(ProbeMode m);

struct ProbeConfig {
  ProbeMode mode = ProbeMode::kPairwise;
  float lr = 1e-2f;
  int epochs = 300;
  int patience = 20;
  double validation_fraction = 0.1;
  uint64_t seed = 0;
};

class Probe {
 public:
  Probe() = default;
  // Seeded untrained probe.
  Probe(int layer, int n_passages, int d_model, ProbeMode mode, uint64_t seed);

  int layer() const { return layer_; }
  int n_passages() const { return n_; }
  int d_model() const { return d_; }
  ProbeMode mode() const { return mode_; }
  bool trained() const { return trained_; }
  int64_t input_width() const;

  // N logits; throws ShapeError on a malformed example.
  std::vector<float> logits(const ProbeExample& ex) const;
  // argmax, first index on ties.
  int32_t predict(const ProbeExample& ex) const;

  std::vector<float>& weights() { return w_; }
  const std::vector<float>& weights() const { return w_; }
  std::vector<float>& bias() { return b_; }

 private:
  friend Probe train_probe(const std::vector<ProbeExample>&, int, int, const ProbeConfig&);
  int layer_ = 0, n_ = 0, d_ = 0;
  ProbeMode mode_ = ProbeMode::kPairwise;
  bool trained_ = false;
  std::vector<float> w_;  // concat: [width, N] row-major; pairwise: [3d]
  std::vector<float> b_;  // concat: [N]; pairwise: unused
};

// Full-batch Adam on cross-entropy with early stopping on a validation split
// carved from `train`; returns the best-validation weights. Throws DataError
// when every example has the same gold position.
Probe train_probe(const std::vector<ProbeExample>& train, int layer, int n_passages, const ProbeConfig& cfg);
double evaluate_probe(const Probe& p, const std::vector<ProbeExample>& examples);

struct ProbeModel {
  std::string tag;
  const ParamStore* query = nullptr;
  const ParamStore* context = nullptr;
  EncoderConfig config;
};

inline constexpr int kUntrainedSeeds = 16;

struct ProbeRow {
  std::string model_tag;
  int n_passages;
  int layer;
  double accuracy;
  int64_t n_examples;
};

// Trains and evaluates a probe per (model, N, layer) on identical datasets.
// With `with_untrained`, also reports under "<tag>/untrained" the mean
// accuracy of kUntrainedSeeds seeded untrained probes. Throws ConfigError when model configs differ.
std::vector<ProbeRow> probe_table(const std::vector<ProbeModel>& models, const KnowledgeBase& kb, const QuerySplit& qs,
                                  const std::vector<int>& ns, const std::vector<int>& layers, const ProbeConfig& cfg,
                                  int replicates = 4, bool with_untrained = true, int workers = 1);
// Columns: model_tag,n_passages,layer,accuracy
void write_probe_table_csv(const std::vector<ProbeRow>& rows, const std::string& path);

// True iff the probe picks the gold passage of query `query_index` against
// every window of its hard negatives, in every gold position.
bool probe_fact_check(const FeatureBank& bank, const QuerySplit& qs, int32_t query_index, const Probe& probe);

}  // namespace rlab
