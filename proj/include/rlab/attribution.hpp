#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rlab/encoder.hpp"

namespace rlab {

enum class Tower { kQuery, kContext };
const char* tower_name(Tower t);

// P_x = <e_query, e_passage> of final pooled embeddings. The scaled neuron
// lives in `tower`; the other tower runs unmodified.
struct AttributionObjective {
  std::vector<int32_t> query;
  std::vector<int32_t> passage;
  Tower tower = Tower::kQuery;
  int32_t input_id = -1;
};

inline const std::vector<double> kSweepThresholds = {0.005, 0.01, 0.05, 0.1, 0.2, 0.3};

struct AttributionConfig {
  int riemann_steps = 20;
  double threshold = 0.1;
  std::vector<double> sweep = kSweepThresholds;
  bool absolute = false;  // threshold |score| instead of the signed score
  int chunk_tokens = 8192;  // rows per batched copy pass
  void validate() const;    // ConfigError
};

// Scores over the full grid: for each block, d_intermediate intermediate
// neurons followed by d_model output neurons.
struct AttributionMap {
  int n_layers = 0, d_model = 0, d_intermediate = 0;
  Tower tower = Tower::kQuery;
  int32_t input_id = -1;
  std::vector<double> scores;

  size_t index(const NeuronRef& n) const;
  double score(const NeuronRef& n) const { return scores.at(index(n)); }
  int width(Sublayer s) const { return s == Sublayer::kIntermediate ? d_intermediate : d_model; }
  NeuronRef neuron_at(size_t i) const;
};

// (1/m) * sum_{k=1..m} f(k/m).
double riemann_mean(const std::function<double(double)>& f, int m);

// P_x(alpha) for one neuron through encode_with_scaled_neuron (reference
// path, one sequence per call).
double objective_value(const AttributionObjective& obj, const ParamStore& query_params,
                       const ParamStore& context_params, const EncoderConfig& cfg, const NeuronRef& n, float alpha);

// score_i = (1/m) sum_k dP/dalpha_i at alpha = k/m, where alpha_i scales the
// neuron's weight row and bias; dP/dalpha is the row-contracted w_i dP/dw_i.
// All (neuron, alpha) copies of one sublayer run as one packed batch.
// Throws NumericError naming the neuron and alpha on a non-finite gradient.
AttributionMap attribute(const AttributionObjective& obj, const ParamStore& query_params,
                         const ParamStore& context_params, const EncoderConfig& cfg, const AttributionConfig& ac);

// dP/dalpha for selected (neuron, alpha) pairs on the batched path.
std::vector<double> path_gradients(const AttributionObjective& obj, const ParamStore& query_params,
                                   const ParamStore& context_params, const EncoderConfig& cfg,
                                   const std::vector<ScaledNeuron>& points, int chunk_tokens = 8192);

struct StrongCount {
  int64_t count = 0;
  bool all_zero = false;  // flagged: the map's max is not positive
};
// Neurons with score >= theta * max(score) over the whole map.
StrongCount strong_neuron_count(const AttributionMap& map, double theta, bool absolute = false);
// Membership mask for the same rule, with an externally supplied max.
std::vector<char> strong_set(const AttributionMap& map, double theta, double max_score, bool absolute = false);

enum class MaxNorm { kPerInput, kPerLayer };
const char* max_norm_name(MaxNorm n);

struct ProfileCell {
  int block;
  Sublayer sublayer;
  double theta;
  int64_t any_input_count;
};

struct ActivationProfile {
  std::string model_tag;
  Tower tower = Tower::kQuery;
  MaxNorm norm = MaxNorm::kPerInput;
  std::vector<ProfileCell> cells;        // block x sublayer x theta
  std::vector<std::vector<int64_t>> per_input_counts;  // [input][theta] over the map
};

// Neurons above theta * max for any input, per (block, sublayer). kPerInput
// takes max over each input's whole map; kPerLayer over every input's scores
// within that (block, sublayer).
ActivationProfile activation_profile(const std::string& model_tag, const std::vector<AttributionMap>& maps,
                                     const std::vector<double>& thetas, MaxNorm norm, bool absolute = false);

// CSV writers: model_tag,tower,block,sublayer,neuron,score (score = max over
// inputs) and model_tag,block,sublayer,theta,any_input_count.
void write_attribution_csv(const std::string& model_tag, const std::vector<AttributionMap>& maps,
                           const std::string& path);
void write_profile_csv(const std::vector<ActivationProfile>& profiles, const std::string& path);
// Whitespace columns: block sublayer theta count_<tag>... for gnuplot.
void write_profile_dat(const std::vector<ActivationProfile>& profiles, const std::string& path);

}  // namespace rlab
