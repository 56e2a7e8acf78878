#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rlab/corpus.hpp"
#include "rlab/encoder.hpp"

namespace rlab {

enum class Phase { kMlm, kDpr };

struct TrainConfig {
  Phase phase = Phase::kMlm;
  float lr = 1e-3f;
  int batch_size = 32;
  int steps = 1000;
  uint64_t seed = 0;
  double mask_prob = 0.15;        // mlm
  double object_mask_prob = 0.5;  // mlm, extra masking of the object slot
  int n_hard_negatives = 1;  // dpr
  float temperature = 1.0f;  // dpr
  int log_every = 50;
  void validate() const;  // ConfigError
};

// Adam with bias correction over the entries of one ParamStore. Entries named
// in `frozen` are never updated.
class Adam {
 public:
  Adam(ParamStore& store, float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f,
       std::vector<std::string> frozen = {});
  void step();
  int64_t steps_taken() const { return t_; }

 private:
  ParamStore& store_;
  float lr_, b1_, b2_, eps_;
  std::vector<char> trainable_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

struct MetricRow {
  int step;
  double loss;
  double accuracy;
};

// Appends rows as "step,loss,accuracy".
void write_metrics_csv(const std::vector<MetricRow>& rows, const std::string& path);

// Masked-token pretraining over `texts`. Every non-special token is masked
// independently with probability mask_prob (at least one per sequence); the
// object slot of a single-fact text is additionally masked with probability
// object_mask_prob. Throws TrainingError naming the step when the loss
// becomes non-finite.
ParamStore mlm_pretrain(const std::vector<MlmText>& texts, const Vocab& vocab, const EncoderConfig& enc,
                        const TrainConfig& cfg, std::vector<MetricRow>* metrics = nullptr);

// Runs MLM steps on an existing store (used by pretraining and by edits).
struct MlmExample {
  std::vector<int32_t> tokens;  // already masked
  std::vector<int64_t> positions;
  std::vector<int32_t> targets;
};
// One forward/backward pass; returns the mean loss and fills the store's
// gradients (which are zeroed first). `predictions` receives the argmax per
// masked position, in batch order.
double mlm_loss_and_grad(ParamStore& store, const EncoderConfig& enc, const std::vector<MlmExample>& batch,
                         const std::vector<std::string>& frozen = {}, double* accuracy = nullptr,
                         std::vector<int32_t>* predictions = nullptr);

// argmax over the vocabulary at `position`.
int32_t predict_masked(const ParamStore& store, const EncoderConfig& enc, std::span<const int32_t> tokens,
                       int64_t position);
std::vector<float> masked_logits(const ParamStore& store, const EncoderConfig& enc, std::span<const int32_t> tokens,
                                 int64_t position);
// Predicted object for the cloze form of (subject, relation) under template t.
int32_t predict_object(const ParamStore& store, const EncoderConfig& enc, const KnowledgeBase& kb, int32_t subject,
                       int32_t relation, int t = 0);
double masked_object_accuracy(const ParamStore& store, const EncoderConfig& enc, const KnowledgeBase& kb,
                              std::span<const FactTriple> facts, int t = 0);

struct DualEncoder {
  ParamStore query;
  ParamStore context;
};

// Negative log softmax of sim(q_i, p_target[i]) over all passages in the
// batch; sim is the inner product divided by temperature. q is [B,d], p is
// [K,d].
Var contrastive_loss(Graph& g, Var q, Var p, std::span<const int32_t> targets, float temperature = 1.0f);

// DPR-style dual-encoder fine-tuning: in-batch negatives plus
// cfg.n_hard_negatives explicit hard negatives per query. Both towers start as
// copies of `pretrained`. Throws DataError when a gold passage is missing.
DualEncoder dpr_finetune(const ParamStore& pretrained, const EncoderConfig& enc, const KnowledgeBase& kb,
                         const std::vector<const Query*>& queries, const TrainConfig& cfg,
                         std::vector<MetricRow>* metrics = nullptr);

// --- checkpoints ------------------------------------------------------------
//
// Layout (little-endian):
//   "RLAB1" | u32 version | u32 x 7 encoder config
//   | u32 n_entries | per entry: u32 name_len, name, u32 rank, u32 dims[rank]
//   | u64 payload_bytes | payload (float32, manifest order) | u32 crc32(all preceding bytes)
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  EncoderConfig config;
  ParamStore params;
};

std::string serialize_checkpoint(const ParamStore& params, const EncoderConfig& cfg);
// Throws FormatError (magic, version, manifest) or CorruptionError (size,
// checksum). Nothing is returned unless the whole file validates.
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const ParamStore& params, const EncoderConfig& cfg, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
// SHA-256 (hex) of the serialized checkpoint.
std::string checkpoint_hash(const ParamStore& params, const EncoderConfig& cfg);

}  // namespace rlab
