#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rlab/corpus.hpp"
#include "rlab/encoder.hpp"
#include "rlab/probe.hpp"
#include "rlab/trainer.hpp"

namespace rlab {

enum class EditMethod { kLayerPatch, kConstrainedFinetune };
const char* edit_method_name(EditMethod m);

struct EditRequest {
  FactTriple target;
  int32_t false_object = -1;
  std::string false_statement;
  std::vector<std::string> rephrasings;  // 10..12
  EditMethod method = EditMethod::kLayerPatch;
};

// Built from counterfactual(); throws DataError when no distractor exists.
EditRequest make_edit_request(const KnowledgeBase& kb, const FactTriple& fact, EditMethod method);

struct EditConfig {
  float patch_lr = 3e-5f;
  float finetune_lr = 1e-6f;
  int max_steps = 500;
  int finetune_blocks = 3;
  // Patch key initialisation: key = scale * x / |x| for the edit context x at
  // the masked slot, bias = -threshold * scale * |x|.
  float patch_key_scale = 1.0f;
  float patch_threshold = 0.5f;
};

struct EditOutcome {
  EditMethod method = EditMethod::kLayerPatch;
  FactTriple fact;
  int32_t false_object = -1;  // surface id
  bool converged = false;     // preference flipped on the false statement
  int steps = 0;
  float lr = 0.0f;
  ParamStore edited;
  std::vector<std::string> trainable;  // entry names that were allowed to change
};

// Appends one intermediate neuron to the last block's feed-forward map. The
// new value vector is zero, so the model function is unchanged.
ParamStore append_patch_neuron(const ParamStore& store, const EncoderConfig& cfg, std::span<const float> key,
                               float bias);

// Trains only the newly appended neuron (all base and earlier patch weights
// stay byte-identical) on the object slot of the false statement and its
// rephrasings, until argmax at the slot equals the false object or the step
// budget runs out. Non-convergence is reported, not thrown.
EditOutcome layer_patch_edit(const ParamStore& model, const EncoderConfig& cfg, const KnowledgeBase& kb,
                             const EditRequest& req, const EditConfig& ec);
// Same objective; updates restricted to the last `finetune_blocks` blocks.
EditOutcome constrained_finetune_edit(const ParamStore& model, const EncoderConfig& cfg, const KnowledgeBase& kb,
                                      const EditRequest& req, const EditConfig& ec);
EditOutcome apply_edit(const ParamStore& model, const EncoderConfig& cfg, const KnowledgeBase& kb,
                       const EditRequest& req, const EditConfig& ec);

// True iff every entry outside `allowed` is byte-identical between the stores
// (entries present only in `after` must be in `allowed`).
bool frozen_regions_identical(const ParamStore& before, const ParamStore& after,
                              const std::vector<std::string>& allowed);

// N=2, top-layer probe trained on one model's own features.
struct RemovalSuite {
  FeatureBank bank;
  Probe probe;
};
RemovalSuite build_removal_suite(const ParamStore& query_model, const ParamStore& context_model,
                                 const EncoderConfig& cfg, const KnowledgeBase& kb, const QuerySplit& qs,
                                 const ProbeConfig& pc, int replicates = 4, int workers = 1);

struct RemovalResult {
  bool removed = false;          // probe can no longer pick the gold passage
  bool masked_prefers_true = false;  // corroborating masked-object signal
};
// `model` supplies the masked-object signal; the suite must have been built
// on the same model.
RemovalResult removal_check(const RemovalSuite& suite, const ParamStore& model, const EncoderConfig& cfg,
                            const KnowledgeBase& kb, const QuerySplit& qs, int32_t query_index);

// Index of the query whose answer is `fact_id`, or -1.
int32_t query_for_fact(const QuerySplit& qs, int32_t fact_id);

}  // namespace rlab
