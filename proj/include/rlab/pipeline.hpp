#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rlab/attribution.hpp"
#include "rlab/edit.hpp"
#include "rlab/encoder.hpp"
#include "rlab/probe.hpp"
#include "rlab/trainer.hpp"

namespace rlab {

// Flat key=value run configuration. Every artifact of a run is a function of
// this struct alone.
struct RunConfig {
  uint64_t seed = 1;

  int corpus_entities = 200;
  int corpus_relations = 12;
  int corpus_hard_negatives = 4;
  double corpus_held_out_fraction = 0.2;

  EncoderConfig encoder;  // vocab_size is filled from the generated corpus

  int mlm_steps = 8000;
  float mlm_lr = 1e-3f;
  int mlm_batch = 32;
  double mlm_mask_prob = 0.15;
  double mlm_object_mask_prob = 1.0;

  int dpr_steps = 300;
  float dpr_lr = 1e-4f;
  int dpr_batch = 16;
  int dpr_hard_negatives = 1;
  float dpr_temperature = 1.0f;

  ProbeMode probe_mode = ProbeMode::kPairwise;
  float probe_lr = 1e-2f;
  int probe_epochs = 300;
  int probe_patience = 20;
  double probe_validation_fraction = 0.1;
  int probe_replicates = 4;
  std::vector<int> probe_ns = {2, 3, 4, 5};

  int attribution_steps = 20;
  double attribution_threshold = 0.1;
  bool attribution_absolute = false;
  int attribution_query_inputs = 8;
  int attribution_context_inputs = 2;

  float edit_patch_lr = 1e-3f;
  float edit_finetune_lr = 1e-5f;
  int edit_max_steps = 500;
  int edit_finetune_blocks = 3;
  int edit_cohort = 40;
  int edit_control_facts = 50;
  int edit_group_size = 10;

  // Throws ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  // Every key in sorted order, one "key=value" line each.
  std::string canonical() const;
  // Lines of the canonical text whose key starts with one of `prefixes`.
  std::string section(const std::vector<std::string>& prefixes) const;

  TrainConfig mlm_config() const;
  TrainConfig dpr_config() const;
  ProbeConfig probe_config() const;
  AttributionConfig attribution_config() const;
  EditConfig edit_config() const;
};

// '#' starts a comment; blank lines are ignored; unknown keys, malformed lines
// and duplicate keys throw ConfigError with the line number.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

inline const std::vector<std::string> kStages = {"corpus",    "pretrain", "dpr",  "probe", "attribute",
                                                 "retrieve", "edit",     "table3", "report"};

struct StageRecord {
  std::string name;
  std::string key;  // hash of stage name, config section and input hashes
  std::map<std::string, std::string> inputs;   // path -> sha256
  std::map<std::string, std::string> outputs;  // path -> sha256
  double wall_time_s = 0.0;
};

struct RunManifest {
  std::string config_hash;
  std::map<std::string, std::string> files;  // run-level files (canonical config)
  std::vector<StageRecord> stages;           // in pipeline order

  const StageRecord* find(const std::string& stage) const;
  // JSON text; wall times are dropped when `with_times` is false.
  std::string to_json(bool with_times = true) const;
  static RunManifest from_json(const std::string& text);
};

// Stage order: corpus, pretrain, dpr, probe, attribute, retrieve, edit,
// table3, report. Paths in records are relative to the output directory.
class Pipeline {
 public:
  Pipeline(RunConfig cfg, std::string out_dir, int workers = 1);

  // Runs the requested stages (all when empty) in pipeline order. A stage
  // whose key and output hashes match the stored manifest is skipped. The
  // manifest is rewritten after every completed stage, so a failure leaves
  // the completed stages recorded. Throws DependencyError when a required
  // input is absent and its producing stage is not requested.
  RunManifest run(const std::vector<std::string>& stages = {});

  const RunManifest& manifest() const { return manifest_; }
  const std::string& out_dir() const { return out_; }
  // Stage that was executing when run() threw, if any.
  const std::string& failed_stage() const { return failed_; }

  struct Context;  // per-run state shared by stage bodies

 private:
  void run_stage(const std::string& name, Context& ctx);

  RunConfig cfg_;
  std::string out_;
  int workers_;
  RunManifest manifest_;
  std::string failed_;
};

// SHA-256 of every file under `dir`, keyed by relative path; manifest.json
// excluded.
std::map<std::string, std::string> hash_tree(const std::string& dir);

// Loads an attribution map list written by the attribute stage.
std::vector<AttributionMap> read_attribution_maps(const std::string& path);
void write_attribution_maps(const std::vector<AttributionMap>& maps, const std::string& path);

}  // namespace rlab
