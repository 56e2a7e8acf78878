#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rlab/error.hpp"
#include "rlab/hash.hpp"
#include "rlab/pipeline.hpp"

namespace rlab {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

template <class T>
std::string num(T v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_num(const std::string& key, const std::string& s) {
  T v{};
  const char* end = s.data() + s.size();
  auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError(key + ": not a number: '" + s + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <class T>
Field plain(T RunConfig::*m) {
  return {[m](const RunConfig& c) { return num(c.*m); },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_num<T>(k, v); }};
}

template <class T>
Field enc(T EncoderConfig::*m) {
  return {[m](const RunConfig& c) { return num(c.encoder.*m); },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.encoder.*m = parse_num<T>(k, v); }};
}

Field flag(bool RunConfig::*m) {
  return {[m](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_bool(k, v); }};
}

// Sorted by key; canonical() walks this map.
const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = [] {
    std::map<std::string, Field> m;
    m["seed"] = plain(&RunConfig::seed);
    m["corpus.entities"] = plain(&RunConfig::corpus_entities);
    m["corpus.relations"] = plain(&RunConfig::corpus_relations);
    m["corpus.hard_negatives"] = plain(&RunConfig::corpus_hard_negatives);
    m["corpus.held_out_fraction"] = plain(&RunConfig::corpus_held_out_fraction);
    m["encoder.layers"] = enc(&EncoderConfig::n_layers);
    m["encoder.d_model"] = enc(&EncoderConfig::d_model);
    m["encoder.heads"] = enc(&EncoderConfig::n_heads);
    m["encoder.d_intermediate"] = enc(&EncoderConfig::d_intermediate);
    m["encoder.max_seq"] = enc(&EncoderConfig::max_seq);
    m["encoder.pooling"] = {
        [](const RunConfig& c) { return std::string(c.encoder.pooling == Pooling::kCls ? "cls" : "mean"); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "cls") c.encoder.pooling = Pooling::kCls;
          else if (v == "mean") c.encoder.pooling = Pooling::kMean;
          else throw ConfigError(k + ": expected cls or mean, got '" + v + "'");
        }};
    m["mlm.steps"] = plain(&RunConfig::mlm_steps);
    m["mlm.lr"] = plain(&RunConfig::mlm_lr);
    m["mlm.batch"] = plain(&RunConfig::mlm_batch);
    m["mlm.mask_prob"] = plain(&RunConfig::mlm_mask_prob);
    m["mlm.object_mask_prob"] = plain(&RunConfig::mlm_object_mask_prob);
    m["dpr.steps"] = plain(&RunConfig::dpr_steps);
    m["dpr.lr"] = plain(&RunConfig::dpr_lr);
    m["dpr.batch"] = plain(&RunConfig::dpr_batch);
    m["dpr.hard_negatives"] = plain(&RunConfig::dpr_hard_negatives);
    m["dpr.temperature"] = plain(&RunConfig::dpr_temperature);
    m["probe.mode"] = {
        [](const RunConfig& c) { return std::string(probe_mode_name(c.probe_mode)); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "pairwise") c.probe_mode = ProbeMode::kPairwise;
          else if (v == "concat") c.probe_mode = ProbeMode::kConcat;
          else throw ConfigError(k + ": expected pairwise or concat, got '" + v + "'");
        }};
    m["probe.lr"] = plain(&RunConfig::probe_lr);
    m["probe.epochs"] = plain(&RunConfig::probe_epochs);
    m["probe.patience"] = plain(&RunConfig::probe_patience);
    m["probe.validation_fraction"] = plain(&RunConfig::probe_validation_fraction);
    m["probe.replicates"] = plain(&RunConfig::probe_replicates);
    m["probe.ns"] = {[](const RunConfig& c) {
                       std::string s;
                       for (size_t i = 0; i < c.probe_ns.size(); ++i) s += (i ? "," : "") + num(c.probe_ns[i]);
                       return s;
                     },
                     [](RunConfig& c, const std::string& k, const std::string& v) {
                       std::vector<int> ns;
                       std::stringstream ss(v);
                       std::string item;
                       while (std::getline(ss, item, ',')) ns.push_back(parse_num<int>(k, trim(item)));
                       c.probe_ns = std::move(ns);
                     }};
    m["attribution.steps"] = plain(&RunConfig::attribution_steps);
    m["attribution.threshold"] = plain(&RunConfig::attribution_threshold);
    m["attribution.absolute"] = flag(&RunConfig::attribution_absolute);
    m["attribution.query_inputs"] = plain(&RunConfig::attribution_query_inputs);
    m["attribution.context_inputs"] = plain(&RunConfig::attribution_context_inputs);
    m["edit.patch_lr"] = plain(&RunConfig::edit_patch_lr);
    m["edit.finetune_lr"] = plain(&RunConfig::edit_finetune_lr);
    m["edit.max_steps"] = plain(&RunConfig::edit_max_steps);
    m["edit.finetune_blocks"] = plain(&RunConfig::edit_finetune_blocks);
    m["edit.cohort"] = plain(&RunConfig::edit_cohort);
    m["edit.control_facts"] = plain(&RunConfig::edit_control_facts);
    m["edit.group_size"] = plain(&RunConfig::edit_group_size);
    return m;
  }();
  return f;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown key '" + key + "'");
  it->second.set(*this, key, value);
}

void RunConfig::validate() const {
  if (corpus_entities < 2) throw ConfigError("corpus.entities must be >= 2");
  if (corpus_relations < 2 || corpus_relations > 12) throw ConfigError("corpus.relations must be in [2,12]");
  if (corpus_hard_negatives < 1) throw ConfigError("corpus.hard_negatives must be >= 1");
  if (!(corpus_held_out_fraction > 0.0 && corpus_held_out_fraction < 1.0))
    throw ConfigError("corpus.held_out_fraction must be in (0,1)");
  EncoderConfig e = encoder;
  e.vocab_size = kNumReserved + 1;
  e.validate();
  mlm_config().validate();
  dpr_config().validate();
  if (probe_ns.empty()) throw ConfigError("probe.ns must list at least one N");
  for (int n : probe_ns)
    if (n < 2) throw ConfigError("probe.ns entries must be >= 2");
  if (!(probe_lr > 0.0f)) throw ConfigError("probe.lr must be > 0");
  if (probe_epochs < 1 || probe_patience < 1) throw ConfigError("probe.epochs and probe.patience must be >= 1");
  if (!(probe_validation_fraction > 0.0 && probe_validation_fraction < 1.0))
    throw ConfigError("probe.validation_fraction must be in (0,1)");
  if (probe_replicates < 1) throw ConfigError("probe.replicates must be >= 1");
  attribution_config().validate();
  if (attribution_query_inputs < 1) throw ConfigError("attribution.query_inputs must be >= 1");
  if (attribution_context_inputs < 0 || attribution_context_inputs > attribution_query_inputs)
    throw ConfigError("attribution.context_inputs must be in [0, attribution.query_inputs]");
  if (!(edit_patch_lr > 0.0f) || !(edit_finetune_lr > 0.0f)) throw ConfigError("edit learning rates must be > 0");
  if (edit_max_steps < 1) throw ConfigError("edit.max_steps must be >= 1");
  if (edit_finetune_blocks < 1 || edit_finetune_blocks > encoder.n_layers)
    throw ConfigError("edit.finetune_blocks must be in [1, encoder.layers]");
  if (edit_cohort < 1 || edit_control_facts < 1 || edit_group_size < 1)
    throw ConfigError("edit.cohort, edit.control_facts and edit.group_size must be >= 1");
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + "=" + f.get(*this) + "\n";
  return out;
}

std::string RunConfig::section(const std::vector<std::string>& prefixes) const {
  std::string out;
  for (const auto& [k, f] : fields())
    for (const auto& p : prefixes)
      if (k.rfind(p, 0) == 0) {
        out += k + "=" + f.get(*this) + "\n";
        break;
      }
  return out;
}

TrainConfig RunConfig::mlm_config() const {
  TrainConfig t;
  t.phase = Phase::kMlm;
  t.lr = mlm_lr;
  t.batch_size = mlm_batch;
  t.steps = mlm_steps;
  t.seed = seed;
  t.mask_prob = mlm_mask_prob;
  t.object_mask_prob = mlm_object_mask_prob;
  return t;
}

TrainConfig RunConfig::dpr_config() const {
  TrainConfig t;
  t.phase = Phase::kDpr;
  t.lr = dpr_lr;
  t.batch_size = dpr_batch;
  t.steps = dpr_steps;
  t.seed = seed;
  t.n_hard_negatives = dpr_hard_negatives;
  t.temperature = dpr_temperature;
  return t;
}

ProbeConfig RunConfig::probe_config() const {
  ProbeConfig p;
  p.mode = probe_mode;
  p.lr = probe_lr;
  p.epochs = probe_epochs;
  p.patience = probe_patience;
  p.validation_fraction = probe_validation_fraction;
  p.seed = seed;
  return p;
}

AttributionConfig RunConfig::attribution_config() const {
  AttributionConfig a;
  a.riemann_steps = attribution_steps;
  a.threshold = attribution_threshold;
  a.absolute = attribution_absolute;
  return a;
}

EditConfig RunConfig::edit_config() const {
  EditConfig e;
  e.patch_lr = edit_patch_lr;
  e.finetune_lr = edit_finetune_lr;
  e.max_steps = edit_max_steps;
  e.finetune_blocks = edit_finetune_blocks;
  return e;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second)
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_run_config(buf.str());
}

// --- manifest ---------------------------------------------------------------

const StageRecord* RunManifest::find(const std::string& stage) const {
  for (const auto& s : stages)
    if (s.name == stage) return &s;
  return nullptr;
}

std::string RunManifest::to_json(bool with_times) const {
  json j;
  j["config_hash"] = config_hash;
  j["files"] = files;
  j["stages"] = json::array();
  for (const auto& s : stages) {
    json r;
    r["name"] = s.name;
    r["key"] = s.key;
    r["inputs"] = s.inputs;
    r["outputs"] = s.outputs;
    if (with_times) r["wall_time_s"] = s.wall_time_s;
    j["stages"].push_back(std::move(r));
  }
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  RunManifest m;
  try {
    const json j = json::parse(text);
    m.config_hash = j.at("config_hash").get<std::string>();
    m.files = j.at("files").get<std::map<std::string, std::string>>();
    for (const auto& r : j.at("stages")) {
      StageRecord s;
      s.name = r.at("name").get<std::string>();
      s.key = r.at("key").get<std::string>();
      s.inputs = r.at("inputs").get<std::map<std::string, std::string>>();
      s.outputs = r.at("outputs").get<std::map<std::string, std::string>>();
      s.wall_time_s = r.value("wall_time_s", 0.0);
      m.stages.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

std::map<std::string, std::string> hash_tree(const std::string& dir) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json") continue;
    out[rel] = sha256_file(e.path().string());
  }
  return out;
}

}  // namespace rlab
