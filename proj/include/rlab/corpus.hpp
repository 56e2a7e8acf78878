#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rlab/encoder.hpp"
#include "rlab/rng.hpp"

namespace rlab {

// Whitespace tokenizer over a closed vocabulary. Ids 0..4 are the reserved
// PAD, UNK, CLS, SEP, MASK tokens.
class Vocab {
 public:
  Vocab();
  int32_t add(const std::string& token);
  // Unknown words map to UNK.
  int32_t id(const std::string& token) const;
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(int32_t id) const;
  int32_t size() const { return static_cast<int32_t>(tokens_.size()); }

  std::vector<int32_t> tokenize(const std::string& text) const;
  std::string detokenize(std::span<const int32_t> ids) const;
  // [CLS] text [SEP]
  std::vector<int32_t> encode_text(const std::string& text) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int32_t> ids_;
};

struct Relation {
  std::string name;    // identifier, e.g. "home_city"
  std::string phrase;  // surface phrase, e.g. "home city"
  std::string pool;    // object pool; "entity" draws from the subject entities
};

// Subject and object are surface ids (index into KnowledgeBase::surfaces);
// subjects are always entities.
struct FactTriple {
  int32_t id = -1;
  int32_t subject = -1;
  int32_t relation = -1;
  int32_t object = -1;
  bool operator==(const FactTriple&) const = default;
};

struct Passage {
  int32_t id = -1;
  std::string title;
  std::string text;
  std::vector<int32_t> fact_ids;
  std::vector<int32_t> templates;  // declarative template used per fact
};

struct Query {
  int32_t id = -1;
  std::string text;
  int32_t gold = -1;
  std::vector<int32_t> hard_negatives;
  FactTriple answer_fact;
  bool held_out = false;
};

// kNamed: passage sentences name their subject. kAnaphoric: the subject is
// replaced by "it", so matching a query to its passage needs the stored facts.
enum class PassageStyle { kNamed, kAnaphoric };

struct KnowledgeBase {
  uint64_t seed = 0;
  PassageStyle style = PassageStyle::kNamed;
  int32_t n_entities = 0;
  std::vector<std::string> surfaces;  // entities first, then pool values
  std::unordered_map<std::string, std::vector<int32_t>> pools;
  std::vector<Relation> relations;
  std::vector<FactTriple> facts;
  std::vector<Passage> passages;  // passage i is about entity i
  Vocab vocab;

  const std::string& surface(int32_t id) const { return surfaces.at(static_cast<size_t>(id)); }
  const FactTriple& fact(int32_t id) const { return facts.at(static_cast<size_t>(id)); }
  // Fact for (subject, relation), if any.
  std::optional<FactTriple> lookup(int32_t subject, int32_t relation) const;
  // Candidate objects for a relation (its pool).
  const std::vector<int32_t>& candidates(int32_t relation) const;
  int32_t surface_id(const std::string& s) const;
};

inline constexpr int kNumTemplates = 12;

// Declarative rendering of (subject, relation, object) with template t.
std::string render_statement(const KnowledgeBase& kb, int32_t subject, int32_t relation, int32_t object, int t);
// Question form for a fact (variant chosen by the caller).
std::string render_question(const KnowledgeBase& kb, const FactTriple& f, int variant);
// Cloze form with the object replaced by [MASK]; tokens include CLS/SEP.
std::vector<int32_t> masked_statement(const KnowledgeBase& kb, int32_t subject, int32_t relation, int t,
                                      int64_t* mask_position);
// Inverts render_statement: returns the (subject, relation, object) triple
// and template index, or nullopt when the sentence matches no template.
struct ParsedStatement {
  int32_t subject, relation, object;
  int template_index;
};
std::optional<ParsedStatement> parse_statement(const KnowledgeBase& kb, const std::string& sentence);
// Splits passage text into its sentences (each ends with " .").
std::vector<std::string> split_sentences(const std::string& text);

// Deterministic synthetic KB: each entity gets 3-5 facts over distinct
// relations; one passage per entity. Throws ContractError when
// n_entities < 2 or n_relations < 2 (n_relations is capped at 12).
KnowledgeBase generate_kb(uint64_t seed, int n_entities = 200, int n_relations = 12,
                          PassageStyle style = PassageStyle::kNamed);

struct QuerySplit {
  std::vector<Query> queries;  // all, in fact order; held_out marks the split
  std::vector<int32_t> skipped_facts;
  std::vector<const Query*> train() const;
  std::vector<const Query*> held_out() const;
};

// One query per fact. Held-out facts are the facts of a 20% subject sample,
// so held-out subjects never occur in training queries. Facts without enough
// hard negatives are skipped (and logged).
QuerySplit make_queries(const KnowledgeBase& kb, int n_hard_negatives = 4, double held_out_fraction = 0.2);

struct Counterfactual {
  FactTriple fact;
  int32_t false_object = -1;
  std::string false_statement;
  std::vector<std::string> rephrasings;
};

// Replaces the object with a same-pool distractor that is never true for
// (subject, relation). Throws DataError when no distractor exists.
Counterfactual counterfactual(const KnowledgeBase& kb, const FactTriple& fact);

// Text of the fact's passage with that fact's object replaced (same
// template and style); every other sentence is unchanged. Throws DataError
// for an unknown fact.
std::string passage_with_object(const KnowledgeBase& kb, int32_t fact_id, int32_t new_object);

// MLM pretraining texts: every passage plus every fact under every template.
// `object_position` is the token index (after CLS) of the fact object in a
// single-statement text, -1 for passages.
struct MlmText {
  std::string text;
  int64_t object_position = -1;
};
std::vector<MlmText> mlm_texts(const KnowledgeBase& kb);

// JSON Lines I/O with the documented key order.
void write_passages_jsonl(const KnowledgeBase& kb, const std::string& path);
void write_queries_jsonl(const KnowledgeBase& kb, const QuerySplit& qs, const std::string& path);
std::vector<Passage> read_passages_jsonl(const std::string& path);

}  // namespace rlab
