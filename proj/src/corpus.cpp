#include "rlab/corpus.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace rlab {
namespace {

// {S} subject, {R} relation phrase, {O} object. All templates are distinct
// after filling, so parsing is unambiguous.
const std::array<const char*, kNumTemplates> kStatementTemplates = {
    "the {R} of {S} is {O} .",
    "{S} has {O} as the {R} .",
    "{O} is the {R} of {S} .",
    "the {R} of {S} was {O} .",
    "everyone knows the {R} of {S} is {O} .",
    "as for {S} , the {R} is {O} .",
    "{S} lists {O} as the {R} .",
    "it is said that the {R} of {S} is {O} .",
    "records show the {R} of {S} is {O} .",
    "{S} , whose {R} is {O} , is well known .",
    "in short , {O} is the {R} of {S} .",
    "the {R} for {S} is {O} .",
};

const std::array<const char*, 3> kQuestionTemplates = {
    "what is the {R} of {S} ?",
    "tell me the {R} of {S} ?",
    "do you know the {R} of {S} ?",
};

const std::vector<Relation> kRelations = {
    {"birth_year", "birth year", "year"},
    {"home_city", "home city", "city"},
    {"profession", "profession", "profession"},
    {"instrument", "favorite instrument", "instrument"},
    {"color", "favorite color", "color"},
    {"language", "native language", "language"},
    {"mentor", "mentor", "entity"},
    {"rival", "rival", "entity"},
    {"sport", "favorite sport", "sport"},
    {"food", "favorite food", "food"},
    {"employer", "employer", "employer"},
    {"pet", "pet animal", "animal"},
};

const std::vector<std::string> kProfessions = {
    "baker", "sailor", "painter", "farmer", "surgeon", "poet", "weaver", "miner",
    "pilot", "tailor", "judge", "chemist", "jeweler", "potter", "cartographer", "astronomer",
    "architect", "brewer", "locksmith", "librarian", "blacksmith", "botanist", "composer", "sculptor"};
const std::vector<std::string> kInstruments = {"violin", "cello", "flute", "oboe", "harp", "lute", "trumpet", "piano",
                                               "drum", "banjo", "clarinet", "organ", "bassoon", "zither",
                                               "mandolin", "horn"};
const std::vector<std::string> kColors = {"red", "blue", "green", "amber", "violet", "ochre", "teal",
                                          "crimson", "ivory", "indigo", "scarlet", "silver", "olive", "maroon"};
const std::vector<std::string> kSports = {"rowing", "fencing", "archery", "chess", "cricket", "tennis", "polo",
                                          "boxing", "sailing", "skiing", "hockey", "rugby", "cycling",
                                          "wrestling", "curling", "golf"};
const std::vector<std::string> kFoods = {"bread", "cheese", "plums", "herring", "lentils", "figs", "oysters",
                                         "dumplings", "olives", "almonds", "pears", "mussels", "chestnuts",
                                         "barley", "apricots", "quince"};
const std::vector<std::string> kAnimals = {"parrot", "ferret", "tortoise", "falcon", "hound", "cat", "goat",
                                           "raven", "pony", "hedgehog", "owl", "lizard", "rabbit", "canary",
                                           "mule", "otter"};

// Template words first so their ids are stable across KB sizes.
const std::vector<std::string> kFunctionWords = {
    "the", "of", "is", "has", "as", "was", "everyone", "knows", "for", ",", "lists", "it", "said", "that",
    "records", "show", "whose", "well", "known", "in", "short", ".", "what", "tell", "me", "do", "you", "know", "?"};

std::string pseudo_word(Rng& rng, int syllables) {
  static const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
                                  "br", "dr", "gr", "kr", "tr", "st", "sk", "pl", "th", "sh"};
  static const char* kNuclei[] = {"a", "e", "i", "o", "u", "ai", "ou", "ei"};
  static const char* kCodas[] = {"", "n", "r", "l", "s", "k", "m", "t", "x", "nd", "rn"};
  std::string w;
  for (int i = 0; i < syllables; ++i) {
    w += kOnsets[rng.below(std::size(kOnsets))];
    w += kNuclei[rng.below(std::size(kNuclei))];
  }
  w += kCodas[rng.below(std::size(kCodas))];
  return w;
}

std::string fill(std::string t, const std::string& s, const std::string& r, const std::string& o) {
  auto rep = [&t](const std::string& key, const std::string& val) {
    auto pos = t.find(key);
    if (pos != std::string::npos) t.replace(pos, key.size(), val);
  };
  rep("{S}", s);
  rep("{R}", r);
  rep("{O}", o);
  return t;
}

std::vector<std::string> split_ws(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

Vocab::Vocab() {
  for (const char* t : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) add(t);
}

int32_t Vocab::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const auto id = static_cast<int32_t>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int32_t Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int32_t id) const {
  if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " not in vocabulary");
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int32_t> Vocab::tokenize(const std::string& text) const {
  std::vector<int32_t> out;
  for (const auto& w : split_ws(text)) out.push_back(id(w));
  return out;
}

std::string Vocab::detokenize(std::span<const int32_t> ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::vector<int32_t> Vocab::encode_text(const std::string& text) const {
  std::vector<int32_t> out{kClsId};
  auto body = tokenize(text);
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(kSepId);
  return out;
}

// ---------------------------------------------------------------------------

std::optional<FactTriple> KnowledgeBase::lookup(int32_t subject, int32_t relation) const {
  if (subject < 0 || subject >= n_entities) return std::nullopt;
  for (int32_t fid : passages[static_cast<size_t>(subject)].fact_ids) {
    if (facts[static_cast<size_t>(fid)].relation == relation) return facts[static_cast<size_t>(fid)];
  }
  return std::nullopt;
}

const std::vector<int32_t>& KnowledgeBase::candidates(int32_t relation) const {
  return pools.at(relations.at(static_cast<size_t>(relation)).pool);
}

int32_t KnowledgeBase::surface_id(const std::string& s) const {
  auto it = std::find(surfaces.begin(), surfaces.end(), s);
  return it == surfaces.end() ? -1 : static_cast<int32_t>(it - surfaces.begin());
}

std::string render_statement(const KnowledgeBase& kb, int32_t subject, int32_t relation, int32_t object, int t) {
  if (t < 0 || t >= kNumTemplates) throw ContractError("template index out of range");
  return fill(kStatementTemplates[static_cast<size_t>(t)], kb.surface(subject),
              kb.relations.at(static_cast<size_t>(relation)).phrase, kb.surface(object));
}

std::string render_question(const KnowledgeBase& kb, const FactTriple& f, int variant) {
  const auto v = static_cast<size_t>(variant) % kQuestionTemplates.size();
  return fill(kQuestionTemplates[v], kb.surface(f.subject), kb.relations.at(static_cast<size_t>(f.relation)).phrase,
              "");
}

std::vector<int32_t> masked_statement(const KnowledgeBase& kb, int32_t subject, int32_t relation, int t,
                                      int64_t* mask_position) {
  const std::string text = fill(kStatementTemplates[static_cast<size_t>(t)], kb.surface(subject),
                                kb.relations.at(static_cast<size_t>(relation)).phrase, "[MASK]");
  auto ids = kb.vocab.encode_text(text);
  auto it = std::find(ids.begin(), ids.end(), kMaskId);
  if (mask_position) *mask_position = it - ids.begin();
  return ids;
}

std::optional<ParsedStatement> parse_statement(const KnowledgeBase& kb, const std::string& sentence) {
  const auto words = split_ws(sentence);
  for (int t = 0; t < kNumTemplates; ++t) {
    for (int32_t r = 0; r < static_cast<int32_t>(kb.relations.size()); ++r) {
      const auto pattern = split_ws(fill(kStatementTemplates[static_cast<size_t>(t)], "{S}",
                                         kb.relations[static_cast<size_t>(r)].phrase, "{O}"));
      if (pattern.size() != words.size()) continue;
      std::string s, o;
      bool ok = true;
      for (size_t i = 0; i < words.size() && ok; ++i) {
        if (pattern[i] == "{S}") {
          s = words[i];
        } else if (pattern[i] == "{O}") {
          o = words[i];
        } else {
          ok = pattern[i] == words[i];
        }
      }
      if (!ok) continue;
      const int32_t sid = kb.surface_id(s), oid = kb.surface_id(o);
      if (sid < 0 || sid >= kb.n_entities || oid < 0) continue;
      const auto& pool = kb.candidates(r);
      if (std::find(pool.begin(), pool.end(), oid) == pool.end()) continue;
      return ParsedStatement{sid, r, oid, t};
    }
  }
  return std::nullopt;
}

std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (const auto& w : split_ws(text)) {
    cur += cur.empty() ? w : " " + w;
    if (w == ".") {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

KnowledgeBase generate_kb(uint64_t seed, int n_entities, int n_relations, PassageStyle style) {
  if (n_entities < 2 || n_relations < 2) throw ContractError("generate_kb needs >= 2 entities and >= 2 relations");
  n_relations = std::min<int>(n_relations, static_cast<int>(kRelations.size()));
  KnowledgeBase kb;
  kb.seed = seed;
  kb.n_entities = n_entities;
  kb.style = style;
  kb.relations.assign(kRelations.begin(), kRelations.begin() + n_relations);
  Rng names_rng = Rng(seed).fork(1);
  Rng facts_rng = Rng(seed).fork(2);

  std::set<std::string> taken(kFunctionWords.begin(), kFunctionWords.end());
  for (const auto& r : kRelations)
    for (const auto& w : split_ws(r.phrase)) taken.insert(w);
  for (const auto* words : {&kProfessions, &kInstruments, &kColors, &kSports, &kFoods, &kAnimals})
    taken.insert(words->begin(), words->end());
  auto fresh = [&](const std::string& suffix, int syllables) {
    for (;;) {
      std::string w = pseudo_word(names_rng, syllables) + suffix;
      if (taken.insert(w).second) return w;
    }
  };
  auto add_surface = [&kb](const std::string& s) {
    kb.surfaces.push_back(s);
    return static_cast<int32_t>(kb.surfaces.size() - 1);
  };

  for (int i = 0; i < n_entities; ++i) kb.pools["entity"].push_back(add_surface(fresh("", 2)));
  for (int y = 0; y < 60; ++y) kb.pools["year"].push_back(add_surface(std::to_string(1800 + y)));
  for (int i = 0; i < 40; ++i) kb.pools["city"].push_back(add_surface(fresh(i % 2 ? "ton" : "burg", 1)));
  for (int i = 0; i < 20; ++i) kb.pools["language"].push_back(add_surface(fresh("ish", 1)));
  for (int i = 0; i < 24; ++i) kb.pools["employer"].push_back(add_surface(fresh("corp", 1)));
  auto add_words = [&](const std::string& pool, const std::vector<std::string>& words) {
    for (const auto& w : words) kb.pools[pool].push_back(add_surface(w));
  };
  add_words("profession", kProfessions);
  add_words("instrument", kInstruments);
  add_words("color", kColors);
  add_words("sport", kSports);
  add_words("food", kFoods);
  add_words("animal", kAnimals);

  for (const auto& w : kFunctionWords) kb.vocab.add(w);
  for (const auto& r : kb.relations)
    for (const auto& w : split_ws(r.phrase)) kb.vocab.add(w);
  for (const auto& s : kb.surfaces) kb.vocab.add(s);

  for (int32_t e = 0; e < n_entities; ++e) {
    const int n_facts = std::min<int>(n_relations, 3 + static_cast<int>(facts_rng.below(3)));
    std::vector<int32_t> rels(static_cast<size_t>(n_relations));
    for (int32_t r = 0; r < n_relations; ++r) rels[static_cast<size_t>(r)] = r;
    facts_rng.shuffle(rels);
    rels.resize(static_cast<size_t>(n_facts));
    std::sort(rels.begin(), rels.end());
    Passage p;
    p.id = e;
    p.title = kb.surface(e);
    std::string text;
    for (int32_t r : rels) {
      const auto& pool = kb.pools.at(kb.relations[static_cast<size_t>(r)].pool);
      int32_t obj;
      do {
        obj = pool[facts_rng.below(pool.size())];
      } while (obj == e);
      FactTriple f{static_cast<int32_t>(kb.facts.size()), e, r, obj};
      kb.facts.push_back(f);
      const int t = static_cast<int>(facts_rng.below(kNumTemplates));
      p.fact_ids.push_back(f.id);
      p.templates.push_back(t);
      if (!text.empty()) text += ' ';
      text += style == PassageStyle::kNamed
                  ? render_statement(kb, e, r, obj, t)
                  : fill(kStatementTemplates[static_cast<size_t>(t)], "it", kb.relations[static_cast<size_t>(r)].phrase,
                         kb.surface(obj));
    }
    p.text = std::move(text);
    kb.passages.push_back(std::move(p));
  }
  return kb;
}

// ---------------------------------------------------------------------------

std::vector<const Query*> QuerySplit::train() const {
  std::vector<const Query*> out;
  for (const auto& q : queries)
    if (!q.held_out) out.push_back(&q);
  return out;
}

std::vector<const Query*> QuerySplit::held_out() const {
  std::vector<const Query*> out;
  for (const auto& q : queries)
    if (q.held_out) out.push_back(&q);
  return out;
}

QuerySplit make_queries(const KnowledgeBase& kb, int n_hard_negatives, double held_out_fraction) {
  Rng rng = Rng(kb.seed).fork(3);
  std::vector<int32_t> subjects(static_cast<size_t>(kb.n_entities));
  for (int32_t e = 0; e < kb.n_entities; ++e) subjects[static_cast<size_t>(e)] = e;
  rng.shuffle(subjects);
  const auto n_held = static_cast<size_t>(held_out_fraction * kb.n_entities + 0.5);
  std::vector<bool> held(static_cast<size_t>(kb.n_entities), false);
  for (size_t i = 0; i < n_held && i < subjects.size(); ++i) held[static_cast<size_t>(subjects[i])] = true;

  // mentions[e] = passages (other than e's own) that name e as an object
  std::vector<std::vector<int32_t>> mentions(static_cast<size_t>(kb.n_entities));
  for (const auto& f : kb.facts) {
    if (f.object < kb.n_entities && f.object != f.subject) mentions[static_cast<size_t>(f.object)].push_back(f.subject);
  }
  std::vector<std::vector<int32_t>> with_relation(kb.relations.size());
  for (const auto& f : kb.facts) with_relation[static_cast<size_t>(f.relation)].push_back(f.subject);

  QuerySplit out;
  for (const auto& f : kb.facts) {
    const int32_t gold = f.subject;
    std::vector<int32_t> by_subject, by_relation;
    for (int32_t p : mentions[static_cast<size_t>(f.subject)])
      if (p != gold && std::find(by_subject.begin(), by_subject.end(), p) == by_subject.end()) by_subject.push_back(p);
    for (int32_t p : with_relation[static_cast<size_t>(f.relation)])
      if (p != gold && std::find(by_subject.begin(), by_subject.end(), p) == by_subject.end()) by_relation.push_back(p);
    rng.shuffle(by_subject);
    rng.shuffle(by_relation);
    std::vector<int32_t> negs;
    const size_t take_subject = std::min<size_t>(by_subject.size(), 2);
    negs.insert(negs.end(), by_subject.begin(), by_subject.begin() + static_cast<long>(take_subject));
    for (int32_t p : by_relation) {
      if (static_cast<int>(negs.size()) >= n_hard_negatives) break;
      negs.push_back(p);
    }
    for (size_t i = take_subject; i < by_subject.size() && static_cast<int>(negs.size()) < n_hard_negatives; ++i)
      negs.push_back(by_subject[i]);
    if (static_cast<int>(negs.size()) < n_hard_negatives) {
      spdlog::warn("fact {} skipped: only {} hard negatives available", f.id, negs.size());
      out.skipped_facts.push_back(f.id);
      continue;
    }
    Query q;
    q.id = static_cast<int32_t>(out.queries.size());
    q.answer_fact = f;
    q.text = render_question(kb, f, static_cast<int>(rng.below(3)));
    q.gold = gold;
    q.hard_negatives = std::move(negs);
    q.held_out = held[static_cast<size_t>(f.subject)];
    out.queries.push_back(std::move(q));
  }
  return out;
}

Counterfactual counterfactual(const KnowledgeBase& kb, const FactTriple& fact) {
  if (fact.id < 0 || fact.id >= static_cast<int32_t>(kb.facts.size()) || !(kb.fact(fact.id) == fact)) {
    throw DataError("fact is not in the knowledge base");
  }
  std::vector<int32_t> options;
  for (int32_t o : kb.candidates(fact.relation))
    if (o != fact.object && o != fact.subject) options.push_back(o);
  if (options.empty()) throw DataError("no valid distractor for fact " + std::to_string(fact.id));
  Rng rng = Rng(kb.seed).fork(1000 + static_cast<uint64_t>(fact.id));
  Counterfactual cf;
  cf.fact = fact;
  cf.false_object = options[rng.below(options.size())];
  cf.false_statement = render_statement(kb, fact.subject, fact.relation, cf.false_object, 0);
  std::set<std::string> seen{cf.false_statement};
  for (int t = 0; t < kNumTemplates; ++t) {
    auto s = render_statement(kb, fact.subject, fact.relation, cf.false_object, t);
    if (seen.insert(s).second) cf.rephrasings.push_back(std::move(s));
  }
  return cf;
}

std::string passage_with_object(const KnowledgeBase& kb, int32_t fact_id, int32_t new_object) {
  if (fact_id < 0 || fact_id >= static_cast<int32_t>(kb.facts.size())) throw DataError("unknown fact id");
  const FactTriple& f = kb.fact(fact_id);
  const Passage& p = kb.passages.at(static_cast<size_t>(f.subject));
  std::string text;
  for (size_t k = 0; k < p.fact_ids.size(); ++k) {
    const FactTriple& g = kb.fact(p.fact_ids[k]);
    const int32_t obj = g.id == fact_id ? new_object : g.object;
    if (!text.empty()) text += ' ';
    text += kb.style == PassageStyle::kNamed
                ? render_statement(kb, g.subject, g.relation, obj, p.templates[k])
                : fill(kStatementTemplates[static_cast<size_t>(p.templates[k])], "it",
                       kb.relations[static_cast<size_t>(g.relation)].phrase, kb.surface(obj));
  }
  return text;
}

std::vector<MlmText> mlm_texts(const KnowledgeBase& kb) {
  std::vector<MlmText> out;
  for (const auto& p : kb.passages) out.push_back({p.text, -1});
  for (const auto& f : kb.facts) {
    for (int t = 0; t < kNumTemplates; ++t) {
      int64_t pos = -1;
      masked_statement(kb, f.subject, f.relation, t, &pos);
      out.push_back({render_statement(kb, f.subject, f.relation, f.object, t), pos});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {
nlohmann::ordered_json fact_json(const KnowledgeBase& kb, const FactTriple& f) {
  nlohmann::ordered_json j;
  j["id"] = f.id;
  j["subject"] = kb.surface(f.subject);
  j["relation"] = kb.relations.at(static_cast<size_t>(f.relation)).name;
  j["object"] = kb.surface(f.object);
  return j;
}
}  // namespace

void write_passages_jsonl(const KnowledgeBase& kb, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  for (const auto& p : kb.passages) {
    nlohmann::ordered_json j;
    j["id"] = p.id;
    j["title"] = p.title;
    j["text"] = p.text;
    j["fact_ids"] = p.fact_ids;
    os << j.dump() << '\n';
  }
}

void write_queries_jsonl(const KnowledgeBase& kb, const QuerySplit& qs, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  for (const auto& q : qs.queries) {
    nlohmann::ordered_json j;
    j["id"] = q.id;
    j["text"] = q.text;
    j["gold"] = q.gold;
    j["negatives"] = q.hard_negatives;
    j["fact"] = fact_json(kb, q.answer_fact);
    j["split"] = q.held_out ? "held_out" : "train";
    os << j.dump() << '\n';
  }
}

std::vector<Passage> read_passages_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::vector<Passage> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    Passage p;
    p.id = j.at("id").get<int32_t>();
    p.title = j.at("title").get<std::string>();
    p.text = j.at("text").get<std::string>();
    p.fact_ids = j.at("fact_ids").get<std::vector<int32_t>>();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace rlab
