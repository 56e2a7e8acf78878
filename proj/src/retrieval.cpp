#include "rlab/retrieval.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "rlab/error.hpp"
#include "rlab/parallel.hpp"
#include "rlab/trainer.hpp"

namespace rlab {

float inner_product(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("inner product of vectors with different widths");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return static_cast<float>(s);
}

EmbeddingIndex build_index(const ParamStore& context_params, const EncoderConfig& cfg, const Vocab& vocab,
                           const std::vector<Passage>& corpus, const std::string& tag, int workers) {
  if (corpus.empty()) throw DataError("cannot index an empty corpus");
  const Shape& tok = context_params.at("embed.token").shape();
  if (tok[0] != cfg.vocab_size || tok[1] != cfg.d_model)
    throw ConfigError("context parameters do not match the encoder config");
  std::vector<std::vector<int32_t>> seqs;
  seqs.reserve(corpus.size());
  for (const auto& p : corpus) seqs.push_back(vocab.encode_text(p.text));
  const auto enc = encode_all(seqs, context_params, cfg, workers);
  EmbeddingIndex idx;
  idx.encoder_tag = tag;
  idx.encoder_hash = checkpoint_hash(context_params, cfg);
  idx.n = static_cast<int64_t>(corpus.size());
  idx.d = cfg.d_model;
  idx.matrix.reserve(static_cast<size_t>(idx.n * idx.d));
  for (size_t i = 0; i < corpus.size(); ++i) {
    idx.matrix.insert(idx.matrix.end(), enc[i].embedding.begin(), enc[i].embedding.end());
    idx.ids.push_back(corpus[i].id);
    idx.titles.push_back(corpus[i].title);
  }
  return idx;
}

EmbeddingIndex index_from_matrix(std::vector<float> matrix, int64_t n, int64_t d, std::vector<int32_t> ids,
                                 std::vector<std::string> titles) {
  if (n < 1 || d < 1 || static_cast<int64_t>(matrix.size()) != n * d) throw ShapeError("index matrix must be n x d");
  if (ids.empty())
    for (int64_t i = 0; i < n; ++i) ids.push_back(static_cast<int32_t>(i));
  if (titles.empty())
    for (int32_t id : ids) titles.push_back(std::to_string(id));
  if (static_cast<int64_t>(ids.size()) != n || static_cast<int64_t>(titles.size()) != n)
    throw ShapeError("index ids and titles must have one entry per row");
  EmbeddingIndex idx;
  idx.n = n;
  idx.d = d;
  idx.matrix = std::move(matrix);
  idx.ids = std::move(ids);
  idx.titles = std::move(titles);
  return idx;
}

namespace {
constexpr int64_t kBlockRows = 64;

bool ranks_before(const Hit& a, const Hit& b) { return a.score > b.score || (a.score == b.score && a.id < b.id); }
}  // namespace

SearchResult search(const EmbeddingIndex& index, std::span<const float> query, int k) {
  if (k < 1) throw ContractError("k must be >= 1");
  if (static_cast<int64_t>(query.size()) != index.d) throw ContractError("query width differs from the index");
  SearchResult res;
  const int64_t kk = std::min<int64_t>(k, index.n);
  res.truncated = k > index.n;
  std::vector<Hit> all;
  all.reserve(static_cast<size_t>(index.n));
  for (int64_t start = 0; start < index.n; start += kBlockRows) {
    const int64_t end = std::min(index.n, start + kBlockRows);
    for (int64_t r = start; r < end; ++r)
      all.push_back({index.ids[static_cast<size_t>(r)], inner_product(query, index.row(r))});
  }
  std::partial_sort(all.begin(), all.begin() + kk, all.end(), ranks_before);
  res.hits.assign(all.begin(), all.begin() + kk);
  return res;
}

SearchResult search_text(const EmbeddingIndex& index, const ParamStore& query_params, const EncoderConfig& cfg,
                         std::span<const int32_t> query_tokens, int k) {
  return search(index, encode(query_tokens, query_params, cfg).embedding, k);
}

double top1_accuracy(const EmbeddingIndex& index, const ParamStore& query_params, const EncoderConfig& cfg,
                     const KnowledgeBase& kb, const std::vector<const Query*>& queries, int workers) {
  if (queries.empty()) return 0.0;
  std::vector<std::vector<int32_t>> seqs;
  for (const Query* q : queries) seqs.push_back(kb.vocab.encode_text(q->text));
  const auto enc = encode_all(seqs, query_params, cfg, workers);
  int64_t hit = 0;
  for (size_t i = 0; i < queries.size(); ++i) hit += search(index, enc[i].embedding, 1).hits[0].id == queries[i]->gold;
  return static_cast<double>(hit) / static_cast<double>(queries.size());
}

// --- persistence ------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'R', 'I', 'D', 'X', '1'};

template <typename T>
void put(std::string& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

void put_str(std::string& out, const std::string& s) {
  put<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out += s;
}

struct Cursor {
  const std::string& b;
  size_t end;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > end) throw CorruptionError("index file truncated");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, b.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::string str() {
    const uint32_t n = get<uint32_t>();
    need(n);
    std::string s = b.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_index(const EmbeddingIndex& index, const std::string& path) {
  std::string out(kMagic, sizeof(kMagic));
  put_str(out, index.encoder_tag);
  put_str(out, index.encoder_hash);
  put<uint64_t>(out, static_cast<uint64_t>(index.n));
  put<uint64_t>(out, static_cast<uint64_t>(index.d));
  for (float v : index.matrix) put<float>(out, v);
  for (int64_t i = 0; i < index.n; ++i) {
    put<int32_t>(out, index.ids[static_cast<size_t>(i)]);
    put_str(out, index.titles[static_cast<size_t>(i)]);
  }
  put<uint32_t>(out, static_cast<uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(out.data()),
                                                 static_cast<uInt>(out.size()))));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw IoError("write failed for " + path);
}

EmbeddingIndex load_index(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string b = ss.str();
  if (b.size() < sizeof(kMagic) || std::memcmp(b.data(), kMagic, sizeof(kMagic)) != 0)
    throw FormatError("not an index file (bad magic)");
  if (b.size() < sizeof(kMagic) + 4) throw CorruptionError("index file truncated");
  Cursor c{b, b.size() - 4};
  c.pos = sizeof(kMagic);
  EmbeddingIndex idx;
  idx.encoder_tag = c.str();
  idx.encoder_hash = c.str();
  idx.n = static_cast<int64_t>(c.get<uint64_t>());
  idx.d = static_cast<int64_t>(c.get<uint64_t>());
  if (idx.n < 1 || idx.d < 1 || idx.n > (int64_t{1} << 32) || idx.d > (int64_t{1} << 20))
    throw FormatError("implausible index dimensions");
  c.need(static_cast<size_t>(idx.n * idx.d) * sizeof(float));
  idx.matrix.resize(static_cast<size_t>(idx.n * idx.d));
  for (auto& v : idx.matrix) v = c.get<float>();
  for (int64_t i = 0; i < idx.n; ++i) {
    idx.ids.push_back(c.get<int32_t>());
    idx.titles.push_back(c.str());
  }
  if (c.pos != c.end) throw CorruptionError("trailing bytes in index file");
  Cursor tail{b, b.size()};
  tail.pos = b.size() - 4;
  const uint32_t stored = tail.get<uint32_t>();
  const uint32_t actual =
      static_cast<uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(b.data()), static_cast<uInt>(b.size() - 4)));
  if (stored != actual) throw CorruptionError("index checksum mismatch");
  return idx;
}

// --- report -----------------------------------------------------------------

std::vector<RetrievalRow> retrieval_rows(const RetrievalModels& models, const EmbeddingIndex& pretrained_index,
                                         const EmbeddingIndex& dpr_index, const KnowledgeBase& kb,
                                         const std::vector<const Query*>& queries,
                                         const std::vector<AttributionMap>& maps_pretrained,
                                         const std::vector<AttributionMap>& maps_dpr, double threshold, bool absolute) {
  if (maps_pretrained.size() != queries.size() || maps_dpr.size() != queries.size())
    throw ContractError("one attribution map per query and model is required");
  auto titles = [](const EmbeddingIndex& idx, const SearchResult& r) {
    std::vector<std::string> out;
    for (const auto& h : r.hits) {
      const auto it = std::find(idx.ids.begin(), idx.ids.end(), h.id);
      out.push_back(idx.titles[static_cast<size_t>(it - idx.ids.begin())]);
    }
    return out;
  };
  std::vector<RetrievalRow> rows;
  for (size_t i = 0; i < queries.size(); ++i) {
    const Query* q = queries[i];
    if (maps_pretrained[i].input_id != q->id || maps_dpr[i].input_id != q->id)
      throw ContractError("attribution map does not belong to query " + std::to_string(q->id));
    const auto qt = kb.vocab.encode_text(q->text);
    RetrievalRow row;
    row.query_id = q->id;
    row.query = q->text;
    const auto rp = search_text(pretrained_index, *models.pretrained, models.config, qt, 5);
    const auto rd = search_text(dpr_index, *models.dpr_query, models.config, qt, 5);
    row.top1_hit_pretrained = !rp.hits.empty() && rp.hits[0].id == q->gold;
    row.top1_hit_dpr = !rd.hits.empty() && rd.hits[0].id == q->gold;
    row.top5_pretrained = titles(pretrained_index, rp);
    row.top5_dpr = titles(dpr_index, rd);
    row.strong_count_pretrained = strong_neuron_count(maps_pretrained[i], threshold, absolute).count;
    row.strong_count_dpr = strong_neuron_count(maps_dpr[i], threshold, absolute).count;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<RetrievalRow> retrieval_report(const RetrievalModels& models, const EmbeddingIndex& pretrained_index,
                                           const EmbeddingIndex& dpr_index, const KnowledgeBase& kb,
                                           const std::vector<const Query*>& queries, const AttributionConfig& ac,
                                           std::vector<AttributionMap>* maps_pretrained,
                                           std::vector<AttributionMap>* maps_dpr) {
  std::vector<AttributionMap> mp, md;
  for (const Query* q : queries) {
    if (q->gold < 0 || q->gold >= static_cast<int32_t>(kb.passages.size()))
      throw DataError("gold passage missing for query " + std::to_string(q->id));
    AttributionObjective obj{kb.vocab.encode_text(q->text),
                             kb.vocab.encode_text(kb.passages[static_cast<size_t>(q->gold)].text), Tower::kQuery,
                             q->id};
    mp.push_back(attribute(obj, *models.pretrained, *models.pretrained, models.config, ac));
    md.push_back(attribute(obj, *models.dpr_query, *models.dpr_context, models.config, ac));
  }
  auto rows = retrieval_rows(models, pretrained_index, dpr_index, kb, queries, mp, md, ac.threshold, ac.absolute);
  if (maps_pretrained) *maps_pretrained = std::move(mp);
  if (maps_dpr) *maps_dpr = std::move(md);
  return rows;
}

void write_retrieval_csv(const std::vector<RetrievalRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "query_id,query,top1_pretrained,top1_dpr,strong_pretrained,strong_dpr,top5_pretrained,top5_dpr\n";
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "|" : "") + v[i];
    return s;
  };
  for (const auto& r : rows)
    os << r.query_id << ",\"" << r.query << "\"," << r.top1_hit_pretrained << ',' << r.top1_hit_dpr << ','
       << r.strong_count_pretrained << ',' << r.strong_count_dpr << ',' << join(r.top5_pretrained) << ','
       << join(r.top5_dpr) << '\n';
}

}  // namespace rlab
