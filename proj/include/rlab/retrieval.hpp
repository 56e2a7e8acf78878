#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rlab/attribution.hpp"
#include "rlab/corpus.hpp"
#include "rlab/encoder.hpp"

namespace rlab {

// Score used everywhere for query-passage similarity: inner product
// accumulated in double in ascending index order, rounded once to float.
float inner_product(std::span<const float> a, std::span<const float> b);

// Immutable exact inner-product index.
struct EmbeddingIndex {
  std::string encoder_tag;
  std::string encoder_hash;
  int64_t n = 0;
  int64_t d = 0;
  std::vector<float> matrix;  // row-major [n, d]
  std::vector<int32_t> ids;
  std::vector<std::string> titles;

  std::span<const float> row(int64_t i) const {
    return {matrix.data() + i * d, static_cast<size_t>(d)};
  }
};

// Passage rows embedded with the context tower. Throws DataError on an empty
// corpus.
EmbeddingIndex build_index(const ParamStore& context_params, const EncoderConfig& cfg, const Vocab& vocab,
                           const std::vector<Passage>& corpus, const std::string& tag, int workers = 1);
// Index over precomputed rows (ids 0..n-1 unless given).
EmbeddingIndex index_from_matrix(std::vector<float> matrix, int64_t n, int64_t d, std::vector<int32_t> ids = {},
                                 std::vector<std::string> titles = {});

struct Hit {
  int32_t id;
  float score;
  bool operator==(const Hit&) const = default;
};
struct SearchResult {
  std::vector<Hit> hits;
  bool truncated = false;  // k exceeded the corpus size
};

// Exact top-k, descending score; ties broken by ascending id. The scan is
// blocked over rows. Throws ContractError when k < 1 or the width differs.
SearchResult search(const EmbeddingIndex& index, std::span<const float> query, int k);
SearchResult search_text(const EmbeddingIndex& index, const ParamStore& query_params, const EncoderConfig& cfg,
                         std::span<const int32_t> query_tokens, int k);

// Top-1 accuracy over queries (gold id compared with hits[0].id).
double top1_accuracy(const EmbeddingIndex& index, const ParamStore& query_params, const EncoderConfig& cfg,
                     const KnowledgeBase& kb, const std::vector<const Query*>& queries, int workers = 1);

// Layout (little-endian): "RIDX1" | u32 tag_len, tag | u32 hash_len, hash |
// u64 n | u64 d | n*d float32 | per row: i32 id, u32 title_len, title | u32 crc32.
void save_index(const EmbeddingIndex& index, const std::string& path);
EmbeddingIndex load_index(const std::string& path);

struct RetrievalRow {
  int32_t query_id;
  std::string query;
  bool top1_hit_pretrained;
  bool top1_hit_dpr;
  int64_t strong_count_pretrained;
  int64_t strong_count_dpr;
  std::vector<std::string> top5_pretrained;
  std::vector<std::string> top5_dpr;
};

struct RetrievalModels {
  const ParamStore* pretrained;
  const ParamStore* dpr_query;
  const ParamStore* dpr_context;
  EncoderConfig config;
};

// Per query: top-1 correctness and top-5 titles for both models plus the
// query-tower strong-neuron count (per-input max, threshold ac.threshold).
std::vector<RetrievalRow> retrieval_report(const RetrievalModels& models, const EmbeddingIndex& pretrained_index,
                                           const EmbeddingIndex& dpr_index, const KnowledgeBase& kb,
                                           const std::vector<const Query*>& queries, const AttributionConfig& ac,
                                           std::vector<AttributionMap>* maps_pretrained = nullptr,
                                           std::vector<AttributionMap>* maps_dpr = nullptr);
// Same rows from precomputed query-tower maps (maps[i] belongs to
// queries[i]). Throws ContractError on a count or input-id mismatch.
std::vector<RetrievalRow> retrieval_rows(const RetrievalModels& models, const EmbeddingIndex& pretrained_index,
                                         const EmbeddingIndex& dpr_index, const KnowledgeBase& kb,
                                         const std::vector<const Query*>& queries,
                                         const std::vector<AttributionMap>& maps_pretrained,
                                         const std::vector<AttributionMap>& maps_dpr, double threshold,
                                         bool absolute = false);
// Columns: query_id,query,top1_pretrained,top1_dpr,strong_pretrained,strong_dpr,top5_pretrained,top5_dpr
void write_retrieval_csv(const std::vector<RetrievalRow>& rows, const std::string& path);

}  // namespace rlab
