#include "rlab/probe.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include "rlab/error.hpp"
#include "rlab/parallel.hpp"

namespace rlab {

FeatureBank build_feature_bank(const ParamStore& query_model, const ParamStore& context_model,
                               const EncoderConfig& cfg, const KnowledgeBase& kb, const QuerySplit& qs,
                               int workers) {
  FeatureBank bank;
  bank.n_layers = cfg.n_layers;
  bank.d_model = cfg.d_model;
  std::vector<std::vector<int32_t>> qt, pt;
  for (const auto& q : qs.queries) qt.push_back(kb.vocab.encode_text(q.text));
  for (const auto& p : kb.passages) pt.push_back(kb.vocab.encode_text(p.text));
  for (auto& e : encode_all(qt, query_model, cfg, workers)) bank.queries.push_back(std::move(e.features));
  for (auto& e : encode_all(pt, context_model, cfg, workers)) bank.passages.push_back(std::move(e.features));
  return bank;
}

ProbeDataset make_probe_dataset(const KnowledgeBase& kb, const QuerySplit& qs, int n_passages, int replicates,
                                uint64_t seed) {
  if (n_passages < 2) throw ContractError("probe needs N >= 2");
  if (replicates < 1) throw ContractError("replicates must be >= 1");
  const int32_t n_pass = static_cast<int32_t>(kb.passages.size());
  if (n_pass < n_passages) throw DataError("fewer passages than probe candidates");
  Rng rng = Rng(seed).fork(31 + static_cast<uint64_t>(n_passages));
  ProbeDataset ds;
  ds.n_passages = n_passages;
  for (size_t qi = 0; qi < qs.queries.size(); ++qi) {
    const Query& q = qs.queries[qi];
    for (int r = 0; r < replicates; ++r) {
      std::vector<int32_t> pool;
      std::set<int32_t> seen{q.gold};
      for (int32_t h : q.hard_negatives)
        if (seen.insert(h).second) pool.push_back(h);
      for (int extra = 0; extra < 4 && static_cast<int32_t>(seen.size()) < n_pass;) {
        const int32_t p = static_cast<int32_t>(rng.below(static_cast<uint64_t>(n_pass)));
        if (seen.insert(p).second) {
          pool.push_back(p);
          ++extra;
        }
      }
      if (static_cast<int>(pool.size()) < n_passages - 1) throw DataError("not enough negatives for a probe example");
      rng.shuffle(pool);
      ExampleSpec ex;
      ex.query = static_cast<int32_t>(qi);
      ex.candidates.push_back(q.gold);
      ex.candidates.insert(ex.candidates.end(), pool.begin(), pool.begin() + (n_passages - 1));
      (q.held_out ? ds.held_out : ds.train).push_back(std::move(ex));
    }
  }
  for (auto* split : {&ds.train, &ds.held_out}) {
    std::vector<int32_t> pos(split->size());
    for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int32_t>(i % static_cast<size_t>(n_passages));
    rng.shuffle(pos);
    for (size_t i = 0; i < split->size(); ++i) {
      auto& c = (*split)[i].candidates;
      std::swap(c[0], c[static_cast<size_t>(pos[i])]);
      (*split)[i].gold_position = pos[i];
    }
  }
  return ds;
}

ProbeExample extract_features(const FeatureBank& bank, const ExampleSpec& spec, int layer) {
  if (layer < 0 || layer > bank.n_layers)
    throw ReferenceError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(bank.n_layers) + "]");
  if (spec.query < 0 || spec.query >= static_cast<int32_t>(bank.queries.size()))
    throw ReferenceError("query index out of range");
  ProbeExample ex;
  ex.query = bank.queries[static_cast<size_t>(spec.query)].at(static_cast<size_t>(layer));
  for (int32_t c : spec.candidates) {
    if (c < 0 || c >= static_cast<int32_t>(bank.passages.size())) throw ReferenceError("passage index out of range");
    ex.candidates.push_back(bank.passages[static_cast<size_t>(c)].at(static_cast<size_t>(layer)));
  }
  ex.gold_position = spec.gold_position;
  return ex;
}

std::vector<ProbeExample> extract_features(const FeatureBank& bank, const std::vector<ExampleSpec>& specs,
                                           int layer) {
  std::vector<ProbeExample> out;
  out.reserve(specs.size());
  for (const auto& s : specs) out.push_back(extract_features(bank, s, layer));
  return out;
}

ProbeExample shuffle_candidates(ProbeExample ex, Rng& rng) {
  std::vector<int32_t> perm(ex.candidates.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<std::vector<float>> c(ex.candidates.size());
  int32_t gold = 0;
  for (size_t i = 0; i < perm.size(); ++i) {
    c[i] = std::move(ex.candidates[static_cast<size_t>(perm[i])]);
    if (perm[i] == ex.gold_position) gold = static_cast<int32_t>(i);
  }
  ex.candidates = std::move(c);
  ex.gold_position = gold;
  return ex;
}

const char* probe_mode_name(ProbeMode m) { return m == ProbeMode::kConcat ? "concat" : "pairwise"; }

// --- Probe ------------------------------------------------------------------

Probe::Probe(int layer, int n_passages, int d_model, ProbeMode mode, uint64_t seed)
    : layer_(layer), n_(n_passages), d_(d_model), mode_(mode) {
  if (n_passages < 2 || d_model <= 0) throw ContractError("invalid probe dimensions");
  Rng rng = Rng(seed).fork(41);
  const int64_t width = input_width();
  const int64_t outs = mode == ProbeMode::kConcat ? n_passages : 1;
  const float a = std::sqrt(6.0f / static_cast<float>(width + outs));
  w_.resize(static_cast<size_t>(width * outs));
  for (auto& v : w_) v = rng.uniform(-a, a);
  b_.assign(mode == ProbeMode::kConcat ? static_cast<size_t>(n_passages) : 0, 0.0f);
}

int64_t Probe::input_width() const {
  return mode_ == ProbeMode::kConcat ? static_cast<int64_t>(n_ + 1) * d_ : 3 * static_cast<int64_t>(d_);
}

namespace {

void check_example(const ProbeExample& ex, int n, int d) {
  if (static_cast<int>(ex.candidates.size()) != n) throw ShapeError("probe example has the wrong candidate count");
  if (static_cast<int>(ex.query.size()) != d) throw ShapeError("query feature width mismatch");
  for (const auto& c : ex.candidates)
    if (static_cast<int>(c.size()) != d) throw ShapeError("candidate feature width mismatch");
  if (ex.gold_position < 0 || ex.gold_position >= n) throw ShapeError("gold position out of range");
}

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Concat: one row per example. Pairwise: N rows per example.
MatF design(const std::vector<ProbeExample>& xs, const std::vector<size_t>& idx, ProbeMode mode, int n, int d) {
  const int64_t width = mode == ProbeMode::kConcat ? static_cast<int64_t>(n + 1) * d : 3 * d;
  const int64_t rows = static_cast<int64_t>(idx.size()) * (mode == ProbeMode::kConcat ? 1 : n);
  MatF X(rows, width);
  int64_t r = 0;
  for (size_t i : idx) {
    const auto& ex = xs[i];
    if (mode == ProbeMode::kConcat) {
      std::copy(ex.query.begin(), ex.query.end(), X.row(r).data());
      for (int j = 0; j < n; ++j) std::copy(ex.candidates[static_cast<size_t>(j)].begin(), ex.candidates[static_cast<size_t>(j)].end(), X.row(r).data() + (j + 1) * d);
      ++r;
    } else {
      for (int j = 0; j < n; ++j, ++r) {
        float* row = X.row(r).data();
        const auto& c = ex.candidates[static_cast<size_t>(j)];
        for (int k = 0; k < d; ++k) {
          row[k] = ex.query[static_cast<size_t>(k)];
          row[d + k] = c[static_cast<size_t>(k)];
          row[2 * d + k] = ex.query[static_cast<size_t>(k)] * c[static_cast<size_t>(k)];
        }
      }
    }
  }
  return X;
}

struct AdamVec {
  std::vector<float> m, v;
  int64_t t = 0;
  void step(std::vector<float>& w, const std::vector<float>& g, float lr) {
    if (m.empty()) m.assign(w.size(), 0.0f), v.assign(w.size(), 0.0f);
    ++t;
    const float c1 = 1.0f - std::pow(0.9f, static_cast<float>(t));
    const float c2 = 1.0f - std::pow(0.999f, static_cast<float>(t));
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = 0.9f * m[i] + 0.1f * g[i];
      v[i] = 0.999f * v[i] + 0.001f * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8f);
    }
  }
};

}  // namespace

std::vector<float> Probe::logits(const ProbeExample& ex) const {
  check_example(ex, n_, d_);
  std::vector<float> out(static_cast<size_t>(n_));
  if (mode_ == ProbeMode::kConcat) {
    for (int j = 0; j < n_; ++j) {
      double s = b_[static_cast<size_t>(j)];
      for (int k = 0; k < d_; ++k) s += static_cast<double>(ex.query[static_cast<size_t>(k)]) * w_[static_cast<size_t>(k * n_ + j)];
      for (int c = 0; c < n_; ++c) {
        const auto& f = ex.candidates[static_cast<size_t>(c)];
        const int64_t base = static_cast<int64_t>(c + 1) * d_;
        for (int k = 0; k < d_; ++k)
          s += static_cast<double>(f[static_cast<size_t>(k)]) * w_[static_cast<size_t>((base + k) * n_ + j)];
      }
      out[static_cast<size_t>(j)] = static_cast<float>(s);
    }
  } else {
    for (int j = 0; j < n_; ++j) {
      const auto& c = ex.candidates[static_cast<size_t>(j)];
      double s = 0.0;
      for (int k = 0; k < d_; ++k) {
        const double q = ex.query[static_cast<size_t>(k)], p = c[static_cast<size_t>(k)];
        s += q * w_[static_cast<size_t>(k)] + p * w_[static_cast<size_t>(d_ + k)] +
             static_cast<double>(static_cast<float>(q * p)) * w_[static_cast<size_t>(2 * d_ + k)];
      }
      out[static_cast<size_t>(j)] = static_cast<float>(s);
    }
  }
  return out;
}

int32_t Probe::predict(const ProbeExample& ex) const {
  const auto l = logits(ex);
  return static_cast<int32_t>(std::max_element(l.begin(), l.end()) - l.begin());
}

double evaluate_probe(const Probe& p, const std::vector<ProbeExample>& examples) {
  if (examples.empty()) return 0.0;
  int64_t hit = 0;
  for (const auto& ex : examples) hit += p.predict(ex) == ex.gold_position;
  return static_cast<double>(hit) / static_cast<double>(examples.size());
}

namespace {

double mean_cross_entropy(const Probe& p, const std::vector<ProbeExample>& examples) {
  double total = 0.0;
  for (const auto& ex : examples) {
    const auto l = p.logits(ex);
    const float mx = *std::max_element(l.begin(), l.end());
    double z = 0.0;
    for (float v : l) z += std::exp(static_cast<double>(v - mx));
    total += std::log(z) - static_cast<double>(l[static_cast<size_t>(ex.gold_position)] - mx);
  }
  return total / static_cast<double>(examples.size());
}

}  // namespace

Probe train_probe(const std::vector<ProbeExample>& train, int layer, int n_passages, const ProbeConfig& cfg) {
  if (train.empty()) throw DataError("empty probe training set");
  const int d = static_cast<int>(train.front().query.size());
  std::set<int32_t> classes;
  for (const auto& ex : train) {
    check_example(ex, n_passages, d);
    classes.insert(ex.gold_position);
  }
  if (classes.size() < 2) throw DataError("degenerate probe dataset: a single gold position");
  if (cfg.epochs <= 0 || !(cfg.lr > 0.0f)) throw ConfigError("probe epochs and lr must be positive");

  Probe probe(layer, n_passages, d, cfg.mode, cfg.seed);
  Rng rng = Rng(cfg.seed).fork(43);
  std::vector<size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  rng.shuffle(idx);
  size_t n_val = static_cast<size_t>(std::floor(cfg.validation_fraction * static_cast<double>(idx.size())));
  if (idx.size() - n_val < 1) n_val = 0;
  std::vector<size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<size_t> tr(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(tr.begin(), tr.end());
  std::sort(val.begin(), val.end());

  const int n = n_passages;
  const MatF X = design(train, tr, cfg.mode, n, d);
  const int64_t m = static_cast<int64_t>(tr.size());
  std::vector<int32_t> gold(tr.size());
  for (size_t i = 0; i < tr.size(); ++i) gold[i] = train[tr[i]].gold_position;
  std::vector<ProbeExample> val_set;
  for (size_t i : val) val_set.push_back(train[i]);

  AdamVec opt_w, opt_b;
  std::vector<float> gw(probe.w_.size()), gb(probe.b_.size());
  Probe best = probe;
  // Validation loss keeps improving after accuracy saturates on a small split.
  double best_loss = std::numeric_limits<double>::infinity();
  int since = 0;
  const int64_t width = probe.input_width();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    MatF logits(m, n);
    if (cfg.mode == ProbeMode::kConcat) {
      Eigen::Map<const MatF> W(probe.w_.data(), width, n);
      logits = X * W;
      for (int64_t r = 0; r < m; ++r)
        for (int j = 0; j < n; ++j) logits(r, j) += probe.b_[static_cast<size_t>(j)];
    } else {
      Eigen::Map<const Eigen::VectorXf> w(probe.w_.data(), width);
      Eigen::VectorXf s = X * w;
      logits = Eigen::Map<MatF>(s.data(), m, n);
    }
    // dL/dlogits = (softmax - onehot) / m
    MatF G(m, n);
    for (int64_t r = 0; r < m; ++r) {
      const float mx = logits.row(r).maxCoeff();
      double z = 0.0;
      for (int j = 0; j < n; ++j) z += std::exp(static_cast<double>(logits(r, j) - mx));
      for (int j = 0; j < n; ++j) {
        const double p = std::exp(static_cast<double>(logits(r, j) - mx)) / z;
        G(r, j) = static_cast<float>((p - (j == gold[static_cast<size_t>(r)] ? 1.0 : 0.0)) / static_cast<double>(m));
      }
    }
    if (cfg.mode == ProbeMode::kConcat) {
      MatF dW = X.transpose() * G;
      std::copy(dW.data(), dW.data() + dW.size(), gw.begin());
      for (int j = 0; j < n; ++j) gb[static_cast<size_t>(j)] = G.col(j).sum();
      opt_b.step(probe.b_, gb, cfg.lr);
    } else {
      Eigen::Map<const Eigen::VectorXf> g(G.data(), m * n);
      Eigen::VectorXf dw = X.transpose() * g;
      std::copy(dw.data(), dw.data() + dw.size(), gw.begin());
    }
    opt_w.step(probe.w_, gw, cfg.lr);

    if (!val_set.empty()) {
      const double loss = mean_cross_entropy(probe, val_set);
      if (loss < best_loss) {
        best_loss = loss;
        best = probe;
        since = 0;
      } else if (++since >= cfg.patience) {
        break;
      }
    }
  }
  Probe out = val_set.empty() ? probe : best;
  out.trained_ = true;
  return out;
}

// --- tables -----------------------------------------------------------------

std::vector<ProbeRow> probe_table(const std::vector<ProbeModel>& models, const KnowledgeBase& kb, const QuerySplit& qs,
                                  const std::vector<int>& ns, const std::vector<int>& layers, const ProbeConfig& cfg,
                                  int replicates, bool with_untrained, int workers) {
  if (models.empty()) throw ContractError("probe_table needs at least one model");
  for (const auto& m : models) {
    if (!(m.config == models.front().config)) throw ConfigError("probe_table models have different encoder configs");
    if (!m.query || !m.context) throw ContractError("probe model " + m.tag + " has no parameters");
  }
  std::vector<ProbeDataset> sets;
  for (int n : ns) sets.push_back(make_probe_dataset(kb, qs, n, replicates, cfg.seed));

  std::vector<ProbeRow> rows;
  for (const auto& model : models) {
    const FeatureBank bank = build_feature_bank(*model.query, *model.context, model.config, kb, qs, workers);
    struct Cell {
      size_t set;
      int layer;
      double trained = 0.0, untrained = 0.0;
      int64_t count = 0;
    };
    std::vector<Cell> cells;
    for (size_t s = 0; s < sets.size(); ++s)
      for (int l : layers) cells.push_back({s, l});
    parallel_for(cells.size(), workers, [&](size_t i) {
      Cell& c = cells[i];
      const ProbeDataset& ds = sets[c.set];
      const auto tr = extract_features(bank, ds.train, c.layer);
      const auto ho = extract_features(bank, ds.held_out, c.layer);
      ProbeConfig pc = cfg;
      pc.seed = cfg.seed + 1000 * static_cast<uint64_t>(ds.n_passages) + static_cast<uint64_t>(c.layer);
      c.trained = evaluate_probe(train_probe(tr, c.layer, ds.n_passages, pc), ho);
      // A single random scorer carries a fixed preference that decides every
      // example alike; the mean over seeds estimates the expected accuracy.
      for (int k = 0; k < kUntrainedSeeds; ++k)
        c.untrained += evaluate_probe(Probe(c.layer, ds.n_passages, bank.d_model, cfg.mode, pc.seed + 7 * static_cast<uint64_t>(k)), ho) /
                       kUntrainedSeeds;
      c.count = static_cast<int64_t>(ho.size());
    });
    for (const auto& c : cells) rows.push_back({model.tag, sets[c.set].n_passages, c.layer, c.trained, c.count});
    if (with_untrained)
      for (const auto& c : cells)
        rows.push_back({model.tag + "/untrained", sets[c.set].n_passages, c.layer, c.untrained, c.count});
  }
  return rows;
}

void write_probe_table_csv(const std::vector<ProbeRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "model_tag,n_passages,layer,accuracy\n";
  os.precision(6);
  os << std::fixed;
  for (const auto& r : rows) os << r.model_tag << ',' << r.n_passages << ',' << r.layer << ',' << r.accuracy << '\n';
}

bool probe_fact_check(const FeatureBank& bank, const QuerySplit& qs, int32_t query_index, const Probe& probe) {
  if (!probe.trained()) throw ContractError("probe_fact_check needs a trained probe");
  if (query_index < 0 || query_index >= static_cast<int32_t>(qs.queries.size()))
    throw ReferenceError("query index out of range");
  const Query& q = qs.queries[static_cast<size_t>(query_index)];
  const int n = probe.n_passages();
  const auto& negs = q.hard_negatives;
  if (static_cast<int>(negs.size()) < n - 1) throw DataError("query has too few hard negatives for the probe");
  for (size_t start = 0; start < negs.size(); ++start) {
    ExampleSpec spec;
    spec.query = query_index;
    spec.candidates.push_back(q.gold);
    for (int k = 0; k < n - 1; ++k) spec.candidates.push_back(negs[(start + static_cast<size_t>(k)) % negs.size()]);
    for (int pos = 0; pos < n; ++pos) {
      ExampleSpec s = spec;
      std::swap(s.candidates[0], s.candidates[static_cast<size_t>(pos)]);
      s.gold_position = pos;
      if (probe.predict(extract_features(bank, s, probe.layer())) != pos) return false;
    }
  }
  return true;
}

}  // namespace rlab
