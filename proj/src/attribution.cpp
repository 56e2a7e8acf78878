#include "rlab/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "rlab/error.hpp"

namespace rlab {

const char* tower_name(Tower t) { return t == Tower::kQuery ? "query" : "context"; }
const char* max_norm_name(MaxNorm n) { return n == MaxNorm::kPerInput ? "per_input" : "per_layer"; }

void AttributionConfig::validate() const {
  if (riemann_steps < 1) throw ConfigError("riemann_steps must be >= 1");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must be in (0,1)");
  for (double t : sweep)
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("sweep thresholds must be in (0,1]");
  if (chunk_tokens < 1) throw ConfigError("chunk_tokens must be >= 1");
}

size_t AttributionMap::index(const NeuronRef& n) const {
  if (n.layer_index < 0 || n.layer_index >= n_layers) throw ReferenceError("block out of range");
  const int w = width(n.sublayer);
  if (n.neuron_index < 0 || n.neuron_index >= w) throw ReferenceError("neuron out of range");
  const size_t per_block = static_cast<size_t>(d_intermediate + d_model);
  return static_cast<size_t>(n.layer_index) * per_block +
         (n.sublayer == Sublayer::kIntermediate ? 0 : static_cast<size_t>(d_intermediate)) +
         static_cast<size_t>(n.neuron_index);
}

NeuronRef AttributionMap::neuron_at(size_t i) const {
  const size_t per_block = static_cast<size_t>(d_intermediate + d_model);
  NeuronRef n;
  n.layer_index = static_cast<int>(i / per_block);
  const size_t r = i % per_block;
  if (r < static_cast<size_t>(d_intermediate)) {
    n.sublayer = Sublayer::kIntermediate;
    n.neuron_index = static_cast<int>(r);
  } else {
    n.sublayer = Sublayer::kOutput;
    n.neuron_index = static_cast<int>(r - static_cast<size_t>(d_intermediate));
  }
  return n;
}

double riemann_mean(const std::function<double(double)>& f, int m) {
  if (m < 1) throw ContractError("riemann steps must be >= 1");
  double s = 0.0;
  for (int k = 1; k <= m; ++k) s += f(static_cast<double>(k) / m);
  return s / m;
}

namespace {

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

const ParamStore& scaled_store(const AttributionObjective& obj, const ParamStore& q, const ParamStore& c) {
  return obj.tower == Tower::kQuery ? q : c;
}

// Unmodified per-block activations of the scaled tower's sequence.
struct Trace {
  int64_t T = 0;
  std::vector<Tensor> x1, z, y;  // per block: FFN input, intermediate pre-activation, output pre-patch
};

Trace trace(const ParamStore& store, const EncoderConfig& cfg, std::span<const int32_t> tokens) {
  Graph g;
  EncoderGraph eg(g, store, cfg);
  SequenceBatch sb;
  sb.append(tokens);
  Trace tr;
  tr.T = static_cast<int64_t>(tokens.size());
  Var x = eg.embed(sb);
  for (int b = 0; b < cfg.n_layers; ++b) {
    Var x1 = eg.attention_sublayer(b, x, sb.lengths);
    Var z = eg.intermediate_pre(b, x1);
    Var y = eg.output_pre(b, g.gelu(z));
    x = eg.finish_block(b, x1, eg.add_patch(b, x1, y));
    tr.x1.push_back(g.value(x1));
    tr.z.push_back(g.value(z));
    tr.y.push_back(g.value(y));
  }
  return tr;
}

Tensor tile_rows(const Tensor& src, int64_t rows, int64_t copies) {
  const int64_t w = src.cols();
  Tensor out(Shape{rows * copies, w});
  for (int64_t c = 0; c < copies; ++c) std::copy(src.data(), src.data() + rows * w, out.data() + c * rows * w);
  return out;
}

// dP/dalpha for copies of one (block, sublayer) group.
void group_gradients(const ParamStore& store, const EncoderConfig& cfg, const Trace& tr,
                     std::span<const float> other, int block, Sublayer sub, const std::vector<ScaledNeuron>& pts,
                     std::vector<double>& out) {
  const bool last_cls = block == cfg.n_layers - 1 && cfg.pooling == Pooling::kCls;
  const int64_t R = last_cls ? 1 : tr.T;  // rows per copy that can influence P
  const int64_t C = static_cast<int64_t>(pts.size());
  const Tensor& base = sub == Sublayer::kIntermediate ? tr.z[static_cast<size_t>(block)] : tr.y[static_cast<size_t>(block)];
  const int64_t W = base.cols();

  Graph g;
  EncoderGraph eg(g, store, cfg);
  Tensor scaled = tile_rows(base, R, C);
  for (int64_t c = 0; c < C; ++c) {
    const int col = pts[static_cast<size_t>(c)].neuron.neuron_index;
    const float a = pts[static_cast<size_t>(c)].alpha;
    for (int64_t r = 0; r < R; ++r) scaled.at(c * R + r, col) = base.at(r, col) * a;
  }
  Var leaf = g.input(std::move(scaled), true);
  Var x1 = g.input(tile_rows(tr.x1[static_cast<size_t>(block)], R, C));
  Var y = sub == Sublayer::kIntermediate ? eg.output_pre(block, g.gelu(leaf)) : leaf;
  Var x = eg.finish_block(block, x1, eg.add_patch(block, x1, y));
  std::vector<int32_t> lens(static_cast<size_t>(C), static_cast<int32_t>(R));
  Var pooled;
  if (last_cls) {
    pooled = x;
  } else {
    for (int b = block + 1; b < cfg.n_layers; ++b) {
      Var a1 = eg.attention_sublayer(b, x, lens);
      if (b == cfg.n_layers - 1 && cfg.pooling == Pooling::kCls) {
        std::vector<int64_t> cls(static_cast<size_t>(C));
        for (int64_t c = 0; c < C; ++c) cls[static_cast<size_t>(c)] = c * R;
        Var a1c = g.gather_rows(a1, cls);
        Var yb = eg.output_pre(b, g.gelu(eg.intermediate_pre(b, a1c)));
        x = eg.finish_block(b, a1c, eg.add_patch(b, a1c, yb));
        lens.assign(static_cast<size_t>(C), 1);
      } else {
        Var yb = eg.output_pre(b, g.gelu(eg.intermediate_pre(b, a1)));
        x = eg.finish_block(b, a1, eg.add_patch(b, a1, yb));
      }
    }
    pooled = eg.pool(x, lens);
  }
  Tensor ov(Shape{1, static_cast<int64_t>(other.size())});
  std::copy(other.begin(), other.end(), ov.data());
  Var p = g.sum(g.matmul(pooled, g.input(std::move(ov)), true));
  g.backward(p);
  const Tensor& G = g.grad(leaf);
  for (int64_t c = 0; c < C; ++c) {
    const auto& pt = pts[static_cast<size_t>(c)];
    const int col = pt.neuron.neuron_index;
    double s = 0.0;
    for (int64_t r = 0; r < R; ++r) s += static_cast<double>(G.at(c * R + r, col)) * base.at(r, col);
    if (!std::isfinite(s)) {
      throw NumericError("non-finite attribution gradient at block " + std::to_string(block) + " " +
                         sublayer_name(sub) + " neuron " + std::to_string(col) + " alpha " + std::to_string(pt.alpha));
    }
    out.push_back(s);
  }
  (void)W;
}

}  // namespace

double objective_value(const AttributionObjective& obj, const ParamStore& query_params,
                       const ParamStore& context_params, const EncoderConfig& cfg, const NeuronRef& n, float alpha) {
  const bool q_scaled = obj.tower == Tower::kQuery;
  const Encoding eq = q_scaled ? encode_with_scaled_neuron(obj.query, query_params, cfg, n, alpha)
                               : encode(obj.query, query_params, cfg);
  const Encoding ep = q_scaled ? encode(obj.passage, context_params, cfg)
                               : encode_with_scaled_neuron(obj.passage, context_params, cfg, n, alpha);
  return dot(eq.embedding, ep.embedding);
}

std::vector<double> path_gradients(const AttributionObjective& obj, const ParamStore& query_params,
                                   const ParamStore& context_params, const EncoderConfig& cfg,
                                   const std::vector<ScaledNeuron>& points, int chunk_tokens) {
  if (chunk_tokens < 1) throw ContractError("chunk_tokens must be >= 1");
  const ParamStore& store = scaled_store(obj, query_params, context_params);
  const auto& seq = obj.tower == Tower::kQuery ? obj.query : obj.passage;
  const auto& other_seq = obj.tower == Tower::kQuery ? obj.passage : obj.query;
  const ParamStore& other_store = obj.tower == Tower::kQuery ? context_params : query_params;
  validate_tokens(seq, cfg);
  for (const auto& p : points) {
    validate_neuron(p.neuron, cfg);
    if (!(p.alpha >= 0.0f && p.alpha <= 1.0f)) throw ContractError("alpha must be in [0,1]");
  }
  const Trace tr = trace(store, cfg, seq);
  const std::vector<float> other = encode(other_seq, other_store, cfg).embedding;

  // Group by (block, sublayer) preserving first-seen order; results are
  // scattered back to the caller's order.
  std::map<std::pair<int, int>, std::vector<size_t>> groups;
  for (size_t i = 0; i < points.size(); ++i)
    groups[{points[i].neuron.layer_index, static_cast<int>(points[i].neuron.sublayer)}].push_back(i);
  std::vector<double> result(points.size());
  for (const auto& [key, idx] : groups) {
    const int block = key.first;
    const Sublayer sub = static_cast<Sublayer>(key.second);
    const bool last_cls = block == cfg.n_layers - 1 && cfg.pooling == Pooling::kCls;
    const int64_t R = last_cls ? 1 : tr.T;
    const size_t per_chunk = static_cast<size_t>(std::max<int64_t>(1, chunk_tokens / R));
    for (size_t s = 0; s < idx.size(); s += per_chunk) {
      std::vector<ScaledNeuron> pts;
      for (size_t k = s; k < std::min(idx.size(), s + per_chunk); ++k) pts.push_back(points[idx[k]]);
      std::vector<double> g;
      group_gradients(store, cfg, tr, other, block, sub, pts, g);
      for (size_t k = 0; k < pts.size(); ++k) result[idx[s + k]] = g[k];
    }
  }
  return result;
}

AttributionMap attribute(const AttributionObjective& obj, const ParamStore& query_params,
                         const ParamStore& context_params, const EncoderConfig& cfg, const AttributionConfig& ac) {
  ac.validate();
  AttributionMap map;
  map.n_layers = cfg.n_layers;
  map.d_model = cfg.d_model;
  map.d_intermediate = cfg.d_intermediate;
  map.tower = obj.tower;
  map.input_id = obj.input_id;
  const size_t n = static_cast<size_t>(cfg.n_layers) * static_cast<size_t>(cfg.d_intermediate + cfg.d_model);
  map.scores.assign(n, 0.0);
  const int m = ac.riemann_steps;
  std::vector<ScaledNeuron> pts;
  pts.reserve(n * static_cast<size_t>(m));
  for (size_t i = 0; i < n; ++i)
    for (int k = 1; k <= m; ++k) pts.push_back({map.neuron_at(i), static_cast<float>(k) / static_cast<float>(m)});
  const auto g = path_gradients(obj, query_params, context_params, cfg, pts, ac.chunk_tokens);
  for (size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int k = 0; k < m; ++k) s += g[i * static_cast<size_t>(m) + static_cast<size_t>(k)];
    map.scores[i] = s / m;
  }
  return map;
}

std::vector<char> strong_set(const AttributionMap& map, double theta, double max_score, bool absolute) {
  std::vector<char> out(map.scores.size(), 0);
  if (!(max_score > 0.0)) return out;
  const double cut = theta * max_score;
  for (size_t i = 0; i < map.scores.size(); ++i) {
    const double s = absolute ? std::abs(map.scores[i]) : map.scores[i];
    out[i] = s >= cut;
  }
  return out;
}

namespace {
double map_max(const AttributionMap& map, bool absolute) {
  double mx = 0.0;
  bool any = false;
  for (double s : map.scores) {
    const double v = absolute ? std::abs(s) : s;
    if (!any || v > mx) mx = v, any = true;
  }
  return mx;
}
}  // namespace

StrongCount strong_neuron_count(const AttributionMap& map, double theta, bool absolute) {
  StrongCount c;
  const double mx = map_max(map, absolute);
  if (!(mx > 0.0)) {
    c.all_zero = true;
    return c;
  }
  for (char v : strong_set(map, theta, mx, absolute)) c.count += v;
  return c;
}

ActivationProfile activation_profile(const std::string& model_tag, const std::vector<AttributionMap>& maps,
                                     const std::vector<double>& thetas, MaxNorm norm, bool absolute) {
  if (maps.empty()) throw ContractError("activation profile needs at least one input");
  const auto& f = maps.front();
  for (const auto& m : maps) {
    if (m.n_layers != f.n_layers || m.d_model != f.d_model || m.d_intermediate != f.d_intermediate ||
        m.tower != f.tower)
      throw ConfigError("attribution maps disagree on grid or tower");
  }
  ActivationProfile prof;
  prof.model_tag = model_tag;
  prof.tower = f.tower;
  prof.norm = norm;

  // Max per input (whole map), or per (block, sublayer) across all inputs.
  std::vector<double> input_max;
  for (const auto& m : maps) input_max.push_back(map_max(m, absolute));
  std::map<std::pair<int, int>, double> layer_max;
  for (const auto& m : maps) {
    for (size_t i = 0; i < m.scores.size(); ++i) {
      const NeuronRef n = m.neuron_at(i);
      const double v = absolute ? std::abs(m.scores[i]) : m.scores[i];
      auto key = std::make_pair(n.layer_index, static_cast<int>(n.sublayer));
      auto it = layer_max.find(key);
      if (it == layer_max.end() || v > it->second) layer_max[key] = v;
    }
  }
  for (const auto& m : maps) {
    std::vector<int64_t> counts;
    for (double t : thetas) {
      int64_t c = 0;
      for (char v : strong_set(m, t, input_max[static_cast<size_t>(&m - maps.data())], absolute)) c += v;
      counts.push_back(c);
    }
    prof.per_input_counts.push_back(std::move(counts));
  }
  for (int b = 0; b < f.n_layers; ++b) {
    for (Sublayer s : {Sublayer::kIntermediate, Sublayer::kOutput}) {
      for (double t : thetas) {
        std::vector<char> any(static_cast<size_t>(f.width(s)), 0);
        for (size_t k = 0; k < maps.size(); ++k) {
          const auto& m = maps[k];
          const double mx = norm == MaxNorm::kPerInput ? input_max[k] : layer_max[{b, static_cast<int>(s)}];
          if (!(mx > 0.0)) continue;
          for (int i = 0; i < f.width(s); ++i) {
            const double v = m.score({b, s, i});
            if ((absolute ? std::abs(v) : v) >= t * mx) any[static_cast<size_t>(i)] = 1;
          }
        }
        int64_t c = 0;
        for (char v : any) c += v;
        prof.cells.push_back({b, s, t, c});
      }
    }
  }
  return prof;
}

void write_attribution_csv(const std::string& model_tag, const std::vector<AttributionMap>& maps,
                           const std::string& path) {
  if (maps.empty()) throw ContractError("no attribution maps to write");
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "model_tag,tower,block,sublayer,neuron,score\n";
  os.precision(9);
  const auto& f = maps.front();
  for (size_t i = 0; i < f.scores.size(); ++i) {
    double mx = f.scores[i];
    for (const auto& m : maps) mx = std::max(mx, m.scores.at(i));
    const NeuronRef n = f.neuron_at(i);
    os << model_tag << ',' << tower_name(f.tower) << ',' << n.layer_index << ',' << sublayer_name(n.sublayer) << ','
       << n.neuron_index << ',' << mx << '\n';
  }
}

void write_profile_csv(const std::vector<ActivationProfile>& profiles, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "model_tag,block,sublayer,theta,any_input_count\n";
  for (const auto& p : profiles)
    for (const auto& c : p.cells)
      os << p.model_tag << ',' << c.block << ',' << sublayer_name(c.sublayer) << ',' << c.theta << ','
         << c.any_input_count << '\n';
}

void write_profile_dat(const std::vector<ActivationProfile>& profiles, const std::string& path) {
  if (profiles.empty()) throw ContractError("no profiles to write");
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "# block sublayer theta";
  for (const auto& p : profiles) os << " count_" << p.model_tag;
  os << '\n';
  const size_t n = profiles.front().cells.size();
  for (const auto& p : profiles)
    if (p.cells.size() != n) throw ContractError("profiles have different grids");
  for (size_t i = 0; i < n; ++i) {
    const auto& c = profiles.front().cells[i];
    os << c.block << ' ' << (c.sublayer == Sublayer::kIntermediate ? 0 : 1) << ' ' << c.theta;
    for (const auto& p : profiles) os << ' ' << p.cells[i].any_input_count;
    os << '\n';
  }
}

}  // namespace rlab
