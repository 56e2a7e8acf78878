#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rlab/encoder.hpp"
#include "rlab/gradcheck.hpp"
#include "rlab/graph.hpp"
#include "rlab/rng.hpp"

namespace rlab::tu {

inline std::string temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("rlab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

// Richardson-extrapolated central differences, (4 D(h/2) - D(h)) / 3: the
// O(h^2) truncation term cancels, which float32 forward passes need.
inline std::vector<Tensor> richardson_gradient(const std::function<double()>& f, std::span<Tensor* const> params,
                                               float h) {
  auto coarse = finite_difference_gradient(f, params, h);
  auto fine = finite_difference_gradient(f, params, h / 2);
  for (size_t i = 0; i < fine.size(); ++i)
    for (int64_t k = 0; k < fine[i].numel(); ++k) fine[i][k] = (4.0f * fine[i][k] - coarse[i][k]) / 3.0f;
  return fine;
}

// Head width >= 4: with narrower heads the layer norms are so curved that the
// difference quotient, not the gradient, dominates the error.
inline EncoderConfig random_config(Rng& rng) {
  EncoderConfig c;
  c.n_layers = 1 + static_cast<int>(rng.below(2));
  c.n_heads = 1 + static_cast<int>(rng.below(2));
  c.d_model = c.n_heads * (4 + static_cast<int>(rng.below(3)));
  c.d_intermediate = 3 + static_cast<int>(rng.below(6));
  c.max_seq = 8;
  c.vocab_size = kNumReserved + 3 + static_cast<int>(rng.below(5));
  c.pooling = rng.bernoulli(0.5) ? Pooling::kCls : Pooling::kMean;
  return c;
}

inline std::vector<int32_t> random_sequence(const EncoderConfig& c, Rng& rng, int len) {
  std::vector<int32_t> s{kClsId};
  for (int i = 1; i < len; ++i) s.push_back(kNumReserved + static_cast<int32_t>(rng.below(c.vocab_size - kNumReserved)));
  return s;
}

// Scalar objective touching every parameter: MLM cross-entropy at two rows
// plus a projection of every layer's pooled output.
struct EncoderObjective {
  EncoderConfig cfg;
  SequenceBatch batch;
  std::vector<int64_t> rows;
  std::vector<int32_t> targets;
  std::vector<Tensor> proj;  // one [d] vector per layer tap

  Var build(EncoderGraph& eg) {
    Graph& g = eg.graph();
    auto out = eg.forward(batch);
    Var loss = g.cross_entropy(eg.mlm_logits(out.hidden, rows), targets);
    for (size_t l = 0; l < out.pooled.size(); ++l) {
      Var pj = g.input(proj[l]);
      loss = g.add(loss, g.sum(g.matmul(out.pooled[l], pj, true)));
    }
    return loss;
  }
  double value(const ParamStore& store) {
    Graph g;
    EncoderGraph eg(g, store, cfg);
    return g.value(build(eg)).item();
  }
  void gradient(ParamStore& store) {
    store.zero_grad();
    Graph g;
    EncoderGraph eg(g, store, cfg, true);
    g.backward(build(eg));
  }
};

inline EncoderObjective random_objective(const EncoderConfig& c, Rng& rng) {
  EncoderObjective o;
  o.cfg = c;
  o.batch.append(random_sequence(c, rng, 3 + static_cast<int>(rng.below(4))));
  o.batch.append(random_sequence(c, rng, 2 + static_cast<int>(rng.below(5))));
  const int64_t total = static_cast<int64_t>(o.batch.tokens.size());
  o.rows = {1, total - 1};
  o.targets = {kNumReserved, static_cast<int32_t>(c.vocab_size - 1)};
  for (int l = 0; l <= c.n_layers; ++l) o.proj.push_back(seeded_init({1, c.d_model}, InitScheme::kUniformScaled, rng));
  return o;
}

// Relative error of reverse mode against Richardson differences over the
// concatenated gradient, for one random config drawn from `rng`.
inline double encoder_gradcheck_error(Rng& rng, uint64_t trial, EncoderConfig* drawn = nullptr) {
  EncoderConfig cfg = random_config(rng);
  if (drawn) *drawn = cfg;
  Rng init = rng.fork(trial);
  ParamStore store = init_params(cfg, init);
  // Non-trivial layer-norm and bias values so every path is exercised.
  for (auto& e : store.entries())
    for (auto& v : e.value.vec()) v += init.uniform(-0.2f, 0.2f);
  auto obj = random_objective(cfg, rng);
  obj.gradient(store);
  std::vector<Tensor*> params;
  for (auto& e : store.entries()) params.push_back(&e.value);
  auto fd = richardson_gradient([&] { return obj.value(store); }, params, 1e-2f);
  std::vector<float> a, b;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& ga = store.entries()[i].grad.vec();
    a.insert(a.end(), ga.begin(), ga.end());
    b.insert(b.end(), fd[i].vec().begin(), fd[i].vec().end());
  }
  return relative_error(Tensor({static_cast<int64_t>(a.size())}, a), Tensor({static_cast<int64_t>(b.size())}, b));
}

}  // namespace rlab::tu
