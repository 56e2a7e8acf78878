#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "rlab/gradcheck.hpp"
#include "rlab/graph.hpp"
#include "rlab/parallel.hpp"
#include "rlab/rng.hpp"
#include "rlab/tensor.hpp"
#include "test_util.hpp"

using namespace rlab;

namespace {

Tensor random_tensor(Shape s, Rng& rng, float scale = 1.0f) {
  Tensor t(std::move(s));
  for (auto& v : t.vec()) v = rng.uniform(-scale, scale);
  return t;
}

// Analytic vs central-difference gradient of a scalar graph function f(x).
double op_error(const std::function<Var(Graph&, Var)>& f, Tensor x, float h = 1e-2f) {
  Tensor grad(x.shape());
  {
    Graph g;
    Var in = g.param(x, &grad);
    g.backward(f(g, in));
  }
  Tensor* px = &x;
  auto fd = finite_difference_gradient(
      [&] {
        Graph g;
        return static_cast<double>(g.value(f(g, g.input(x))).item());
      },
      std::span<Tensor* const>(&px, 1), h);
  return relative_error(grad, fd[0]);
}

}  // namespace

TEST(Tensor, ShapeAndBitEquality) {
  Tensor a({2, 3}, 1.5f);
  EXPECT_EQ(a.numel(), 6);
  EXPECT_EQ(a.rows(), 2);
  EXPECT_EQ(a.cols(), 3);
  Tensor b = a;
  EXPECT_TRUE(a.bit_equal(b));
  b[4] = -0.0f;
  a[4] = 0.0f;
  EXPECT_FALSE(a.bit_equal(b));  // -0 and +0 differ in bytes
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Rng, StreamsAreReproducibleAndForksIndependent) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  Rng f1 = Rng(42).fork(1), f2 = Rng(42).fork(2);
  EXPECT_NE(f1.next_u64(), f2.next_u64());
  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    const uint64_t v = c.below(13);
    ASSERT_LT(v, 13u);
    const float u = c.uniform();
    ASSERT_GE(u, 0.0f);
    ASSERT_LT(u, 1.0f);
  }
}

TEST(Rng, SeededInitBoundsFollowFanInFanOut) {
  Rng rng(3);
  Tensor w = seeded_init({30, 20}, InitScheme::kUniformScaled, rng);
  const float a = std::sqrt(6.0f / 50.0f);
  for (float v : w.vec()) ASSERT_LE(std::abs(v), a);
  Tensor z = seeded_init({5}, InitScheme::kZeros, rng);
  for (float v : z.vec()) EXPECT_EQ(v, 0.0f);
}

TEST(Parallel, ResultIndependentOfWorkerCount) {
  std::vector<double> one(257), many(257);
  auto fn = [](std::vector<double>& out) {
    return [&out](size_t i) { out[i] = std::sin(static_cast<double>(i)) * static_cast<double>(i); };
  };
  parallel_for(one.size(), 1, fn(one));
  parallel_for(many.size(), 4, fn(many));
  EXPECT_EQ(one, many);
  EXPECT_THROW(parallel_for(10, 3, [](size_t i) { if (i == 7) throw DataError("boom"); }), DataError);
}

TEST(Graph, OperatorGradientsMatchFiniteDifferences) {
  Rng rng(11);
  const Tensor w = random_tensor({4, 3}, rng);
  const Tensor bias = random_tensor({4}, rng);
  const Tensor gamma = random_tensor({3}, rng);
  const Tensor mix23 = random_tensor({2, 3}, rng);
  const Tensor mix54 = random_tensor({5, 4}, rng);
  auto expect_small = [](double e, const char* what) { EXPECT_LT(e, 1e-3) << what; };
  expect_small(op_error([&](Graph& g, Var x) { return g.sum(g.gelu(x)); }, random_tensor({2, 3}, rng)), "gelu");
  expect_small(op_error([&](Graph& g, Var x) { return g.sum(g.tanh(x)); }, random_tensor({2, 3}, rng)), "tanh");
  expect_small(op_error([&](Graph& g, Var x) { return g.sum(g.mul(g.softmax(x), g.input(mix23))); },
                        random_tensor({2, 3}, rng)),
               "softmax");
  expect_small(op_error([&](Graph& g, Var x) { return g.sum(g.linear(x, g.input(w), g.input(bias))); },
                        random_tensor({2, 3}, rng)),
               "linear");
  expect_small(op_error(
                   [&](Graph& g, Var x) {
                     Var ln = g.layer_norm(x, g.input(gamma), g.input(Tensor({3})));
                     return g.sum(g.mul(ln, g.input(mix23)));
                   },
                   random_tensor({2, 3}, rng)),
               "layer_norm");
  const std::vector<int32_t> targets = {1, 0, 2};
  expect_small(op_error([&](Graph& g, Var x) { return g.cross_entropy(x, targets); }, random_tensor({3, 4}, rng)),
               "cross_entropy");
  const std::vector<int32_t> segs = {2, 3};
  expect_small(op_error(
                   [&](Graph& g, Var x) {
                     return g.sum(g.mul(g.attention(x, segs, 2), g.input(mix54)));
                   },
                   random_tensor({5, 12}, rng)),
               "attention");
}

TEST(Graph, BackwardOnNonScalarIsRejected) {
  Graph g;
  const Tensor value({2}, 1.0f);
  Tensor grad({2});
  Var x = g.param(value, &grad);
  EXPECT_THROW(g.backward(g.scale(x, 2.0f)), ContractError);
}

// Reverse mode vs central differences on 24 random encoder configurations.
TEST(EncoderGradient, MatchesFiniteDifferencesOnRandomConfigs) {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 24; ++trial) {
    EncoderConfig cfg;
    const double err = tu::encoder_gradcheck_error(rng, static_cast<uint64_t>(trial), &cfg);
    worst = std::max(worst, err);
    EXPECT_LT(err, 1e-3) << "trial " << trial << " layers " << cfg.n_layers << " d " << cfg.d_model;
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Gradcheck, RestoresParametersBitExactly) {
  Rng rng(5);
  Tensor x = random_tensor({7}, rng);
  const Tensor before = x;
  Tensor* px = &x;
  finite_difference_gradient([&] { return static_cast<double>(x[0] * x[1]); }, std::span<Tensor* const>(&px, 1),
                             1e-3f);
  EXPECT_TRUE(x.bit_equal(before));
  EXPECT_THROW(finite_difference_gradient([] { return std::nan(""); }, std::span<Tensor* const>(&px, 1), 1e-3f),
               NumericError);
}
