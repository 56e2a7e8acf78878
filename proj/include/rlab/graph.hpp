#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rlab/tensor.hpp"

namespace rlab {

// Handle to a node in a Graph.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
// is a topological order by construction and backward() is a single reverse
// sweep. A Graph is built fresh for every forward pass and is not
// thread-safe.
//
// Reductions (sum, mean, layer-norm statistics, softmax normalizers) accumulate
// in double in ascending index order and round once to float.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf owning its value.
  Var input(Tensor value, bool requires_grad = false);
  // Leaf bound to external storage (a ParamStore entry). The value is not
  // copied; after backward() the node gradient is added into *grad.
  Var param(const Tensor& value, Tensor* grad);

  const Tensor& value(Var v) const;
  // Gradient of the last backward() output w.r.t. v (zeros if v did not
  // participate).
  const Tensor& grad(Var v);
  bool requires_grad(Var v) const;
  size_t size() const { return nodes_.size(); }

  // Errors: ContractError when `output` is not a scalar.
  void backward(Var output);
  // Number of nodes whose backward rule ran in the last backward().
  size_t last_backward_visits() const { return last_visits_; }

  // --- operations -------------------------------------------------------
  // a[m,k] @ b[k,n], or a[m,k] @ b[n,k]^T when transpose_b.
  Var matmul(Var a, Var b, bool transpose_b = false);
  // x[m,k] @ w[n,k]^T + bias[n]
  Var linear(Var x, Var w, Var bias);
  // Same shape, or b of shape [n] broadcast over the rows of a[m,n].
  Var add(Var a, Var b);
  // Same shape elementwise product, or b scalar.
  Var mul(Var a, Var b);
  Var scale(Var a, float s);
  Var softmax(Var a);  // row-wise
  Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-12f);
  Var gelu(Var x);  // exact (erf) form
  Var tanh(Var x);
  Var embedding(Var table, std::span<const int32_t> ids);
  Var slice_rows(Var x, int64_t begin, int64_t end);
  Var gather_rows(Var x, std::span<const int64_t> rows);
  Var slice_cols(Var x, int64_t begin, int64_t end);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  Var sum(Var x);
  Var mean(Var x);
  Var row_sum(Var x);  // [m,n] -> [m]
  // Mean token cross-entropy of logits[m,V] against targets[m].
  Var cross_entropy(Var logits, std::span<const int32_t> targets);
  // Multi-head scaled dot-product self-attention over packed sequences.
  // qkv is [total, 3d] laid out as [Q | K | V]; seg_lengths partitions the
  // rows into independent sequences. Equivalent to softmax(QK^T/sqrt(dh))V
  // per sequence and head, built from matmul + softmax.
  Var attention(Var qkv, std::span<const int32_t> seg_lengths, int n_heads);

  // Low-level node construction; exposed for composite ops. Inputs must
  // already exist in the graph (GraphError otherwise).
  using BackwardFn = std::function<void(Graph&, int32_t self)>;
  Var add_node(Tensor value, std::vector<int32_t> inputs, BackwardFn backward);

  // Gradient buffer of node id, zero-allocated on first use.
  Tensor& grad_buffer(int32_t id);
  const Tensor& value_of(int32_t id) const;
  bool needs_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor* external_grad = nullptr;
    Tensor grad;
    std::vector<int32_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };

  void check(Var v) const;
  Node& node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }

  std::vector<Node> nodes_;
  size_t last_visits_ = 0;
  Tensor empty_;
};

}  // namespace rlab
