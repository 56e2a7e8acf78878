#include "rlab/graph.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <numeric>

namespace rlab {
namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatR>;
using CMapM = Eigen::Map<const MatR>;
using Strided = Eigen::Map<MatR, 0, Eigen::OuterStride<>>;
using CStrided = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;

CMapM cmap(const Tensor& t) { return CMapM(t.data(), t.rows(), t.cols()); }
MapM map(Tensor& t) { return MapM(t.data(), t.rows(), t.cols()); }

constexpr float kInvSqrt2 = 0.70710678118654752440f;
constexpr float kInvSqrt2Pi = 0.39894228040143267794f;

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

}  // namespace

void Graph::check(Var v) const {
  if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size()) {
    throw GraphError("node " + std::to_string(v.id) + " is not in the graph");
  }
}

Var Graph::add_node(Tensor value, std::vector<int32_t> inputs, BackwardFn backward) {
  const auto self = static_cast<int32_t>(nodes_.size());
  bool needs = false;
  for (int32_t in : inputs) {
    if (in < 0 || in >= self) {
      throw GraphError("input " + std::to_string(in) + " does not precede node " + std::to_string(self));
    }
    needs = needs || nodes_[static_cast<size_t>(in)].needs_grad;
  }
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.needs_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{self};
}

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Graph::param(const Tensor& value, Tensor* grad) {
  Node n;
  n.external = &value;
  n.external_grad = grad;
  n.needs_grad = grad != nullptr;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

const Tensor& Graph::value_of(int32_t id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  return n.external ? *n.external : n.value;
}

const Tensor& Graph::value(Var v) const {
  check(v);
  return value_of(v.id);
}

Tensor& Graph::grad_buffer(int32_t id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(value_of(id).shape(), 0.0f);
  return n.grad;
}

const Tensor& Graph::grad(Var v) {
  check(v);
  return grad_buffer(v.id);
}

bool Graph::requires_grad(Var v) const {
  check(v);
  return node(v).needs_grad;
}

void Graph::backward(Var output) {
  check(output);
  if (value(output).numel() != 1) {
    throw ContractError("backward() requires a scalar output, got shape " + shape_str(value(output).shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  last_visits_ = 0;
  grad_buffer(output.id).fill(1.0f);
  for (int32_t i = output.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad || n.grad.empty()) continue;
    for (int32_t in : n.inputs) {
      if (in >= i) throw GraphError("cycle: node " + std::to_string(i) + " consumes node " + std::to_string(in));
    }
    ++last_visits_;
    if (n.backward) n.backward(*this, i);
    if (n.external_grad) {
      Tensor& eg = *n.external_grad;
      if (eg.empty()) eg = Tensor(n.grad.shape(), 0.0f);
      if (!eg.same_shape(n.grad)) throw ShapeError("gradient buffer shape mismatch");
      float* dst = eg.data();
      const float* src = n.grad.data();
      for (int64_t k = 0; k < eg.numel(); ++k) dst[k] += src[k];
    }
  }
}

// ---------------------------------------------------------------------------

Var Graph::matmul(Var a, Var b, bool transpose_b) {
  check(a);
  check(b);
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_rank2(A, "matmul");
  require_rank2(B, "matmul");
  const int64_t k = transpose_b ? B.cols() : B.rows();
  if (A.cols() != k) throw ShapeError("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  const int64_t n = transpose_b ? B.rows() : B.cols();
  Tensor C({A.rows(), n});
  if (transpose_b) {
    map(C).noalias() = cmap(A) * cmap(B).transpose();
  } else {
    map(C).noalias() = cmap(A) * cmap(B);
  }
  return add_node(std::move(C), {a.id, b.id}, [a, b, transpose_b](Graph& g, int32_t self) {
    const Tensor& dC = g.grad_buffer(self);
    const Tensor& A = g.value_of(a.id);
    const Tensor& B = g.value_of(b.id);
    if (g.needs_grad(a.id)) {
      if (transpose_b) {
        map(g.grad_buffer(a.id)).noalias() += cmap(dC) * cmap(B);
      } else {
        map(g.grad_buffer(a.id)).noalias() += cmap(dC) * cmap(B).transpose();
      }
    }
    if (g.needs_grad(b.id)) {
      if (transpose_b) {
        map(g.grad_buffer(b.id)).noalias() += cmap(dC).transpose() * cmap(A);
      } else {
        map(g.grad_buffer(b.id)).noalias() += cmap(A).transpose() * cmap(dC);
      }
    }
  });
}

Var Graph::linear(Var x, Var w, Var bias) {
  check(x);
  check(w);
  check(bias);
  const Tensor& X = value(x);
  const Tensor& W = value(w);
  const Tensor& B = value(bias);
  require_rank2(X, "linear");
  require_rank2(W, "linear");
  if (X.cols() != W.cols() || B.numel() != W.rows()) {
    throw ShapeError("linear: x" + shape_str(X.shape()) + " w" + shape_str(W.shape()) + " b" + shape_str(B.shape()));
  }
  Tensor Y({X.rows(), W.rows()});
  auto y = map(Y);
  y.noalias() = cmap(X) * cmap(W).transpose();
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(B.data(), B.numel());
  return add_node(std::move(Y), {x.id, w.id, bias.id}, [x, w, bias](Graph& g, int32_t self) {
    const Tensor& dY = g.grad_buffer(self);
    if (g.needs_grad(x.id)) map(g.grad_buffer(x.id)).noalias() += cmap(dY) * cmap(g.value_of(w.id));
    if (g.needs_grad(w.id)) map(g.grad_buffer(w.id)).noalias() += cmap(dY).transpose() * cmap(g.value_of(x.id));
    if (g.needs_grad(bias.id)) {
      Tensor& db = g.grad_buffer(bias.id);
      const int64_t m = dY.rows(), n = dY.cols();
      for (int64_t c = 0; c < n; ++c) {
        double acc = 0.0;
        for (int64_t r = 0; r < m; ++r) acc += dY.at(r, c);
        db[c] += static_cast<float>(acc);
      }
    }
  });
}

Var Graph::add(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.same_shape(B)) {
    Tensor C = A;
    for (int64_t i = 0; i < C.numel(); ++i) C[i] += B[i];
    return add_node(std::move(C), {a.id, b.id}, [a, b](Graph& g, int32_t self) {
      const Tensor& dC = g.grad_buffer(self);
      for (int32_t in : {a.id, b.id}) {
        if (!g.needs_grad(in)) continue;
        Tensor& d = g.grad_buffer(in);
        for (int64_t i = 0; i < d.numel(); ++i) d[i] += dC[i];
      }
    });
  }
  if (A.rank() == 2 && B.rank() == 1 && B.numel() == A.cols()) {
    Tensor C = A;
    map(C).rowwise() += Eigen::Map<const Eigen::RowVectorXf>(B.data(), B.numel());
    return add_node(std::move(C), {a.id, b.id}, [a, b](Graph& g, int32_t self) {
      const Tensor& dC = g.grad_buffer(self);
      if (g.needs_grad(a.id)) {
        Tensor& d = g.grad_buffer(a.id);
        for (int64_t i = 0; i < d.numel(); ++i) d[i] += dC[i];
      }
      if (g.needs_grad(b.id)) {
        Tensor& d = g.grad_buffer(b.id);
        for (int64_t c = 0; c < dC.cols(); ++c) {
          double acc = 0.0;
          for (int64_t r = 0; r < dC.rows(); ++r) acc += dC.at(r, c);
          d[c] += static_cast<float>(acc);
        }
      }
    });
  }
  throw ShapeError("add: " + shape_str(A.shape()) + " + " + shape_str(B.shape()));
}

Var Graph::mul(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.same_shape(B)) {
    Tensor C = A;
    for (int64_t i = 0; i < C.numel(); ++i) C[i] *= B[i];
    return add_node(std::move(C), {a.id, b.id}, [a, b](Graph& g, int32_t self) {
      const Tensor& dC = g.grad_buffer(self);
      const Tensor& A = g.value_of(a.id);
      const Tensor& B = g.value_of(b.id);
      if (g.needs_grad(a.id)) {
        Tensor& d = g.grad_buffer(a.id);
        for (int64_t i = 0; i < d.numel(); ++i) d[i] += dC[i] * B[i];
      }
      if (g.needs_grad(b.id)) {
        Tensor& d = g.grad_buffer(b.id);
        for (int64_t i = 0; i < d.numel(); ++i) d[i] += dC[i] * A[i];
      }
    });
  }
  if (B.numel() == 1) {
    const float s = B[0];
    Tensor C = A;
    for (auto& v : C.vec()) v *= s;
    return add_node(std::move(C), {a.id, b.id}, [a, b](Graph& g, int32_t self) {
      const Tensor& dC = g.grad_buffer(self);
      const Tensor& A = g.value_of(a.id);
      const float s = g.value_of(b.id)[0];
      if (g.needs_grad(a.id)) {
        Tensor& d = g.grad_buffer(a.id);
        for (int64_t i = 0; i < d.numel(); ++i) d[i] += dC[i] * s;
      }
      if (g.needs_grad(b.id)) {
        double acc = 0.0;
        for (int64_t i = 0; i < A.numel(); ++i) acc += static_cast<double>(dC[i]) * A[i];
        g.grad_buffer(b.id)[0] += static_cast<float>(acc);
      }
    });
  }
  throw ShapeError("mul: " + shape_str(A.shape()) + " * " + shape_str(B.shape()));
}

Var Graph::scale(Var a, float s) {
  check(a);
  Tensor C = value(a);
  for (auto& v : C.vec()) v *= s;
  return add_node(std::move(C), {a.id}, [a, s](Graph& g, int32_t self) {
    const Tensor& dC = g.grad_buffer(self);
    Tensor& d = g.grad_buffer(a.id);
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += dC[i] * s;
  });
}

namespace {

void softmax_row(const float* x, float* y, int64_t n) {
  float mx = x[0];
  for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    z += y[j];
  }
  const float inv = static_cast<float>(1.0 / z);
  for (int64_t j = 0; j < n; ++j) y[j] *= inv;
}

// dx += y * (dy - <dy, y>)
void softmax_row_backward(const float* y, const float* dy, float* dx, int64_t n) {
  double dot = 0.0;
  for (int64_t j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * y[j];
  const float d = static_cast<float>(dot);
  for (int64_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - d);
}

}  // namespace

Var Graph::softmax(Var a) {
  check(a);
  const Tensor& A = value(a);
  Tensor Y(A.shape());
  const int64_t m = A.rows(), n = A.cols();
  for (int64_t r = 0; r < m; ++r) softmax_row(A.data() + r * n, Y.data() + r * n, n);
  return add_node(std::move(Y), {a.id}, [a](Graph& g, int32_t self) {
    const Tensor& Y = g.value_of(self);
    const Tensor& dY = g.grad_buffer(self);
    Tensor& dA = g.grad_buffer(a.id);
    const int64_t m = Y.rows(), n = Y.cols();
    for (int64_t r = 0; r < m; ++r) softmax_row_backward(Y.data() + r * n, dY.data() + r * n, dA.data() + r * n, n);
  });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, float eps) {
  check(x);
  check(gamma);
  check(beta);
  const Tensor& X = value(x);
  const Tensor& G = value(gamma);
  const Tensor& B = value(beta);
  const int64_t m = X.rows(), n = X.cols();
  if (G.numel() != n || B.numel() != n) throw ShapeError("layer_norm: feature width mismatch");
  Tensor Y(X.shape());
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(m * n));
  auto rstd = std::make_shared<std::vector<float>>(static_cast<size_t>(m));
  for (int64_t r = 0; r < m; ++r) {
    const float* xr = X.data() + r * n;
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    const float muf = static_cast<float>(mu);
    (*rstd)[static_cast<size_t>(r)] = rs;
    float* yr = Y.data() + r * n;
    float* hr = xhat->data() + r * n;
    for (int64_t j = 0; j < n; ++j) {
      hr[j] = (xr[j] - muf) * rs;
      yr[j] = hr[j] * G[j] + B[j];
    }
  }
  return add_node(std::move(Y), {x.id, gamma.id, beta.id}, [x, gamma, beta, xhat, rstd](Graph& g, int32_t self) {
    const Tensor& dY = g.grad_buffer(self);
    const Tensor& G = g.value_of(gamma.id);
    const int64_t m = dY.rows(), n = dY.cols();
    if (g.needs_grad(gamma.id) || g.needs_grad(beta.id)) {
      std::vector<double> dg(static_cast<size_t>(n), 0.0), db(static_cast<size_t>(n), 0.0);
      for (int64_t r = 0; r < m; ++r) {
        const float* dyr = dY.data() + r * n;
        const float* hr = xhat->data() + r * n;
        for (int64_t j = 0; j < n; ++j) {
          dg[static_cast<size_t>(j)] += static_cast<double>(dyr[j]) * hr[j];
          db[static_cast<size_t>(j)] += dyr[j];
        }
      }
      if (g.needs_grad(gamma.id)) {
        Tensor& d = g.grad_buffer(gamma.id);
        for (int64_t j = 0; j < n; ++j) d[j] += static_cast<float>(dg[static_cast<size_t>(j)]);
      }
      if (g.needs_grad(beta.id)) {
        Tensor& d = g.grad_buffer(beta.id);
        for (int64_t j = 0; j < n; ++j) d[j] += static_cast<float>(db[static_cast<size_t>(j)]);
      }
    }
    if (g.needs_grad(x.id)) {
      Tensor& dX = g.grad_buffer(x.id);
      std::vector<float> dh(static_cast<size_t>(n));
      for (int64_t r = 0; r < m; ++r) {
        const float* dyr = dY.data() + r * n;
        const float* hr = xhat->data() + r * n;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          dh[static_cast<size_t>(j)] = dyr[j] * G[j];
          s1 += dh[static_cast<size_t>(j)];
          s2 += static_cast<double>(dh[static_cast<size_t>(j)]) * hr[j];
        }
        const float m1 = static_cast<float>(s1 / static_cast<double>(n));
        const float m2 = static_cast<float>(s2 / static_cast<double>(n));
        const float rs = (*rstd)[static_cast<size_t>(r)];
        float* dxr = dX.data() + r * n;
        for (int64_t j = 0; j < n; ++j) dxr[j] += rs * (dh[static_cast<size_t>(j)] - m1 - hr[j] * m2);
      }
    }
  });
}

Var Graph::gelu(Var x) {
  check(x);
  Tensor Y = value(x);
  for (auto& v : Y.vec()) v = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
  return add_node(std::move(Y), {x.id}, [x](Graph& g, int32_t self) {
    const Tensor& X = g.value_of(x.id);
    const Tensor& dY = g.grad_buffer(self);
    Tensor& dX = g.grad_buffer(x.id);
    for (int64_t i = 0; i < X.numel(); ++i) {
      const float v = X[i];
      const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
      const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
      dX[i] += dY[i] * (cdf + v * pdf);
    }
  });
}

Var Graph::tanh(Var x) {
  check(x);
  Tensor Y = value(x);
  for (auto& v : Y.vec()) v = std::tanh(v);
  return add_node(std::move(Y), {x.id}, [x](Graph& g, int32_t self) {
    const Tensor& Y = g.value_of(self);
    const Tensor& dY = g.grad_buffer(self);
    Tensor& dX = g.grad_buffer(x.id);
    for (int64_t i = 0; i < Y.numel(); ++i) dX[i] += dY[i] * (1.0f - Y[i] * Y[i]);
  });
}

Var Graph::embedding(Var table, std::span<const int32_t> ids) {
  check(table);
  const Tensor& T = value(table);
  require_rank2(T, "embedding");
  const int64_t d = T.cols();
  Tensor Y({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows()) throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(T.data() + ids[i] * d, d, Y.data() + static_cast<int64_t>(i) * d);
  }
  auto idv = std::make_shared<std::vector<int32_t>>(ids.begin(), ids.end());
  return add_node(std::move(Y), {table.id}, [table, idv, d](Graph& g, int32_t self) {
    const Tensor& dY = g.grad_buffer(self);
    Tensor& dT = g.grad_buffer(table.id);
    for (size_t i = 0; i < idv->size(); ++i) {
      float* dst = dT.data() + (*idv)[i] * d;
      const float* src = dY.data() + static_cast<int64_t>(i) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Var Graph::slice_rows(Var x, int64_t begin, int64_t end) {
  check(x);
  const Tensor& X = value(x);
  require_rank2(X, "slice_rows");
  if (begin < 0 || end > X.rows() || begin >= end) throw ShapeError("slice_rows: bad range");
  const int64_t n = X.cols();
  Tensor Y({end - begin, n}, std::vector<float>(X.data() + begin * n, X.data() + end * n));
  return add_node(std::move(Y), {x.id}, [x, begin, n](Graph& g, int32_t self) {
    const Tensor& dY = g.grad_buffer(self);
    Tensor& dX = g.grad_buffer(x.id);
    float* dst = dX.data() + begin * n;
    for (int64_t i = 0; i < dY.numel(); ++i) dst[i] += dY[i];
  });
}

Var Graph::gather_rows(Var x, std::span<const int64_t> rows) {
  check(x);
  const Tensor& X = value(x);
  require_rank2(X, "gather_rows");
  const int64_t n = X.cols();
  Tensor Y({static_cast<int64_t>(rows.size()), n});
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= X.rows()) throw ShapeError("gather_rows: row out of range");
    std::copy_n(X.data() + rows[i] * n, n, Y.data() + static_cast<int64_t>(i) * n);
  }
  auto rv = std::make_shared<std::vector<int64_t>>(rows.begin(), rows.end());
  return add_node(std::move(Y), {x.id}, [x, rv, n](Graph& g, int32_t self) {
    const Tensor& dY = g.grad_buffer(self);
    Tensor& dX = g.grad_buffer(x.id);
    for (size_t i = 0; i < rv->size(); ++i) {
      float* dst = dX.data() + (*rv)[i] * n;
      const float* src = dY.data() + static_cast<int64_t>(i) * n;
      for (int64_t j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
}

Var Graph::slice_cols(Var x, int64_t begin, int64_t end) {
  check(x);
  const Tensor& X = value(x);
  require_rank2(X, "slice_cols");
  if (begin < 0 || end > X.cols() || begin >= end) throw ShapeError("slice_cols: bad range");
  const int64_t m = X.rows(), w = end - begin;
  Tensor Y({m, w});
  map(Y) = cmap(X).middleCols(begin, w);
  return add_node(std::move(Y), {x.id}, [x, begin, w](Graph& g, int32_t self) {
    map(g.grad_buffer(x.id)).middleCols(begin, w) += cmap(g.grad_buffer(self));
  });
}

Var Graph::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  int64_t rows = 0;
  const int64_t n = value(parts[0]).cols();
  std::vector<int32_t> ids;
  for (Var p : parts) {
    check(p);
    if (value(p).cols() != n) throw ShapeError("concat_rows: width mismatch");
    rows += value(p).rows();
    ids.push_back(p.id);
  }
  Tensor Y({rows, n});
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor& P = value(p);
    std::copy_n(P.data(), P.numel(), Y.data() + off);
    off += P.numel();
  }
  auto idv = std::make_shared<std::vector<int32_t>>(ids);
  return add_node(std::move(Y), ids, [idv](Graph& g, int32_t self) {
    const Tensor& dY = g.grad_buffer(self);
    int64_t off = 0;
    for (int32_t id : *idv) {
      const int64_t cnt = g.value_of(id).numel();
      if (g.needs_grad(id)) {
        Tensor& d = g.grad_buffer(id);
        for (int64_t i = 0; i < cnt; ++i) d[i] += dY[off + i];
      }
      off += cnt;
    }
  });
}

Var Graph::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int64_t m = value(parts[0]).rows();
  int64_t cols = 0;
  std::vector<int32_t> ids;
  for (Var p : parts) {
    check(p);
    if (value(p).rows() != m) throw ShapeError("concat_cols: row count mismatch");
    cols += value(p).cols();
    ids.push_back(p.id);
  }
  Tensor Y({m, cols});
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor& P = value(p);
    map(Y).middleCols(off, P.cols()) = CMapM(P.data(), m, P.cols());
    off += P.cols();
  }
  auto idv = std::make_shared<std::vector<int32_t>>(ids);
  return add_node(std::move(Y), ids, [idv, m](Graph& g, int32_t self) {
    const Tensor& dY = g.grad_buffer(self);
    int64_t off = 0;
    for (int32_t id : *idv) {
      const int64_t w = g.value_of(id).numel() / m;
      if (g.needs_grad(id)) {
        Tensor& d = g.grad_buffer(id);
        MapM(d.data(), m, w) += cmap(dY).middleCols(off, w);
      }
      off += w;
    }
  });
}

Var Graph::sum(Var x) {
  check(x);
  const Tensor& X = value(x);
  double acc = 0.0;
  for (int64_t i = 0; i < X.numel(); ++i) acc += X[i];
  return add_node(Tensor::scalar(static_cast<float>(acc)), {x.id}, [x](Graph& g, int32_t self) {
    const float d = g.grad_buffer(self)[0];
    Tensor& dX = g.grad_buffer(x.id);
    for (int64_t i = 0; i < dX.numel(); ++i) dX[i] += d;
  });
}

Var Graph::mean(Var x) {
  check(x);
  const Tensor& X = value(x);
  double acc = 0.0;
  for (int64_t i = 0; i < X.numel(); ++i) acc += X[i];
  const double n = static_cast<double>(X.numel());
  return add_node(Tensor::scalar(static_cast<float>(acc / n)), {x.id}, [x, n](Graph& g, int32_t self) {
    const float d = static_cast<float>(g.grad_buffer(self)[0] / n);
    Tensor& dX = g.grad_buffer(x.id);
    for (int64_t i = 0; i < dX.numel(); ++i) dX[i] += d;
  });
}

Var Graph::row_sum(Var x) {
  check(x);
  const Tensor& X = value(x);
  const int64_t m = X.rows(), n = X.cols();
  Tensor Y({m});
  for (int64_t r = 0; r < m; ++r) {
    double acc = 0.0;
    for (int64_t j = 0; j < n; ++j) acc += X.at(r, j);
    Y[r] = static_cast<float>(acc);
  }
  return add_node(std::move(Y), {x.id}, [x, m, n](Graph& g, int32_t self) {
    const Tensor& dY = g.grad_buffer(self);
    Tensor& dX = g.grad_buffer(x.id);
    for (int64_t r = 0; r < m; ++r)
      for (int64_t j = 0; j < n; ++j) dX[r * n + j] += dY[r];
  });
}

Var Graph::cross_entropy(Var logits, std::span<const int32_t> targets) {
  check(logits);
  const Tensor& L = value(logits);
  require_rank2(L, "cross_entropy");
  const int64_t m = L.rows(), v = L.cols();
  if (static_cast<int64_t>(targets.size()) != m) throw ShapeError("cross_entropy: target count mismatch");
  auto probs = std::make_shared<Tensor>(L.shape());
  double total = 0.0;
  for (int64_t r = 0; r < m; ++r) {
    const int32_t t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= v) throw ShapeError("cross_entropy: target out of range");
    const float* lr = L.data() + r * v;
    float* pr = probs->data() + r * v;
    float mx = lr[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      pr[j] = std::exp(lr[j] - mx);
      z += pr[j];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (int64_t j = 0; j < v; ++j) pr[j] *= inv;
    total += (std::log(z) + mx) - lr[t];
  }
  auto tv = std::make_shared<std::vector<int32_t>>(targets.begin(), targets.end());
  return add_node(Tensor::scalar(static_cast<float>(total / static_cast<double>(m))), {logits.id},
                  [logits, probs, tv, m, v](Graph& g, int32_t self) {
                    const float d = g.grad_buffer(self)[0] / static_cast<float>(m);
                    Tensor& dL = g.grad_buffer(logits.id);
                    for (int64_t r = 0; r < m; ++r) {
                      const float* pr = probs->data() + r * v;
                      float* dr = dL.data() + r * v;
                      for (int64_t j = 0; j < v; ++j) dr[j] += d * pr[j];
                      dr[(*tv)[static_cast<size_t>(r)]] -= d;
                    }
                  });
}

Var Graph::attention(Var qkv, std::span<const int32_t> seg_lengths, int n_heads) {
  check(qkv);
  const Tensor& QKV = value(qkv);
  require_rank2(QKV, "attention");
  const int64_t total = QKV.rows();
  if (QKV.cols() % 3 != 0) throw ShapeError("attention: qkv width must be 3*d");
  const int64_t d = QKV.cols() / 3;
  if (n_heads <= 0 || d % n_heads != 0) throw ShapeError("attention: d not divisible by heads");
  const int64_t dh = d / n_heads;
  const int64_t stride = 3 * d;
  const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
  auto segs = std::make_shared<std::vector<int32_t>>(seg_lengths.begin(), seg_lengths.end());
  int64_t check_total = 0;
  for (int32_t len : *segs) {
    if (len <= 0) throw ShapeError("attention: empty sequence");
    check_total += len;
  }
  if (check_total != total) throw ShapeError("attention: segment lengths do not cover the batch");

  const bool keep = needs_grad(qkv.id);
  auto probs = std::make_shared<std::vector<float>>();
  if (keep) {
    size_t sz = 0;
    for (int32_t len : *segs) sz += static_cast<size_t>(len) * static_cast<size_t>(len) * static_cast<size_t>(n_heads);
    probs->resize(sz);
  }
  Tensor O({total, d});
  MatR S;
  int64_t off = 0;
  size_t poff = 0;
  for (int32_t len : *segs) {
    for (int h = 0; h < n_heads; ++h) {
      CStrided Q(QKV.data() + off * stride + h * dh, len, dh, Eigen::OuterStride<>(stride));
      CStrided K(QKV.data() + off * stride + d + h * dh, len, dh, Eigen::OuterStride<>(stride));
      CStrided V(QKV.data() + off * stride + 2 * d + h * dh, len, dh, Eigen::OuterStride<>(stride));
      S.noalias() = (Q * K.transpose()) * inv;
      for (int64_t r = 0; r < len; ++r) softmax_row(S.data() + r * len, S.data() + r * len, len);
      Strided(O.data() + off * d + h * dh, len, dh, Eigen::OuterStride<>(d)).noalias() = S * V;
      if (keep) {
        std::copy_n(S.data(), len * len, probs->data() + poff);
        poff += static_cast<size_t>(len) * static_cast<size_t>(len);
      }
    }
    off += len;
  }
  return add_node(std::move(O), {qkv.id}, [qkv, segs, probs, n_heads, d, dh, stride, inv](Graph& g, int32_t self) {
    const Tensor& QKV = g.value_of(qkv.id);
    const Tensor& dO = g.grad_buffer(self);
    Tensor& dQKV = g.grad_buffer(qkv.id);
    MatR dP, dS;
    int64_t off = 0;
    size_t poff = 0;
    for (int32_t len : *segs) {
      for (int h = 0; h < n_heads; ++h) {
        CMapM P(probs->data() + poff, len, len);
        poff += static_cast<size_t>(len) * static_cast<size_t>(len);
        CStrided Q(QKV.data() + off * stride + h * dh, len, dh, Eigen::OuterStride<>(stride));
        CStrided K(QKV.data() + off * stride + d + h * dh, len, dh, Eigen::OuterStride<>(stride));
        CStrided V(QKV.data() + off * stride + 2 * d + h * dh, len, dh, Eigen::OuterStride<>(stride));
        CStrided G(dO.data() + off * d + h * dh, len, dh, Eigen::OuterStride<>(d));
        Strided dQ(dQKV.data() + off * stride + h * dh, len, dh, Eigen::OuterStride<>(stride));
        Strided dK(dQKV.data() + off * stride + d + h * dh, len, dh, Eigen::OuterStride<>(stride));
        Strided dV(dQKV.data() + off * stride + 2 * d + h * dh, len, dh, Eigen::OuterStride<>(stride));
        dV.noalias() += P.transpose() * G;
        dP.noalias() = G * V.transpose();
        dS.setZero(len, len);
        for (int64_t r = 0; r < len; ++r) softmax_row_backward(P.data() + r * len, dP.data() + r * len, dS.data() + r * len, len);
        dS *= inv;
        dQ.noalias() += dS * K;
        dK.noalias() += dS.transpose() * Q;
      }
      off += len;
    }
  });
}

}  // namespace rlab
