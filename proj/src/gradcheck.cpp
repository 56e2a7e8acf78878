#include "rlab/gradcheck.hpp"

#include <cmath>

namespace rlab {

std::vector<Tensor> finite_difference_gradient(const std::function<double()>& f, std::span<Tensor* const> params,
                                               float h) {
  if (!(h > 0.0f)) throw ContractError("finite difference step must be positive");
  auto eval = [&f] {
    const double v = f();
    if (!std::isfinite(v)) throw NumericError("objective returned a non-finite value");
    return v;
  };
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Tensor* p : params) {
    Tensor g(p->shape().empty() ? Shape{} : p->shape(), 0.0f);
    for (int64_t i = 0; i < p->numel(); ++i) {
      const float orig = (*p)[i];
      (*p)[i] = orig + h;
      const double up = eval();
      (*p)[i] = orig - h;
      const double down = eval();
      (*p)[i] = orig;
      g[i] = static_cast<float>((up - down) / (2.0 * static_cast<double>(h)));
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double relative_error(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    diff += d * d;
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

}  // namespace rlab
