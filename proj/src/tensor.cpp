#include "rlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "rlab/rng.hpp"

namespace rlab {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

int64_t Tensor::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() <= 1) return 1;
  throw ShapeError("rows() on rank-" + std::to_string(shape_.size()) + " tensor");
}

int64_t Tensor::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  if (shape_.empty()) return 1;
  throw ShapeError("cols() on rank-" + std::to_string(shape_.size()) + " tensor");
}

float Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(Shape shape) {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
}

bool Tensor::bit_equal(const Tensor& o) const {
  return shape_ == o.shape_ &&
         (data_.empty() || std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0);
}

uint64_t Rng::below(uint64_t n) {
  if (n == 0) throw ContractError("Rng::below(0)");
  const uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

Rng Rng::fork(uint64_t salt) const {
  // splitmix64 finalizer over (seed, salt)
  uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return Rng(z ^ (z >> 31));
}

Tensor seeded_init(const Shape& shape, InitScheme scheme, Rng& rng) {
  Tensor t(shape);
  switch (scheme) {
    case InitScheme::kZeros:
      break;
    case InitScheme::kOnes:
      t.fill(1.0f);
      break;
    case InitScheme::kUniformScaled: {
      double fan_in, fan_out;
      if (shape.size() >= 2) {
        fan_out = static_cast<double>(shape[0]);
        fan_in = static_cast<double>(t.numel() / shape[0]);
      } else {
        fan_in = fan_out = static_cast<double>(t.numel());
      }
      const float a = static_cast<float>(std::sqrt(6.0 / (fan_in + fan_out)));
      for (auto& v : t.vec()) v = rng.uniform(-a, a);
      break;
    }
  }
  return t;
}

}  // namespace rlab
