#pragma once

#include <functional>
#include <span>
#include <vector>

#include "rlab/tensor.hpp"

namespace rlab {

// Central-difference estimate (f(w+h) - f(w-h)) / 2h for every coordinate of
// every tensor in `params`. Each coordinate is perturbed in place and
// restored bit-exactly before moving on. Throws NumericError when f returns a
// non-finite value.
std::vector<Tensor> finite_difference_gradient(const std::function<double()>& f, std::span<Tensor* const> params,
                                               float h);

// ||a - b||_2 / max(||a||_2, ||b||_2); 0 when both are zero.
double relative_error(const Tensor& a, const Tensor& b);

}  // namespace rlab
