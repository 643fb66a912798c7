#pragma once

#include <functional>
#include <span>

#include "chopgrad/tensor.hpp"

namespace chopgrad {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Central differences (f(x + h e_k) - f(x - h e_k)) / 2h for every element
/// of x. `f` must return a single-element tensor.
Tensor finite_difference_grad(const ScalarFn& f, const Tensor& x, double h = 1e-5);

/// max_k |a_k - b_k| / max(max_k |b_k|, floor). `b` is the reference.
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12);
double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12);

}  // namespace chopgrad
