#include "chopgrad/finite_difference.hpp"

#include <algorithm>
#include <cmath>

namespace chopgrad {

Tensor finite_difference_grad(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw Error("finite_difference_grad: step must be positive");
  Tensor probe = x.constant();
  Tensor grad(x.shape());
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double orig = probe[k];
    probe[k] = orig + h;
    const Tensor up = f(probe);
    probe[k] = orig - h;
    const Tensor down = f(probe);
    probe[k] = orig;
    if (up.size() != 1 || down.size() != 1) {
      throw ShapeError("finite_difference_grad: function output must be scalar, got " +
                       to_string(up.shape()));
    }
    grad[k] = (up[0] - down[0]) / (2.0 * h);
  }
  return grad;
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw ShapeError("relative_error: size mismatch");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / std::max(scale, floor);
}

double relative_error(const Tensor& a, const Tensor& b, double floor) {
  return relative_error(a.values(), b.values(), floor);
}

}  // namespace chopgrad
