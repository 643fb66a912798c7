#pragma once

#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "chopgrad/tensor.hpp"

namespace chopgrad {

enum class OpKind {
  Conv3d,          // (x, kernel, bias); spatial zero padding, no temporal padding
  Upsample2x,      // nearest-neighbour, spatial axes only
  TemporalExpand,  // (x, weight GxCxD, bias GxC): one input slot -> G frames
  ConcatTime,      // variadic
  SliceTime,
  CropSpace,
  Add,
  Mul,
  Scale,
  LeakyRelu,
  SpatialDiff,
  Sum,
  Mse,  // (pred, target) -> mean squared error
  Mae,  // (pred, target) -> mean absolute error
};

std::string_view op_name(OpKind kind);
std::optional<OpKind> op_from_name(std::string_view name);

struct OpAttrs {
  double scalar = 0.0;  // Scale factor, LeakyRelu slope
  std::size_t begin = 0;  // SliceTime
  std::size_t length = 0;
  std::size_t h0 = 0, w0 = 0, height = 0, width = 0;  // CropSpace
  std::size_t axis = 0, step = 1;  // SpatialDiff
};

/// Result of evaluating one op: the output plus whatever the adjoint needs.
struct OpForward {
  Tensor output;
  std::vector<Tensor> saved;
};

/// Evaluates `kind` on constant inputs. Throws ShapeError on mismatched inputs.
OpForward op_forward(OpKind kind, std::span<const Tensor* const> inputs, const OpAttrs& attrs);

/// Vector-Jacobian product. `input_grads[k]` is null when input k needs no
/// gradient; otherwise it is a zero-or-partial tensor of the input's shape that
/// the cotangent is added into.
void op_vjp(OpKind kind, const OpAttrs& attrs, std::span<const Shape> input_shapes,
            std::span<const Tensor> saved, const Tensor& out_grad,
            std::span<Tensor* const> input_grads);

namespace testing_hooks {
/// Scales every adjoint of `kind` by `factor` (process-wide). Negative-control
/// fixture for the gradient checker; pass std::nullopt to clear.
void inject_adjoint_fault(std::optional<OpKind> kind, double factor = 1.01);
}  // namespace testing_hooks

}  // namespace chopgrad
