#include "chopgrad/ops.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <mutex>
#include <string>

namespace chopgrad {
namespace {

struct FaultState {
  std::atomic<int> kind{-1};
  std::atomic<double> factor{1.0};
};

FaultState& fault_state() {
  static FaultState state;
  return state;
}

constexpr std::array<std::string_view, 14> kOpNames = {
    "conv3d", "upsample2x", "temporal_expand", "concat_time", "slice_time",
    "crop_space", "add", "mul", "scale", "leaky_relu", "spatial_diff", "sum",
    "mse", "mae"};

void expect_inputs(OpKind kind, std::span<const Tensor* const> inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                     " inputs, got " + std::to_string(inputs.size()));
  }
}

void expect_same_shape(OpKind kind, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
}

// Spatial range of output positions h for which h + d - pad lands inside [0, extent).
struct Span1 {
  std::size_t lo, hi;
};
Span1 valid_range(std::size_t extent, std::size_t d, std::size_t pad) {
  const long lo = std::max<long>(0, static_cast<long>(pad) - static_cast<long>(d));
  const long hi = std::min<long>(static_cast<long>(extent),
                                 static_cast<long>(extent + pad) - static_cast<long>(d));
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

OpForward conv3d_forward(const Tensor& x, const Tensor& k, const Tensor& b) {
  require_rank4(x, "conv3d input");
  if (k.rank() != 5) throw ShapeError("conv3d: kernel must be (Cout,Cin,kT,kH,kW), got " + to_string(k.shape()));
  const std::size_t cin = x.dim(0), tin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t cout = k.dim(0), kt = k.dim(2), kh = k.dim(3), kw = k.dim(4);
  if (k.dim(1) != cin) throw ShapeError("conv3d: kernel expects " + std::to_string(k.dim(1)) + " input channels, got " + std::to_string(cin));
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv3d: spatial kernel extents must be odd");
  if (kt > tin) throw ShapeError("conv3d: temporal kernel " + std::to_string(kt) + " longer than input " + std::to_string(tin));
  if (b.shape() != Shape{cout}) throw ShapeError("conv3d: bias must have shape [" + std::to_string(cout) + "]");
  const std::size_t tout = tin - kt + 1, ph = kh / 2, pw = kw / 2;
  Tensor y(Shape{cout, tout, H, W});
  const double* xv = x.values().data();
  const double* kv = k.values().data();
  double* yv = y.values().data();
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t t = 0; t < tout; ++t) {
      double* yplane = yv + (co * tout + t) * H * W;
      std::fill(yplane, yplane + H * W, b[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t dt = 0; dt < kt; ++dt) {
          const double* xplane = xv + (ci * tin + t + dt) * H * W;
          for (std::size_t dh = 0; dh < kh; ++dh) {
            const Span1 hr = valid_range(H, dh, ph);
            for (std::size_t dw = 0; dw < kw; ++dw) {
              const double wv = kv[(((co * cin + ci) * kt + dt) * kh + dh) * kw + dw];
              if (wv == 0.0) continue;
              const Span1 wr = valid_range(W, dw, pw);
              for (std::size_t h = hr.lo; h < hr.hi; ++h) {
                const double* xrow = xplane + (h + dh - ph) * W + dw - pw;
                double* yrow = yplane + h * W;
                for (std::size_t w = wr.lo; w < wr.hi; ++w) yrow[w] += wv * xrow[w];
              }
            }
          }
        }
      }
    }
  }
  return {std::move(y), {x.constant(), k.constant()}};
}

void conv3d_vjp(std::span<const Tensor> saved, const Tensor& gy,
                std::span<Tensor* const> grads) {
  const Tensor& x = saved[0];
  const Tensor& k = saved[1];
  const std::size_t cin = x.dim(0), tin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t cout = k.dim(0), kt = k.dim(2), kh = k.dim(3), kw = k.dim(4);
  const std::size_t tout = gy.dim(1), ph = kh / 2, pw = kw / 2;
  const double* xv = x.values().data();
  const double* kv = k.values().data();
  const double* gv = gy.values().data();
  double* gx = grads[0] ? grads[0]->values().data() : nullptr;
  double* gk = grads[1] ? grads[1]->values().data() : nullptr;
  double* gb = grads[2] ? grads[2]->values().data() : nullptr;
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t t = 0; t < tout; ++t) {
      const double* gplane = gv + (co * tout + t) * H * W;
      if (gb) {
        double acc = 0.0;
        for (std::size_t i = 0; i < H * W; ++i) acc += gplane[i];
        gb[co] += acc;
      }
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t dt = 0; dt < kt; ++dt) {
          const std::size_t xoff = (ci * tin + t + dt) * H * W;
          for (std::size_t dh = 0; dh < kh; ++dh) {
            const Span1 hr = valid_range(H, dh, ph);
            for (std::size_t dw = 0; dw < kw; ++dw) {
              const std::size_t kidx = (((co * cin + ci) * kt + dt) * kh + dh) * kw + dw;
              const Span1 wr = valid_range(W, dw, pw);
              const double wv = kv[kidx];
              double kacc = 0.0;
              for (std::size_t h = hr.lo; h < hr.hi; ++h) {
                const std::size_t xrow = xoff + (h + dh - ph) * W + dw - pw;
                const double* grow = gplane + h * W;
                for (std::size_t w = wr.lo; w < wr.hi; ++w) {
                  if (gx) gx[xrow + w] += wv * grow[w];
                  kacc += grow[w] * xv[xrow + w];
                }
              }
              if (gk) gk[kidx] += kacc;
            }
          }
        }
      }
    }
  }
}

OpForward temporal_expand_forward(const Tensor& x, const Tensor& wt, const Tensor& b) {
  require_rank4(x, "temporal_expand input");
  if (wt.rank() != 3) throw ShapeError("temporal_expand: weight must be (G,C,D)");
  const std::size_t d = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t G = wt.dim(0), C = wt.dim(1);
  if (wt.dim(2) != d) throw ShapeError("temporal_expand: weight expects " + std::to_string(wt.dim(2)) + " channels, got " + std::to_string(d));
  if (b.shape() != Shape{G, C}) throw ShapeError("temporal_expand: bias must be (G,C)");
  Tensor y(Shape{C, T * G, H, W});
  const std::size_t plane = H * W;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t g = 0; g < G; ++g) {
      for (std::size_t c = 0; c < C; ++c) {
        double* yp = y.values().data() + (c * T * G + t * G + g) * plane;
        std::fill(yp, yp + plane, b[g * C + c]);
        for (std::size_t k = 0; k < d; ++k) {
          const double wv = wt[(g * C + c) * d + k];
          const double* xp = x.values().data() + (k * T + t) * plane;
          for (std::size_t i = 0; i < plane; ++i) yp[i] += wv * xp[i];
        }
      }
    }
  }
  return {std::move(y), {x.constant(), wt.constant()}};
}

void temporal_expand_vjp(std::span<const Tensor> saved, const Tensor& gy,
                         std::span<Tensor* const> grads) {
  const Tensor& x = saved[0];
  const Tensor& wt = saved[1];
  const std::size_t d = x.dim(0), T = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t G = wt.dim(0), C = wt.dim(1);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t g = 0; g < G; ++g) {
      for (std::size_t c = 0; c < C; ++c) {
        const double* gp = gy.values().data() + (c * T * G + t * G + g) * plane;
        if (grads[2]) {
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
          (*grads[2])[g * C + c] += acc;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const std::size_t widx = (g * C + c) * d + k;
          const double* xp = x.values().data() + (k * T + t) * plane;
          if (grads[0]) {
            double* gx = grads[0]->values().data() + (k * T + t) * plane;
            const double wv = wt[widx];
            for (std::size_t i = 0; i < plane; ++i) gx[i] += wv * gp[i];
          }
          if (grads[1]) {
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
            (*grads[1])[widx] += acc;
          }
        }
      }
    }
  }
}

OpForward concat_time_forward(std::span<const Tensor* const> inputs) {
  if (inputs.empty()) throw ShapeError("concat_time: no inputs");
  const Tensor& first = *inputs[0];
  require_rank4(first, "concat_time input");
  std::size_t total_t = 0;
  for (const Tensor* t : inputs) {
    require_rank4(*t, "concat_time input");
    if (t->dim(0) != first.dim(0) || t->dim(2) != first.dim(2) || t->dim(3) != first.dim(3)) {
      throw ShapeError("concat_time: incompatible " + to_string(first.shape()) + " and " + to_string(t->shape()));
    }
    total_t += t->dim(1);
  }
  const std::size_t C = first.dim(0), plane = first.dim(2) * first.dim(3);
  Tensor y(Shape{C, total_t, first.dim(2), first.dim(3)});
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t toff = 0;
    for (const Tensor* t : inputs) {
      const std::size_t n = t->dim(1) * plane;
      std::copy_n(t->values().data() + c * n, n, y.values().data() + (c * total_t + toff) * plane);
      toff += t->dim(1);
    }
  }
  return {std::move(y), {}};
}

void concat_time_vjp(std::span<const Shape> shapes, const Tensor& gy,
                     std::span<Tensor* const> grads) {
  const std::size_t C = gy.dim(0), total_t = gy.dim(1), plane = gy.dim(2) * gy.dim(3);
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t toff = 0;
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      const std::size_t tk = shapes[k][1];
      if (grads[k]) {
        const double* src = gy.values().data() + (c * total_t + toff) * plane;
        double* dst = grads[k]->values().data() + c * tk * plane;
        for (std::size_t i = 0; i < tk * plane; ++i) dst[i] += src[i];
      }
      toff += tk;
    }
  }
}

OpForward slice_time_forward(const Tensor& x, const OpAttrs& a) {
  require_rank4(x, "slice_time input");
  if (a.length == 0 || a.begin + a.length > x.dim(1)) {
    throw ShapeError("slice_time: [" + std::to_string(a.begin) + ", +" + std::to_string(a.length) +
                     ") outside time extent " + std::to_string(x.dim(1)));
  }
  const std::size_t C = x.dim(0), T = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y(Shape{C, a.length, x.dim(2), x.dim(3)});
  for (std::size_t c = 0; c < C; ++c) {
    std::copy_n(x.values().data() + (c * T + a.begin) * plane, a.length * plane,
                y.values().data() + c * a.length * plane);
  }
  return {std::move(y), {}};
}

OpForward crop_space_forward(const Tensor& x, const OpAttrs& a) {
  require_rank4(x, "crop_space input");
  if (a.height == 0 || a.width == 0 || a.h0 + a.height > x.dim(2) || a.w0 + a.width > x.dim(3)) {
    throw ShapeError("crop_space: window outside spatial extent " + to_string(x.shape()));
  }
  const std::size_t CT = x.dim(0) * x.dim(1);
  Tensor y(Shape{x.dim(0), x.dim(1), a.height, a.width});
  for (std::size_t ct = 0; ct < CT; ++ct) {
    for (std::size_t h = 0; h < a.height; ++h) {
      const double* src = x.values().data() + (ct * x.dim(2) + a.h0 + h) * x.dim(3) + a.w0;
      std::copy_n(src, a.width, y.values().data() + (ct * a.height + h) * a.width);
    }
  }
  return {std::move(y), {}};
}

OpForward spatial_diff_forward(const Tensor& x, const OpAttrs& a) {
  require_rank4(x, "spatial_diff input");
  if (a.axis != 2 && a.axis != 3) throw ShapeError("spatial_diff: axis must be 2 (height) or 3 (width)");
  if (a.step == 0 || a.step >= x.dim(a.axis)) throw ShapeError("spatial_diff: step out of range");
  Shape s = x.shape();
  s[a.axis] -= a.step;
  Tensor y(s);
  const std::size_t CT = s[0] * s[1];
  for (std::size_t ct = 0; ct < CT; ++ct) {
    for (std::size_t h = 0; h < s[2]; ++h) {
      for (std::size_t w = 0; w < s[3]; ++w) {
        const std::size_t hi = a.axis == 2 ? h + a.step : h;
        const std::size_t wi = a.axis == 3 ? w + a.step : w;
        const double* base = x.values().data() + ct * x.dim(2) * x.dim(3);
        y[(ct * s[2] + h) * s[3] + w] = base[hi * x.dim(3) + wi] - base[h * x.dim(3) + w];
      }
    }
  }
  return {std::move(y), {}};
}

}  // namespace

std::string_view op_name(OpKind kind) { return kOpNames[static_cast<std::size_t>(kind)]; }

std::optional<OpKind> op_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  }
  return std::nullopt;
}

OpForward op_forward(OpKind kind, std::span<const Tensor* const> in, const OpAttrs& a) {
  switch (kind) {
    case OpKind::Conv3d:
      expect_inputs(kind, in, 3);
      return conv3d_forward(*in[0], *in[1], *in[2]);
    case OpKind::Upsample2x: {
      expect_inputs(kind, in, 1);
      const Tensor& x = *in[0];
      require_rank4(x, "upsample2x input");
      const std::size_t CT = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
      Tensor y(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W});
      for (std::size_t ct = 0; ct < CT; ++ct)
        for (std::size_t h = 0; h < 2 * H; ++h)
          for (std::size_t w = 0; w < 2 * W; ++w)
            y[(ct * 2 * H + h) * 2 * W + w] = x[(ct * H + h / 2) * W + w / 2];
      return {std::move(y), {}};
    }
    case OpKind::TemporalExpand:
      expect_inputs(kind, in, 3);
      return temporal_expand_forward(*in[0], *in[1], *in[2]);
    case OpKind::ConcatTime:
      return concat_time_forward(in);
    case OpKind::SliceTime:
      expect_inputs(kind, in, 1);
      return slice_time_forward(*in[0], a);
    case OpKind::CropSpace:
      expect_inputs(kind, in, 1);
      return crop_space_forward(*in[0], a);
    case OpKind::Add:
    case OpKind::Mul: {
      expect_inputs(kind, in, 2);
      expect_same_shape(kind, *in[0], *in[1]);
      Tensor y = in[0]->constant();
      for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = kind == OpKind::Add ? y[i] + (*in[1])[i] : y[i] * (*in[1])[i];
      }
      if (kind == OpKind::Add) return {std::move(y), {}};
      return {std::move(y), {in[0]->constant(), in[1]->constant()}};
    }
    case OpKind::Scale: {
      expect_inputs(kind, in, 1);
      return {scaled(*in[0], a.scalar), {}};
    }
    case OpKind::LeakyRelu: {
      expect_inputs(kind, in, 1);
      Tensor y = in[0]->constant();
      for (double& v : y.values()) v = v > 0.0 ? v : a.scalar * v;
      return {std::move(y), {in[0]->constant()}};
    }
    case OpKind::SpatialDiff:
      expect_inputs(kind, in, 1);
      return spatial_diff_forward(*in[0], a);
    case OpKind::Sum:
      expect_inputs(kind, in, 1);
      return {Tensor::scalar(sum(*in[0])), {}};
    case OpKind::Mse:
    case OpKind::Mae: {
      expect_inputs(kind, in, 2);
      expect_same_shape(kind, *in[0], *in[1]);
      if (in[0]->size() == 0) throw ShapeError(std::string(op_name(kind)) + ": empty input");
      Tensor diff = in[0]->constant();
      double acc = 0.0;
      for (std::size_t i = 0; i < diff.size(); ++i) {
        diff[i] -= (*in[1])[i];
        acc += kind == OpKind::Mse ? diff[i] * diff[i] : std::abs(diff[i]);
      }
      const double n = static_cast<double>(diff.size());
      return {Tensor::scalar(acc / n), {std::move(diff)}};
    }
  }
  throw Error("unknown op kind");
}

void op_vjp(OpKind kind, const OpAttrs& a, std::span<const Shape> shapes,
            std::span<const Tensor> saved, const Tensor& gy, std::span<Tensor* const> grads) {
  switch (kind) {
    case OpKind::Conv3d:
      conv3d_vjp(saved, gy, grads);
      break;
    case OpKind::Upsample2x: {
      if (!grads[0]) break;
      Tensor& gx = *grads[0];
      const std::size_t CT = gx.dim(0) * gx.dim(1), H = gx.dim(2), W = gx.dim(3);
      for (std::size_t ct = 0; ct < CT; ++ct)
        for (std::size_t h = 0; h < 2 * H; ++h)
          for (std::size_t w = 0; w < 2 * W; ++w)
            gx[(ct * H + h / 2) * W + w / 2] += gy[(ct * 2 * H + h) * 2 * W + w];
      break;
    }
    case OpKind::TemporalExpand:
      temporal_expand_vjp(saved, gy, grads);
      break;
    case OpKind::ConcatTime:
      concat_time_vjp(shapes, gy, grads);
      break;
    case OpKind::SliceTime: {
      if (!grads[0]) break;
      Tensor& gx = *grads[0];
      const std::size_t C = gx.dim(0), T = gx.dim(1), plane = gx.dim(2) * gx.dim(3);
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = gy.values().data() + c * a.length * plane;
        double* dst = gx.values().data() + (c * T + a.begin) * plane;
        for (std::size_t i = 0; i < a.length * plane; ++i) dst[i] += src[i];
      }
      break;
    }
    case OpKind::CropSpace: {
      if (!grads[0]) break;
      Tensor& gx = *grads[0];
      const std::size_t CT = gx.dim(0) * gx.dim(1);
      for (std::size_t ct = 0; ct < CT; ++ct)
        for (std::size_t h = 0; h < a.height; ++h)
          for (std::size_t w = 0; w < a.width; ++w)
            gx[(ct * gx.dim(2) + a.h0 + h) * gx.dim(3) + a.w0 + w] +=
                gy[(ct * a.height + h) * a.width + w];
      break;
    }
    case OpKind::Add:
      for (Tensor* g : grads) {
        if (g) add_into(*g, gy);
      }
      break;
    case OpKind::Mul:
      for (std::size_t k = 0; k < 2; ++k) {
        if (!grads[k]) continue;
        const Tensor& other = saved[1 - k];
        for (std::size_t i = 0; i < gy.size(); ++i) (*grads[k])[i] += gy[i] * other[i];
      }
      break;
    case OpKind::Scale:
      if (grads[0]) add_into(*grads[0], gy, a.scalar);
      break;
    case OpKind::LeakyRelu:
      if (grads[0]) {
        const Tensor& x = saved[0];
        for (std::size_t i = 0; i < gy.size(); ++i) (*grads[0])[i] += x[i] > 0.0 ? gy[i] : a.scalar * gy[i];
      }
      break;
    case OpKind::SpatialDiff: {
      if (!grads[0]) break;
      Tensor& gx = *grads[0];
      const Shape& s = gy.shape();
      const std::size_t CT = s[0] * s[1];
      for (std::size_t ct = 0; ct < CT; ++ct) {
        double* base = gx.values().data() + ct * gx.dim(2) * gx.dim(3);
        for (std::size_t h = 0; h < s[2]; ++h) {
          for (std::size_t w = 0; w < s[3]; ++w) {
            const double g = gy[(ct * s[2] + h) * s[3] + w];
            const std::size_t hi = a.axis == 2 ? h + a.step : h;
            const std::size_t wi = a.axis == 3 ? w + a.step : w;
            base[hi * gx.dim(3) + wi] += g;
            base[h * gx.dim(3) + w] -= g;
          }
        }
      }
      break;
    }
    case OpKind::Sum:
      if (grads[0]) {
        for (double& v : grads[0]->values()) v += gy[0];
      }
      break;
    case OpKind::Mse:
    case OpKind::Mae: {
      const Tensor& diff = saved[0];
      const double n = static_cast<double>(diff.size());
      for (std::size_t i = 0; i < diff.size(); ++i) {
        double d;
        if (kind == OpKind::Mse) {
          d = 2.0 * diff[i] / n * gy[0];
        } else {
          d = (diff[i] > 0.0 ? 1.0 : (diff[i] < 0.0 ? -1.0 : 0.0)) / n * gy[0];
        }
        if (grads[0]) (*grads[0])[i] += d;
        if (grads[1]) (*grads[1])[i] -= d;
      }
      break;
    }
  }
  const auto& fault = fault_state();
  if (fault.kind.load() == static_cast<int>(kind)) {
    const double f = fault.factor.load();
    for (Tensor* g : grads) {
      if (g) {
        for (double& v : g->values()) v *= f;
      }
    }
  }
}

namespace testing_hooks {
void inject_adjoint_fault(std::optional<OpKind> kind, double factor) {
  auto& fault = fault_state();
  fault.factor.store(factor);
  fault.kind.store(kind ? static_cast<int>(*kind) : -1);
}
}  // namespace testing_hooks

}  // namespace chopgrad
