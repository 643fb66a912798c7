#include "chopgrad/loss.hpp"

#include <array>

namespace chopgrad {

std::string to_string(PixelLoss p) {
  switch (p) {
    case PixelLoss::Mse: return "mse";
    case PixelLoss::Mae: return "mae";
    case PixelLoss::MultiscaleGradient: return "multiscale_gradient";
  }
  return "?";
}

PixelLoss pixel_loss_from_string(const std::string& s) {
  if (s == "mse") return PixelLoss::Mse;
  if (s == "mae") return PixelLoss::Mae;
  if (s == "multiscale_gradient") return PixelLoss::MultiscaleGradient;
  throw Error("unknown pixel loss '" + s + "'");
}

void LossSpec::validate() const {
  if (pixel_weight < 0.0 || latent_weight < 0.0) throw Error("loss weights must be non-negative");
  if (pixel_weight == 0.0 && latent_weight == 0.0) throw Error("loss weights must not both be zero");
}

LossRegion LossRegion::whole(const Tensor& latent) {
  return {0, 0, latent.dim(2), latent.dim(3), 1.0};
}

namespace {

Tensor pixel_term(const Recorder& rec, const Tensor& pred, const Tensor& target, PixelLoss kind) {
  switch (kind) {
    case PixelLoss::Mse: return rec.mse(pred, target);
    case PixelLoss::Mae: return rec.mae(pred, target);
    case PixelLoss::MultiscaleGradient: {
      const Recorder eval;
      std::optional<Tensor> acc;
      for (std::size_t step : std::array<std::size_t, 2>{1, 2}) {
        for (std::size_t axis : std::array<std::size_t, 2>{2, 3}) {
          if (pred.dim(axis) <= step) continue;
          Tensor term = rec.mse(rec.spatial_diff(pred, axis, step),
                                eval.spatial_diff(target.constant(), axis, step));
          acc = acc ? rec.add(*acc, term) : term;
        }
      }
      if (!acc) throw ShapeError("multiscale gradient loss needs frames wider than one pixel");
      return rec.scale(*acc, 0.25);
    }
  }
  throw Error("unknown pixel loss");
}

}  // namespace

Tensor group_loss(const Recorder& rec, const Tensor& frames, const Tensor& latent,
                  const Tensor& target_frames, const Tensor* target_latent, const LossSpec& spec,
                  const LossRegion& region, std::size_t output_scale) {
  const bool whole = region.h0 == 0 && region.w0 == 0 && region.height == latent.dim(2) &&
                     region.width == latent.dim(3);
  std::optional<Tensor> total;
  if (spec.pixel_weight > 0.0) {
    Tensor pred = whole ? frames
                        : rec.crop_space(frames, region.h0 * output_scale, region.w0 * output_scale,
                                         region.height * output_scale, region.width * output_scale);
    if (pred.shape() != target_frames.shape()) {
      throw ShapeError("target frames " + to_string(target_frames.shape()) + " do not match decoded " +
                       to_string(pred.shape()));
    }
    total = rec.scale(pixel_term(rec, pred, target_frames, spec.pixel), spec.pixel_weight * region.factor);
  }
  if (spec.latent_weight > 0.0) {
    if (!target_latent) throw Error("latent loss weight is set but no latent targets were given");
    Tensor z = whole ? latent : rec.crop_space(latent, region.h0, region.w0, region.height, region.width);
    if (z.shape() != target_latent->shape()) {
      throw ShapeError("target latent " + to_string(target_latent->shape()) + " does not match " +
                       to_string(z.shape()));
    }
    Tensor term = rec.scale(rec.mse(z, *target_latent), spec.latent_weight * region.factor);
    total = total ? rec.add(*total, term) : term;
  }
  if (!total) throw Error("loss has no active term");
  return *total;
}

Tensor pixel_cotangent(const Tensor& frames, const Tensor& target_frames, const LossSpec& spec) {
  if (spec.pixel_weight == 0.0) return Tensor(frames.shape());
  Tape tape;
  const SegmentId seg = tape.open_segment();
  const Recorder rec(tape, seg);
  Tensor x = tape.leaf(frames.constant());
  Tensor loss = rec.scale(pixel_term(rec, x, target_frames.constant(), spec.pixel), spec.pixel_weight);
  GradientStore seeds;
  seeds.set(*loss.node(), Tensor::scalar(1.0));
  return tape.backward(seg, seeds).at(*x.node());
}

}  // namespace chopgrad
