#pragma once

#include <string>
#include <vector>

#include "chopgrad/decoder.hpp"
#include "chopgrad/tape.hpp"

namespace chopgrad {

enum class PixelLoss { Mse, Mae, MultiscaleGradient };

std::string to_string(PixelLoss p);
PixelLoss pixel_loss_from_string(const std::string& s);

/// Per-group objective: pixel_weight * pixel term + latent_weight * latent MSE.
/// A zero weight drops its term entirely; it is never evaluated.
struct LossSpec {
  PixelLoss pixel = PixelLoss::Mse;
  double pixel_weight = 1.0;
  double latent_weight = 0.0;

  void validate() const;
  bool elementwise() const { return pixel != PixelLoss::MultiscaleGradient; }
};

/// Targets per frame group. Latent targets are only needed when the latent
/// term is active.
struct Targets {
  std::vector<Tensor> frames;
  std::vector<Tensor> latents;
};

/// One video's latent groups with their targets.
struct Sample {
  std::vector<Tensor> latents;
  Targets targets;
};

/// Window of the decoded region (in latent cells) that contributes to the
/// loss, and the factor applied to its means. The unchunked run uses the whole
/// extent with factor 1.
struct LossRegion {
  std::size_t h0 = 0, w0 = 0, height = 0, width = 0;
  double factor = 1.0;

  static LossRegion whole(const Tensor& latent);
};

/// Records the loss of one frame group. `frames` and `latent` cover the
/// decoded region; `target_frames` / `target_latent` cover only the window.
Tensor group_loss(const Recorder& rec, const Tensor& frames, const Tensor& latent,
                  const Tensor& target_frames, const Tensor* target_latent, const LossSpec& spec,
                  const LossRegion& region, std::size_t output_scale);

/// dL_i/dX_i for the pixel term of one group (whole-frame window).
Tensor pixel_cotangent(const Tensor& frames, const Tensor& target_frames, const LossSpec& spec);

}  // namespace chopgrad
