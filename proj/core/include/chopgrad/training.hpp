#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "chopgrad/decoder.hpp"
#include "chopgrad/loss.hpp"
#include "chopgrad/scheduler.hpp"

namespace chopgrad {

enum class TaskKind { Denoise, BlurRestore };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

/// Synthetic moving-shapes videos in [0, 1] with a corruption to undo.
struct ToyTask {
  TaskKind kind = TaskKind::Denoise;
  std::size_t frames = 16;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t shapes = 2;
  double strength = 0.3;
  std::uint64_t seed = 0;
  std::size_t train_size = 8;
  std::size_t val_size = 4;
};

struct ToyVideo {
  Tensor clean;      // (C, T, H, W)
  Tensor corrupted;  // (C, T, H, W)
  std::vector<Tensor> clean_latents;
  std::vector<Tensor> corrupted_latents;
};

struct ToyDataset {
  std::vector<ToyVideo> train;
  std::vector<ToyVideo> val;
};

/// Deterministic in the task seed. Train item k and validation item k draw
/// from disjoint seed streams.
ToyDataset generate_dataset(const ToyTask& task, const DecoderConfig& config, std::uint64_t encoder_seed);

/// Residual non-causal temporal convolution over all latent groups jointly:
/// y = z + W2 * leaky_relu(W1 * pad(z) + b1) + b2. W2 and b2 start at zero,
/// so a fresh backbone is the identity.
struct ToyBackbone {
  std::size_t channels = 0;
  std::size_t hidden = 0;
  Tensor w1;  // (hidden, channels, 3, 3, 3)
  Tensor b1;  // (hidden)
  Tensor w2;  // (channels, hidden, 1, 1, 1)
  Tensor b2;  // (channels)

  static ToyBackbone init(std::size_t channels, std::size_t hidden, std::uint64_t seed);
  std::vector<const Tensor*> tensors() const;
  std::vector<Tensor*> tensors();
  std::size_t parameter_count() const;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

  /// Copy whose tensors are leaves of `tape`.
  ToyBackbone bind(Tape& tape) const;
  std::vector<double> gather(const GradientStore& grads) const;

  /// One output per input group. Records into `rec` when it records.
  std::vector<Tensor> forward(const Recorder& rec, std::span<const Tensor> latents) const;
  std::vector<Tensor> forward(std::span<const Tensor> latents) const;
};

struct TrainConfig {
  std::size_t steps = 200;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double latent_weight = 1.0;
  double pixel_weight = 100.0;  // nominal; see scale_match
  /// Multiplies pixel_weight by L_lat0 / (100 * L_pix0) measured on the
  /// training set before the first step, so the default 100 starts both
  /// terms at equal size.
  bool scale_match = true;
  PixelLoss pixel = PixelLoss::Mse;
  TruncationPolicy policy;
  bool full_backprop = false;
  bool train_decoder = false;
  std::uint64_t seed = 0;  // sample order
};

struct TrainStep {
  std::size_t step = 0;
  double latent_loss = 0.0;
  double pixel_loss = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
  double total_loss = 0.0;
};

struct EvalMetrics {
  std::vector<double> mse;   // per video
  std::vector<double> psnr;  // per video
  double mean_mse = 0.0;
  double mean_psnr = 0.0;
};

struct TrainReport {
  std::vector<TrainStep> steps;
  double effective_pixel_weight = 0.0;
  EvalMetrics validation;
  std::size_t peak_decoder_bytes = 0;  // scheduler tape, max over steps
  std::size_t backbone_bytes = 0;      // backbone tape, max over steps
  double wall_ms = 0.0;
  bool diverged = false;
};

/// PSNR on [0, 1] frames; an MSE of 0 reports kPsnrCap.
inline constexpr double kPsnrCap = 100.0;
double psnr_from_mse(double mse);

/// Latent inputs paired with the frames the decode should reproduce.
struct EvalSample {
  std::vector<Tensor> latents;
  Tensor target;  // (C, T, H, W)
};

EvalMetrics evaluate(const ToyBackbone& backbone, const DecoderParams& decoder, std::span<const EvalSample> samples);
std::vector<EvalSample> validation_samples(const ToyDataset& data);

/// Stand-in for a pretrained decoder: fits `decoder` alone so that clean
/// latents decode to their clean videos (pixel MSE, full backprop, SGD with
/// momentum). Returns the mean training pixel MSE after each step.
struct DecoderFitConfig {
  std::size_t steps = 500;
  double learning_rate = 0.2;
  double momentum = 0.9;
};
std::vector<double> fit_decoder(const ToyDataset& data, DecoderParams& decoder, const DecoderFitConfig& config);

/// SGD with momentum on the backbone (and the decoder when asked). `decoder`
/// is updated in place only when `config.train_decoder` is set. With a zero
/// pixel weight the decoder is never run and peak_decoder_bytes stays 0.
TrainReport train(const ToyDataset& data, ToyBackbone& backbone, DecoderParams& decoder, const TrainConfig& config);

}  // namespace chopgrad
