#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chopgrad/tape.hpp"
#include "chopgrad/tensor.hpp"

namespace chopgrad {

enum class Activation { LeakyRelu, Identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Shape and initialisation of the causal decoder.
///
/// Layer m consumes `channel_widths[m]` channels and produces
/// `channel_widths[m+1]` (the last layer keeps its width). Each layer's
/// temporal kernel spans `cache_length + 1` slots, so concatenating the N
/// cached slices in front of the new slots yields exactly one output per new
/// slot. After the last layer a per-slot projection expands every latent time
/// slot into `group_size` frames of `pixel_channels` channels.
struct DecoderConfig {
  std::size_t num_layers = 2;
  std::vector<std::size_t> channel_widths{4, 4};
  std::size_t cache_length = 1;
  std::size_t group_size = 4;
  std::vector<bool> upsample{true, false};
  std::vector<std::size_t> spatial_kernels{3, 3};
  Activation activation = Activation::LeakyRelu;
  double leaky_slope = 0.2;
  std::size_t pixel_channels = 3;
  std::size_t latent_height = 8;
  std::size_t latent_width = 8;
  std::size_t latent_time = 1;
  std::uint64_t init_seed = 0;
  double init_gain = 0.7;

  /// Throws ShapeError describing the first violated constraint.
  void validate() const;

  std::size_t in_channels(std::size_t layer) const { return channel_widths.at(layer); }
  std::size_t out_channels(std::size_t layer) const;
  /// Spatial upsampling factor of layer `layer`'s input relative to the latent grid.
  std::size_t scale_before(std::size_t layer) const;
  std::size_t output_scale() const;

  Shape latent_shape() const;
  Shape latent_shape(std::size_t height, std::size_t width) const;
  Shape frames_shape() const;
  Shape frames_shape(std::size_t latent_h, std::size_t latent_w) const;
  Shape cache_shape(std::size_t layer, std::size_t latent_h, std::size_t latent_w) const;
  Shape kernel_shape(std::size_t layer) const;
  std::size_t frames_per_group() const { return latent_time * group_size; }
};

struct LayerParams {
  Tensor kernel;  // (Cout, Cin, N+1, k, k)
  Tensor bias;    // (Cout)
};

struct DecoderParams {
  DecoderConfig config;
  std::vector<LayerParams> layers;
  Tensor expand_weight;  // (G, C, D_last)
  Tensor expand_bias;    // (G, C)

  std::size_t parameter_count() const;
  /// Parameters in a fixed order: layer kernels and biases, then the expansion.
  std::vector<const Tensor*> tensors() const;
  std::vector<Tensor*> tensors();
  std::vector<double> flatten() const;
  static DecoderParams unflatten(const DecoderConfig& config, std::span<const double> flat);

  /// Copy whose tensors are leaves of `tape`.
  DecoderParams bind(Tape& tape) const;
  /// Flattened gradient in tensors() order, zeros where `grads` has no entry.
  std::vector<double> gather(const GradientStore& grads) const;
};

/// Sum over cache taps of the spectral norm of each (Cout x Cin) tap matrix.
/// Upper bound on the operator norm of the cache-to-output map of a layer.
double cache_path_gain(const Tensor& kernel, std::size_t cache_length);
/// Same bound for the single tap that reads the newest slot.
double current_path_gain(const Tensor& kernel, std::size_t cache_length);

/// Seeded initialisation. The current-slot taps of every kernel are rescaled
/// to gain `config.init_gain`; the cache taps together also reach
/// `init_gain`, split geometrically over lags with ratio `init_gain`.
DecoderParams init_params(const DecoderConfig& config);

/// Trailing N slices of every layer's input stream.
struct CacheState {
  std::vector<Tensor> layers;
  std::optional<SegmentId> source_segment;
  bool detached = false;

  static CacheState zeros(const DecoderConfig& config, std::size_t latent_h, std::size_t latent_w);
  static CacheState zeros(const DecoderConfig& config);
};

struct FrameGroupLatent {
  std::size_t group_index = 0;
  Tensor data;  // (d_0, T', H', W')
};

struct DecodeStep {
  Tensor frames;  // (C, T'G, H, W)
  CacheState cache;
};

/// One frame group through every layer: concat cache, convolve, cache the
/// trailing N slices of the concatenated input. Records into `rec` if it is
/// recording. Spatial extents follow the latent tensor, so cropped regions
/// decode with the same parameters.
DecodeStep decode_step(const Recorder& rec, const Tensor& latent, const CacheState& prev,
                       const DecoderParams& params);

/// Untaped convenience overload.
DecodeStep decode_step(const FrameGroupLatent& latent, const CacheState& prev,
                       const DecoderParams& params);

/// Sequential decode of consecutive groups; frames concatenated on time.
Tensor decode_video(std::span<const FrameGroupLatent> latents, const DecoderParams& params);

/// Whole time axis through each layer at once, zero-padded by N slices in
/// front. Shares no code with the cached path.
Tensor decode_monolithic(std::span<const FrameGroupLatent> latents, const DecoderParams& params);

/// Latent cells an output-pixel interval can depend on, per spatial axis.
/// Time does not widen it: every path crosses each conv exactly once.
struct CellRange {
  long lo;
  long hi;
};
CellRange latent_dependency(const DecoderConfig& config, long pixel_lo, long pixel_hi);
/// Latent cells of context needed around a block so its pixels decode exactly.
std::size_t receptive_halo(const DecoderConfig& config);

/// Fixed strided average pool over G frames and s x s pixels followed by a
/// seeded random projection from pixel channels to latent channels.
class ToyEncoder {
 public:
  ToyEncoder(const DecoderConfig& config, std::uint64_t seed);

  std::vector<FrameGroupLatent> encode(const Tensor& video) const;
  const Tensor& projection() const { return projection_; }

 private:
  std::size_t group_size_;
  std::size_t latent_time_;
  std::size_t scale_;
  Tensor projection_;  // (d_0, C)
};

/// Splits a (C, T, H, W) video into per-group frame tensors.
std::vector<Tensor> split_groups(const Tensor& video, std::size_t frames_per_group);
Tensor join_groups(std::span<const Tensor> groups);

}  // namespace chopgrad
