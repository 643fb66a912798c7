#include "chopgrad/decoder.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>

namespace chopgrad {
namespace {

long floor_div(long a, long b) {
  long q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

double tap_spectral_norm(const Tensor& kernel, std::size_t dt, std::size_t dh, std::size_t dw) {
  const std::size_t cout = kernel.dim(0), cin = kernel.dim(1), kt = kernel.dim(2),
                    kh = kernel.dim(3), kw = kernel.dim(4);
  Eigen::MatrixXd m(cout, cin);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t ci = 0; ci < cin; ++ci)
      m(co, ci) = kernel[(((co * cin + ci) * kt + dt) * kh + dh) * kw + dw];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
}

double taps_gain(const Tensor& kernel, std::size_t dt_lo, std::size_t dt_hi) {
  double g = 0.0;
  for (std::size_t dt = dt_lo; dt < dt_hi; ++dt)
    for (std::size_t dh = 0; dh < kernel.dim(3); ++dh)
      for (std::size_t dw = 0; dw < kernel.dim(4); ++dw) g += tap_spectral_norm(kernel, dt, dh, dw);
  return g;
}

void scale_taps(Tensor& kernel, std::size_t dt_lo, std::size_t dt_hi, double factor) {
  const std::size_t kt = kernel.dim(2), plane = kernel.dim(3) * kernel.dim(4);
  const std::size_t pairs = kernel.dim(0) * kernel.dim(1);
  for (std::size_t p = 0; p < pairs; ++p)
    for (std::size_t dt = dt_lo; dt < dt_hi; ++dt)
      for (std::size_t i = 0; i < plane; ++i) kernel[(p * kt + dt) * plane + i] *= factor;
}

void rescale_to_gain(Tensor& kernel, std::size_t dt_lo, std::size_t dt_hi, double gain) {
  const double g = taps_gain(kernel, dt_lo, dt_hi);
  if (g > 0.0) scale_taps(kernel, dt_lo, dt_hi, gain / g);
}

Tensor activate(const Recorder& rec, const Tensor& y, const DecoderConfig& cfg) {
  return cfg.activation == Activation::LeakyRelu ? rec.leaky_relu(y, cfg.leaky_slope) : y;
}

}  // namespace

std::string to_string(Activation a) {
  return a == Activation::LeakyRelu ? "leaky_relu" : "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "leaky_relu") return Activation::LeakyRelu;
  if (s == "identity") return Activation::Identity;
  throw Error("unknown activation '" + s + "'");
}

void DecoderConfig::validate() const {
  if (num_layers < 1) throw ShapeError("decoder needs at least one layer");
  if (cache_length < 1) throw ShapeError("cache_length must be >= 1");
  if (group_size < 1) throw ShapeError("group_size must be >= 1");
  if (latent_time < 1) throw ShapeError("latent_time must be >= 1");
  if (pixel_channels < 1) throw ShapeError("pixel_channels must be >= 1");
  if (channel_widths.size() != num_layers)
    throw ShapeError("channel_widths needs one entry per layer");
  if (upsample.size() != num_layers) throw ShapeError("upsample schedule needs one entry per layer");
  if (spatial_kernels.size() != num_layers)
    throw ShapeError("spatial_kernels needs one entry per layer");
  for (std::size_t w : channel_widths)
    if (w == 0) throw ShapeError("channel widths must be positive");
  for (std::size_t k : spatial_kernels)
    if (k % 2 == 0) throw ShapeError("spatial kernel extents must be odd");
  if (latent_height == 0 || latent_width == 0) throw ShapeError("latent extent must be positive");
  if (init_gain < 0.0) throw ShapeError("init_gain must be non-negative");
}

std::size_t DecoderConfig::out_channels(std::size_t layer) const {
  return layer + 1 < num_layers ? channel_widths.at(layer + 1) : channel_widths.at(layer);
}

std::size_t DecoderConfig::scale_before(std::size_t layer) const {
  std::size_t s = 1;
  for (std::size_t m = 0; m < layer; ++m)
    if (upsample[m]) s *= 2;
  return s;
}

std::size_t DecoderConfig::output_scale() const { return scale_before(num_layers); }

Shape DecoderConfig::latent_shape() const { return latent_shape(latent_height, latent_width); }

Shape DecoderConfig::latent_shape(std::size_t height, std::size_t width) const {
  return {channel_widths.at(0), latent_time, height, width};
}

Shape DecoderConfig::frames_shape() const { return frames_shape(latent_height, latent_width); }

Shape DecoderConfig::frames_shape(std::size_t latent_h, std::size_t latent_w) const {
  const std::size_t s = output_scale();
  return {pixel_channels, frames_per_group(), latent_h * s, latent_w * s};
}

Shape DecoderConfig::cache_shape(std::size_t layer, std::size_t latent_h, std::size_t latent_w) const {
  const std::size_t s = scale_before(layer);
  return {in_channels(layer), cache_length, latent_h * s, latent_w * s};
}

Shape DecoderConfig::kernel_shape(std::size_t layer) const {
  return {out_channels(layer), in_channels(layer), cache_length + 1, spatial_kernels.at(layer),
          spatial_kernels.at(layer)};
}

std::size_t DecoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) n += t->size();
  return n;
}

std::vector<const Tensor*> DecoderParams::tensors() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers) {
    out.push_back(&l.kernel);
    out.push_back(&l.bias);
  }
  out.push_back(&expand_weight);
  out.push_back(&expand_bias);
  return out;
}

std::vector<Tensor*> DecoderParams::tensors() {
  std::vector<Tensor*> out;
  for (auto& l : layers) {
    out.push_back(&l.kernel);
    out.push_back(&l.bias);
  }
  out.push_back(&expand_weight);
  out.push_back(&expand_bias);
  return out;
}

std::vector<double> DecoderParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const Tensor* t : tensors()) flat.insert(flat.end(), t->values().begin(), t->values().end());
  return flat;
}

DecoderParams DecoderParams::unflatten(const DecoderConfig& config, std::span<const double> flat) {
  config.validate();
  DecoderParams p;
  p.config = config;
  for (std::size_t m = 0; m < config.num_layers; ++m) {
    p.layers.push_back({Tensor(config.kernel_shape(m)), Tensor(Shape{config.out_channels(m)})});
  }
  const std::size_t d_last = config.out_channels(config.num_layers - 1);
  p.expand_weight = Tensor(Shape{config.group_size, config.pixel_channels, d_last});
  p.expand_bias = Tensor(Shape{config.group_size, config.pixel_channels});
  std::size_t off = 0;
  for (Tensor* t : p.tensors()) {
    if (off + t->size() > flat.size()) throw ShapeError("unflatten: parameter vector too short");
    std::copy_n(flat.begin() + off, t->size(), t->values().begin());
    off += t->size();
  }
  if (off != flat.size()) throw ShapeError("unflatten: parameter vector too long");
  return p;
}

DecoderParams DecoderParams::bind(Tape& tape) const {
  DecoderParams bound = *this;
  for (Tensor* t : bound.tensors()) *t = tape.leaf(t->constant());
  return bound;
}

std::vector<double> DecoderParams::gather(const GradientStore& grads) const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const Tensor* t : tensors()) {
    const Tensor* g = t->node() ? grads.find(*t->node()) : nullptr;
    if (g) {
      flat.insert(flat.end(), g->values().begin(), g->values().end());
    } else {
      flat.insert(flat.end(), t->size(), 0.0);
    }
  }
  return flat;
}

double cache_path_gain(const Tensor& kernel, std::size_t cache_length) {
  return taps_gain(kernel, 0, cache_length);
}

double current_path_gain(const Tensor& kernel, std::size_t cache_length) {
  return taps_gain(kernel, cache_length, cache_length + 1);
}

DecoderParams init_params(const DecoderConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.init_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  DecoderParams params;
  params.config = config;
  const std::size_t N = config.cache_length;
  for (std::size_t m = 0; m < config.num_layers; ++m) {
    LayerParams lp{Tensor(config.kernel_shape(m)), Tensor(Shape{config.out_channels(m)})};
    for (double& v : lp.kernel.values()) v = normal(rng);
    for (double& v : lp.bias.values()) v = 0.05 * normal(rng);
    // Cache taps decay geometrically with lag (ratio init_gain) and sum to
    // init_gain, so one layer's impulse response is already exponential.
    double profile = 0.0;
    for (std::size_t lag = 1; lag <= N; ++lag) profile += std::pow(config.init_gain, static_cast<double>(lag - 1));
    for (std::size_t lag = 1; lag <= N; ++lag) {
      const double gain = config.init_gain * std::pow(config.init_gain, static_cast<double>(lag - 1)) / profile;
      rescale_to_gain(lp.kernel, N - lag, N - lag + 1, gain);
    }
    rescale_to_gain(lp.kernel, N, N + 1, config.init_gain);
    if (config.init_gain == 0.0) std::fill(lp.kernel.values().begin(), lp.kernel.values().end(), 0.0);
    params.layers.push_back(std::move(lp));
  }
  const std::size_t d_last = config.out_channels(config.num_layers - 1);
  params.expand_weight = Tensor(Shape{config.group_size, config.pixel_channels, d_last});
  params.expand_bias = Tensor(Shape{config.group_size, config.pixel_channels});
  const double wscale = 1.0 / std::sqrt(static_cast<double>(d_last));
  for (double& v : params.expand_weight.values()) v = wscale * normal(rng);
  for (double& v : params.expand_bias.values()) v = 0.05 * normal(rng);
  return params;
}

CacheState CacheState::zeros(const DecoderConfig& config, std::size_t latent_h, std::size_t latent_w) {
  CacheState c;
  for (std::size_t m = 0; m < config.num_layers; ++m) {
    c.layers.emplace_back(config.cache_shape(m, latent_h, latent_w));
  }
  return c;
}

CacheState CacheState::zeros(const DecoderConfig& config) {
  return zeros(config, config.latent_height, config.latent_width);
}

DecodeStep decode_step(const Recorder& rec, const Tensor& latent, const CacheState& prev,
                       const DecoderParams& params) {
  const DecoderConfig& cfg = params.config;
  require_rank4(latent, "decode_step latent");
  if (latent.dim(0) != cfg.channel_widths[0] || latent.dim(1) != cfg.latent_time) {
    throw ShapeError("decode_step: latent " + to_string(latent.shape()) + " does not match config " +
                     to_string(cfg.latent_shape(latent.dim(2), latent.dim(3))));
  }
  if (prev.layers.size() != cfg.num_layers) {
    throw ShapeError("decode_step: cache has " + std::to_string(prev.layers.size()) +
                     " layers, config has " + std::to_string(cfg.num_layers));
  }
  const std::size_t lh = latent.dim(2), lw = latent.dim(3), N = cfg.cache_length;
  DecodeStep out;
  Tensor z = latent;
  for (std::size_t m = 0; m < cfg.num_layers; ++m) {
    const Shape expected = cfg.cache_shape(m, lh, lw);
    if (prev.layers[m].shape() != expected) {
      throw ShapeError("decode_step: layer " + std::to_string(m) + " cache " +
                       to_string(prev.layers[m].shape()) + ", expected " + to_string(expected));
    }
    Tensor x = rec.concat_time(prev.layers[m], z);
    out.cache.layers.push_back(rec.slice_time(x, x.dim(1) - N, N));
    Tensor y = rec.conv3d(x, params.layers[m].kernel, params.layers[m].bias);
    if (cfg.upsample[m]) y = rec.upsample2x(y);
    z = activate(rec, y, cfg);
  }
  out.frames = rec.temporal_expand(z, params.expand_weight, params.expand_bias);
  if (rec.recording()) out.cache.source_segment = rec.segment();
  return out;
}

DecodeStep decode_step(const FrameGroupLatent& latent, const CacheState& prev,
                       const DecoderParams& params) {
  return decode_step(Recorder{}, latent.data, prev, params);
}

namespace {
void check_consecutive(std::span<const FrameGroupLatent> latents) {
  for (std::size_t i = 0; i < latents.size(); ++i) {
    if (latents[i].group_index != i) {
      throw Error("latent groups must be indexed consecutively from 0; position " +
                  std::to_string(i) + " has index " + std::to_string(latents[i].group_index));
    }
  }
}
}  // namespace

Tensor decode_video(std::span<const FrameGroupLatent> latents, const DecoderParams& params) {
  check_consecutive(latents);
  if (latents.empty()) throw Error("decode_video: no latent groups");
  const Tensor& first = latents.front().data;
  CacheState cache = CacheState::zeros(params.config, first.dim(2), first.dim(3));
  std::vector<Tensor> groups;
  for (const auto& l : latents) {
    DecodeStep step = decode_step(l, cache, params);
    groups.push_back(std::move(step.frames));
    cache = std::move(step.cache);
  }
  return join_groups(groups);
}

Tensor decode_monolithic(std::span<const FrameGroupLatent> latents, const DecoderParams& params) {
  check_consecutive(latents);
  if (latents.empty()) throw Error("decode_monolithic: no latent groups");
  const DecoderConfig& cfg = params.config;
  const Recorder eval;
  std::vector<Tensor> parts;
  for (const auto& l : latents) parts.push_back(l.data);
  Tensor z = join_groups(parts);
  for (std::size_t m = 0; m < cfg.num_layers; ++m) {
    Tensor pad(Shape{z.dim(0), cfg.cache_length, z.dim(2), z.dim(3)});
    Tensor y = eval.conv3d(eval.concat_time(pad, z), params.layers[m].kernel, params.layers[m].bias);
    if (cfg.upsample[m]) y = eval.upsample2x(y);
    z = activate(eval, y, cfg);
  }
  return eval.temporal_expand(z, params.expand_weight, params.expand_bias);
}

CellRange latent_dependency(const DecoderConfig& config, long pixel_lo, long pixel_hi) {
  long lo = pixel_lo, hi = pixel_hi;
  for (std::size_t m = config.num_layers; m-- > 0;) {
    if (config.upsample[m]) {
      lo = floor_div(lo, 2);
      hi = floor_div(hi, 2);
    }
    const long r = static_cast<long>(config.spatial_kernels[m] / 2);
    lo -= r;
    hi += r;
  }
  return {lo, hi};
}

std::size_t receptive_halo(const DecoderConfig& config) {
  const long s = static_cast<long>(config.output_scale());
  const long a = 1024;
  const CellRange r = latent_dependency(config, a * s, (a + 1) * s - 1);
  return static_cast<std::size_t>(std::max(a - r.lo, r.hi - a));
}

ToyEncoder::ToyEncoder(const DecoderConfig& config, std::uint64_t seed)
    : group_size_(config.group_size),
      latent_time_(config.latent_time),
      scale_(config.output_scale()),
      projection_(Shape{config.channel_widths.at(0), config.pixel_channels}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(config.pixel_channels)));
  for (double& v : projection_.values()) v = normal(rng);
}

std::vector<FrameGroupLatent> ToyEncoder::encode(const Tensor& video) const {
  require_rank4(video, "encode_toy video");
  const std::size_t C = video.dim(0), T = video.dim(1), H = video.dim(2), W = video.dim(3);
  if (C != projection_.dim(1)) throw ShapeError("encode_toy: video has " + std::to_string(C) + " channels");
  const std::size_t per_group = group_size_ * latent_time_;
  if (T % per_group != 0) {
    throw ShapeError("encode_toy: " + std::to_string(T) + " frames not divisible by " +
                     std::to_string(per_group) + " frames per group");
  }
  if (H % scale_ != 0 || W % scale_ != 0) throw ShapeError("encode_toy: spatial extent not divisible by decoder scale");
  const std::size_t d = projection_.dim(0), lh = H / scale_, lw = W / scale_;
  const double norm = 1.0 / static_cast<double>(group_size_ * scale_ * scale_);
  std::vector<FrameGroupLatent> out;
  for (std::size_t g = 0; g < T / per_group; ++g) {
    Tensor pooled(Shape{C, latent_time_, lh, lw});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < latent_time_; ++s)
        for (std::size_t f = 0; f < group_size_; ++f) {
          const std::size_t t = g * per_group + s * group_size_ + f;
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w)
              pooled.at(c, s, h / scale_, w / scale_) += norm * video.at(c, t, h, w);
        }
    Tensor z(Shape{d, latent_time_, lh, lw});
    const std::size_t plane = latent_time_ * lh * lw;
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t c = 0; c < C; ++c) {
        const double p = projection_[k * C + c];
        for (std::size_t i = 0; i < plane; ++i) z[k * plane + i] += p * pooled[c * plane + i];
      }
    out.push_back({g, std::move(z)});
  }
  return out;
}

std::vector<Tensor> split_groups(const Tensor& video, std::size_t frames_per_group) {
  require_rank4(video, "split_groups");
  if (frames_per_group == 0 || video.dim(1) % frames_per_group != 0) {
    throw ShapeError("split_groups: " + std::to_string(video.dim(1)) + " frames not divisible by " +
                     std::to_string(frames_per_group));
  }
  const Recorder eval;
  std::vector<Tensor> out;
  for (std::size_t t = 0; t < video.dim(1); t += frames_per_group) {
    out.push_back(eval.slice_time(video.constant(), t, frames_per_group));
  }
  return out;
}

Tensor join_groups(std::span<const Tensor> groups) {
  std::vector<const Tensor*> ptrs;
  std::vector<Tensor> consts;
  consts.reserve(groups.size());
  for (const Tensor& g : groups) consts.push_back(g.constant());
  for (const Tensor& g : consts) ptrs.push_back(&g);
  return Recorder{}.concat_time(ptrs);
}

}  // namespace chopgrad
