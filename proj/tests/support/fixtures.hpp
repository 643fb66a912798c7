#pragma once

#include <random>
#include <vector>

#include "chopgrad/decoder.hpp"
#include "chopgrad/loss.hpp"

namespace chopgrad::testing {

inline DecoderConfig tiny_config(std::uint64_t seed = 1) {
  DecoderConfig cfg;
  cfg.num_layers = 2;
  cfg.channel_widths = {2, 2};
  cfg.cache_length = 1;
  cfg.group_size = 2;
  cfg.upsample = {true, false};
  cfg.spatial_kernels = {3, 3};
  cfg.pixel_channels = 2;
  cfg.latent_height = 3;
  cfg.latent_width = 3;
  cfg.init_seed = seed;
  return cfg;
}

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(element_count(shape));
  for (double& x : v) x = n(rng);
  return Tensor(shape, std::move(v));
}

struct Instance {
  DecoderParams params;
  std::vector<Tensor> latents;
  Targets targets;
};

/// Random latents and random pixel and latent targets for `groups` groups.
inline Instance random_instance(const DecoderConfig& cfg, std::size_t groups, std::uint64_t seed) {
  Instance inst{init_params(cfg), {}, {}};
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < groups; ++i) {
    inst.latents.push_back(random_tensor(cfg.latent_shape(), rng));
    inst.targets.frames.push_back(random_tensor(cfg.frames_shape(), rng, 0.5));
    inst.targets.latents.push_back(random_tensor(cfg.latent_shape(), rng, 0.5));
  }
  return inst;
}

inline double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 1e-300;
  for (std::size_t k = 0; k < a.size(); ++k) {
    num = std::max(num, std::abs(a[k] - b[k]));
    den = std::max(den, std::abs(b[k]));
  }
  return num / den;
}

inline std::vector<double> flatten_grads(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const Tensor& t : ts) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

}  // namespace chopgrad::testing
