#include <gtest/gtest.h>

#include "chopgrad/decoder.hpp"
#include "fixtures.hpp"

namespace chopgrad {
namespace {

using testing::random_tensor;

std::vector<FrameGroupLatent> random_latents(const DecoderConfig& cfg, std::size_t groups, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<FrameGroupLatent> out;
  for (std::size_t i = 0; i < groups; ++i) out.push_back({i, random_tensor(cfg.latent_shape(), rng)});
  return out;
}

/// Largest singular value by power iteration on A^T A.
double power_norm(const std::vector<double>& a, std::size_t rows, std::size_t cols) {
  std::vector<double> v(cols, 1.0), u(rows);
  double sigma = 0.0;
  for (int it = 0; it < 2000; ++it) {
    for (std::size_t r = 0; r < rows; ++r) {
      u[r] = 0.0;
      for (std::size_t c = 0; c < cols; ++c) u[r] += a[r * cols + c] * v[c];
    }
    double n = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      v[c] = 0.0;
      for (std::size_t r = 0; r < rows; ++r) v[c] += a[r * cols + c] * u[r];
      n += v[c] * v[c];
    }
    n = std::sqrt(n);
    if (n == 0.0) return 0.0;
    for (double& x : v) x /= n;
    sigma = std::sqrt(n);
  }
  return sigma;
}

/// Sum over the selected taps of each tap's spectral norm.
double tap_gain(const Tensor& k, std::size_t t_begin, std::size_t t_end) {
  const std::size_t co = k.dim(0), ci = k.dim(1), kt = k.dim(2), kh = k.dim(3), kw = k.dim(4);
  double total = 0.0;
  for (std::size_t t = t_begin; t < t_end; ++t)
    for (std::size_t y = 0; y < kh; ++y)
      for (std::size_t x = 0; x < kw; ++x) {
        std::vector<double> a(co * ci);
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t i = 0; i < ci; ++i) a[o * ci + i] = k[(((o * ci + i) * kt + t) * kh + y) * kw + x];
        total += power_norm(a, co, ci);
      }
  return total;
}

TEST(Decoder, ShapeExample) {
  DecoderConfig cfg;
  cfg.channel_widths = {4, 4};
  cfg.latent_height = cfg.latent_width = 4;
  const auto params = init_params(cfg);
  const auto lat = random_latents(cfg, 1, 1);
  const DecodeStep step = decode_step(lat[0], CacheState::zeros(cfg), params);
  EXPECT_EQ(step.frames.shape(), (Shape{3, 4, 8, 8}));
}

TEST(Decoder, SameSeedSameParams) {
  const DecoderConfig cfg = testing::tiny_config(5);
  EXPECT_EQ(init_params(cfg).flatten(), init_params(cfg).flatten());
}

TEST(Decoder, FlattenRoundTrip) {
  const DecoderConfig cfg = testing::tiny_config(6);
  const auto p = init_params(cfg);
  const auto flat = p.flatten();
  EXPECT_EQ(flat.size(), p.parameter_count());
  EXPECT_EQ(DecoderParams::unflatten(cfg, flat).flatten(), flat);
  EXPECT_THROW(DecoderParams::unflatten(cfg, std::vector<double>(flat.size() - 1)), Error);
}

TEST(Decoder, InitGainBoundsCachePath) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    DecoderConfig cfg = testing::tiny_config(seed);
    cfg.num_layers = 3;
    cfg.channel_widths = {3, 4, 2};
    cfg.upsample = {true, false, false};
    cfg.spatial_kernels = {3, 1, 3};
    cfg.cache_length = 2;
    const auto params = init_params(cfg);
    for (const LayerParams& layer : params.layers) {
      const double oracle = tap_gain(layer.kernel, 0, cfg.cache_length);
      EXPECT_LE(oracle, 0.7 + 1e-9);
      EXPECT_NEAR(oracle, cache_path_gain(layer.kernel, cfg.cache_length), 1e-8);
      EXPECT_NEAR(tap_gain(layer.kernel, cfg.cache_length, cfg.cache_length + 1),
                  current_path_gain(layer.kernel, cfg.cache_length), 1e-8);
    }
  }
}

TEST(Decoder, ZeroGainGivesInputIndependentOutput) {
  DecoderConfig cfg = testing::tiny_config(2);
  cfg.init_gain = 0.0;
  const auto params = init_params(cfg);
  for (const LayerParams& l : params.layers) EXPECT_EQ(max_abs(l.kernel), 0.0);
  const Tensor a = decode_video(random_latents(cfg, 2, 1), params);
  const Tensor b = decode_video(random_latents(cfg, 2, 2), params);
  EXPECT_EQ(a.storage(), b.storage());
}

TEST(Decoder, ZeroEverythingGivesZeroFramesAndCache) {
  DecoderConfig cfg = testing::tiny_config(2);
  cfg.init_gain = 0.0;
  auto params = init_params(cfg);
  for (Tensor* t : params.tensors()) std::fill(t->values().begin(), t->values().end(), 0.0);
  const DecodeStep step = decode_step({0, Tensor(cfg.latent_shape())}, CacheState::zeros(cfg), params);
  EXPECT_EQ(max_abs(step.frames), 0.0);
  for (const Tensor& c : step.cache.layers) EXPECT_EQ(max_abs(c), 0.0);
}

TEST(Decoder, StreamingMatchesMonolithic) {
  std::uint64_t seed = 100;
  for (std::size_t M : {1u, 2u, 3u})
    for (std::size_t N : {1u, 2u})
      for (std::size_t G : {2u, 4u})
        for (std::size_t groups : {1u, 3u, 6u}) {
          DecoderConfig cfg;
          cfg.num_layers = M;
          cfg.channel_widths.assign(M, 2);
          cfg.channel_widths[0] = 3;
          cfg.upsample.assign(M, false);
          cfg.upsample[0] = true;
          cfg.spatial_kernels.assign(M, 3);
          cfg.cache_length = N;
          cfg.group_size = G;
          cfg.latent_height = 3;
          cfg.latent_width = 4;
          cfg.init_seed = ++seed;
          const auto params = init_params(cfg);
          const auto lat = random_latents(cfg, groups, seed);
          const Tensor s = decode_video(lat, params);
          const Tensor m = decode_monolithic(lat, params);
          ASSERT_EQ(s.shape(), m.shape());
          EXPECT_EQ(s.dim(1), G * groups);
          EXPECT_LT(max_abs_diff(s, m), 1e-10) << "M=" << M << " N=" << N << " G=" << G;
        }
}

TEST(Decoder, Causality) {
  const DecoderConfig cfg = testing::tiny_config(3);
  const auto params = init_params(cfg);
  auto lat = random_latents(cfg, 4, 1);
  const Tensor before = decode_video(lat, params);
  std::mt19937_64 rng(99);
  lat[2].data = random_tensor(cfg.latent_shape(), rng);
  const Tensor after = decode_video(lat, params);
  const std::size_t g = cfg.frames_per_group();
  for (std::size_t c = 0; c < before.dim(0); ++c)
    for (std::size_t t = 0; t < 2 * g; ++t)
      for (std::size_t y = 0; y < before.dim(2); ++y)
        for (std::size_t x = 0; x < before.dim(3); ++x) ASSERT_EQ(before.at(c, t, y, x), after.at(c, t, y, x));
  EXPECT_GT(max_abs_diff(before, after), 0.0);
}

TEST(Decoder, CacheHoldsTrailingInputSlices) {
  DecoderConfig cfg = testing::tiny_config(4);
  cfg.cache_length = 2;
  const auto params = init_params(cfg);
  const auto lat = random_latents(cfg, 2, 3);
  const DecodeStep s0 = decode_step(lat[0], CacheState::zeros(cfg), params);
  const DecodeStep s1 = decode_step(lat[1], s0.cache, params);
  const Recorder eval;
  const Tensor expected = eval.slice_time(eval.concat_time(s0.cache.layers[0], lat[1].data), 1, 2);
  EXPECT_EQ(s1.cache.layers[0].storage(), expected.storage());
  for (std::size_t m = 0; m < cfg.num_layers; ++m) {
    const Tensor& c = s1.cache.layers[m];
    EXPECT_EQ(c.dim(0), cfg.channel_widths[m]);
    EXPECT_EQ(c.dim(1), 2u);
  }
}

TEST(Decoder, CacheShapeMismatchThrows) {
  const DecoderConfig cfg = testing::tiny_config(4);
  const auto params = init_params(cfg);
  CacheState bad = CacheState::zeros(cfg);
  bad.layers[1] = Tensor({1, 1, 1, 1});
  EXPECT_THROW(decode_step(random_latents(cfg, 1, 1)[0], bad, params), ShapeError);
}

TEST(Decoder, DecodeVideoRejectsGaps) {
  const DecoderConfig cfg = testing::tiny_config(4);
  auto lat = random_latents(cfg, 2, 1);
  lat[1].group_index = 3;
  EXPECT_THROW(decode_video(lat, init_params(cfg)), Error);
}

TEST(Decoder, SingleGroupVideoEqualsStep) {
  const DecoderConfig cfg = testing::tiny_config(4);
  const auto params = init_params(cfg);
  const auto lat = random_latents(cfg, 1, 1);
  EXPECT_EQ(decode_video(lat, params).storage(), decode_step(lat[0], CacheState::zeros(cfg), params).frames.storage());
}

TEST(Decoder, ConfigValidation) {
  DecoderConfig cfg;
  cfg.cache_length = 0;
  EXPECT_THROW(cfg.validate(), ShapeError);
  cfg = DecoderConfig{};
  cfg.spatial_kernels = {2, 3};
  EXPECT_THROW(cfg.validate(), ShapeError);
  cfg = DecoderConfig{};
  cfg.channel_widths = {4};
  EXPECT_THROW(cfg.validate(), ShapeError);
}

/// Pixel rows touched by a latent row interval, propagated forward.
std::pair<long, long> affected_rows(const DecoderConfig& cfg, long lo, long hi) {
  for (std::size_t m = 0; m < cfg.num_layers; ++m) {
    const long r = static_cast<long>(cfg.spatial_kernels[m] / 2);
    lo -= r;
    hi += r;
    if (cfg.upsample[m]) {
      lo *= 2;
      hi = 2 * hi + 1;
    }
  }
  return {lo, hi};
}

TEST(Decoder, DependencyMatchesForwardRadius) {
  DecoderConfig cfg = testing::tiny_config(1);
  cfg.num_layers = 3;
  cfg.channel_widths = {2, 2, 2};
  cfg.upsample = {true, false, true};
  cfg.spatial_kernels = {3, 5, 3};
  for (long cell = 0; cell < 6; ++cell) {
    const auto [plo, phi] = affected_rows(cfg, cell, cell);
    for (long p = plo - 3; p <= phi + 3; ++p) {
      const CellRange r = latent_dependency(cfg, p, p);
      const bool depends = r.lo <= cell && cell <= r.hi;
      EXPECT_EQ(depends, plo <= p && p <= phi) << "cell " << cell << " pixel " << p;
    }
  }
  EXPECT_EQ(receptive_halo(testing::tiny_config(1)), 2u);
}

TEST(Encoder, ConstantVideoGivesConstantLatents) {
  const DecoderConfig cfg = testing::tiny_config(1);
  const ToyEncoder enc(cfg, 3);
  Tensor video({cfg.pixel_channels, 3 * cfg.group_size, 6, 6}, 0.25);
  const auto lat = enc.encode(video);
  ASSERT_EQ(lat.size(), 3u);
  for (const auto& l : lat)
    for (std::size_t c = 0; c < l.data.dim(0); ++c)
      for (std::size_t y = 0; y < l.data.dim(2); ++y)
        for (std::size_t x = 0; x < l.data.dim(3); ++x) EXPECT_DOUBLE_EQ(l.data.at(c, 0, y, x), lat[0].data.at(c, 0, 0, 0));
}

TEST(Encoder, GroupCountAndDivisibility) {
  DecoderConfig cfg;
  cfg.latent_height = cfg.latent_width = 4;
  const ToyEncoder enc(cfg, 1);
  EXPECT_EQ(enc.encode(Tensor({3, 20, 8, 8})).size(), 5u);
  EXPECT_THROW(enc.encode(Tensor({3, 19, 8, 8})), ShapeError);
}

TEST(Encoder, ZeroVideoRoundTripsToZeroFrames) {
  DecoderConfig cfg = testing::tiny_config(1);
  cfg.init_gain = 0.0;
  auto params = init_params(cfg);
  for (Tensor* t : params.tensors()) std::fill(t->values().begin(), t->values().end(), 0.0);
  const auto lat = ToyEncoder(cfg, 2).encode(Tensor({2, 4, 6, 6}));
  EXPECT_EQ(max_abs(decode_video(lat, params)), 0.0);
}

TEST(Groups, SplitJoinRoundTrip) {
  std::mt19937_64 rng(1);
  const Tensor v = random_tensor({2, 6, 3, 3}, rng);
  const auto parts = split_groups(v, 2);
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(join_groups(parts).storage(), v.storage());
}

}  // namespace
}  // namespace chopgrad
