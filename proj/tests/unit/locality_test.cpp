#include <gtest/gtest.h>

#include "chopgrad/finite_difference.hpp"
#include "chopgrad/locality.hpp"
#include "fixtures.hpp"

namespace chopgrad {
namespace {

using testing::random_instance;
using testing::random_tensor;
using testing::tiny_config;

DecoderParams identity_decoder(std::size_t channels, std::size_t h, std::size_t w) {
  DecoderConfig cfg;
  cfg.num_layers = 1;
  cfg.channel_widths = {channels};
  cfg.pixel_channels = channels;
  cfg.spatial_kernels = {1};
  cfg.upsample = {false};
  cfg.activation = Activation::Identity;
  cfg.group_size = 1;
  cfg.latent_height = h;
  cfg.latent_width = w;
  DecoderParams p = init_params(cfg);
  for (Tensor* t : p.tensors()) std::fill(t->values().begin(), t->values().end(), 0.0);
  Tensor& k = p.layers[0].kernel;
  for (std::size_t c = 0; c < channels; ++c) k[((c * channels + c) * 2 + 1)] = 1.0;
  for (std::size_t c = 0; c < channels; ++c) p.expand_weight[c * channels + c] = 1.0;
  return p;
}

TEST(Jacobian, IdentityDecoderGivesIdentity) {
  const DecoderParams p = identity_decoder(2, 2, 3);
  std::mt19937_64 rng(1);
  const std::vector<Tensor> lat{random_tensor(p.config.latent_shape(), rng), random_tensor(p.config.latent_shape(), rng)};
  const Matrix J = exact_jacobian(1, 1, lat, p);
  ASSERT_EQ(J.rows, 12u);
  ASSERT_EQ(J.cols, 12u);
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 12; ++c) EXPECT_EQ(J(r, c), r == c ? 1.0 : 0.0);
  EXPECT_DOUBLE_EQ(influence(1, 1, lat, p).norm, std::sqrt(12.0));
  EXPECT_EQ(influence(1, 0, lat, p).norm, 0.0);
}

TEST(Jacobian, FutureSourceIsZero) {
  const auto inst = random_instance(tiny_config(2), 4, 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) EXPECT_EQ(influence(i, j, inst.latents, inst.params).norm, 0.0);
}

TEST(Jacobian, ZeroKernelsHaveNoCrossGroupInfluence) {
  DecoderConfig cfg = tiny_config(2);
  cfg.init_gain = 0.0;
  const auto inst = random_instance(cfg, 3, 3);
  EXPECT_EQ(influence(2, 1, inst.latents, inst.params).norm, 0.0);
}

TEST(Jacobian, MatchesFiniteDifferenceColumns) {
  const auto cfg = tiny_config(4);
  const auto inst = random_instance(cfg, 3, 5);
  for (std::size_t j = 0; j < 3; ++j) {
    const Matrix J = exact_jacobian(2, j, inst.latents, inst.params);
    for (std::size_t col = 0; col < J.cols; col += 5) {
      const auto frames_of = [&](double shift) {
        std::vector<FrameGroupLatent> lat;
        for (std::size_t g = 0; g < 3; ++g) lat.push_back({g, inst.latents[g]});
        lat[j].data[col] += shift;
        return split_groups(decode_video(lat, inst.params), cfg.frames_per_group())[2];
      };
      const double h = 1e-5;
      const Tensor hi = frames_of(h), lo = frames_of(-h);
      std::vector<double> fd(J.rows), an(J.rows);
      for (std::size_t r = 0; r < J.rows; ++r) {
        fd[r] = (hi[r] - lo[r]) / (2 * h);
        an[r] = J(r, col);
      }
      EXPECT_LT(relative_error(an, fd), 1e-4) << "j=" << j << " col=" << col;
    }
  }
}

TEST(Jacobian, ThreadedEqualsSerial) {
  const auto inst = random_instance(tiny_config(4), 3, 5);
  JacobianOptions threaded;
  threaded.threads = 3;
  EXPECT_EQ(exact_jacobian(2, 0, inst.latents, inst.params).data,
            exact_jacobian(2, 0, inst.latents, inst.params, threaded).data);
}

TEST(Jacobian, SizeGuard) {
  const auto inst = random_instance(tiny_config(4), 2, 5);
  JacobianOptions small;
  small.max_rows = 10;
  EXPECT_THROW(exact_jacobian(1, 0, inst.latents, inst.params, small), Error);
}

TEST(Jacobian, InfluenceDecaysOnAverage) {
  DecoderConfig cfg = tiny_config(0);
  cfg.cache_length = 2;
  std::vector<InfluenceSample> all;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    cfg.init_seed = seed;
    const auto inst = random_instance(cfg, 5, seed + 50);
    const auto table = influence_table(inst.latents, inst.params);
    all.insert(all.end(), table.begin(), table.end());
  }
  const auto means = average_by_distance(all);
  ASSERT_EQ(means.size(), 5u);
  for (std::size_t d = 1; d < means.size(); ++d) EXPECT_LE(means[d].mean, means[d - 1].mean) << d;
}

std::vector<InfluenceSample> on_curve(double C, double alpha, std::size_t n) {
  std::vector<InfluenceSample> s;
  for (std::size_t d = 0; d < n; ++d) s.push_back({0, d, d, C * std::exp(-alpha * static_cast<double>(d))});
  return s;
}

TEST(Fit, ExactRecovery) {
  const auto s = on_curve(2.0, 0.5, 6);
  for (FitKind kind : {FitKind::UpperEnvelope, FitKind::LogLeastSquares}) {
    const LocalityFit f = fit_locality(s, kind);
    EXPECT_NEAR(f.C, 2.0, 1e-12);
    EXPECT_NEAR(f.alpha, 0.5, 1e-12);
  }
  EXPECT_NEAR(fit_locality(s, FitKind::LogLeastSquares).r_squared, 1.0, 1e-12);
}

TEST(Fit, ConstantSamples) {
  std::vector<InfluenceSample> s;
  for (std::size_t d = 0; d < 4; ++d) s.push_back({0, d, d, 3.5});
  const LocalityFit f = fit_locality(s, FitKind::UpperEnvelope);
  EXPECT_EQ(f.alpha, 0.0);
  EXPECT_DOUBLE_EQ(f.C, 3.5);
}

TEST(Fit, EnvelopeDominatesNoisySamples) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.2, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<InfluenceSample> s;
    for (std::size_t d = 0; d < 8; ++d)
      for (int rep = 0; rep < 3; ++rep) s.push_back({0, d, d, 5.0 * std::exp(-0.7 * d) * u(rng)});
    s.push_back({0, 9, 9, 0.0});
    const LocalityFit f = fit_locality(s, FitKind::UpperEnvelope);
    EXPECT_EQ(f.zero_count, 1u);
    for (const auto& x : s) EXPECT_LE(x.norm, f.envelope(x.distance) * (1 + 1e-9));
  }
}

TEST(Fit, IncreasingSamplesClampToFlat) {
  std::vector<InfluenceSample> s{{0, 0, 0, 1.0}, {0, 1, 1, 2.0}, {0, 2, 2, 1.5}};
  const LocalityFit f = fit_locality(s, FitKind::UpperEnvelope);
  EXPECT_EQ(f.alpha, 0.0);
  EXPECT_EQ(f.C, 2.0);
}

TEST(Fit, NeedsTwoDistances) {
  std::vector<InfluenceSample> s{{0, 1, 1, 1.0}, {1, 2, 1, 2.0}};
  EXPECT_THROW(fit_locality(s, FitKind::UpperEnvelope), Error);
  EXPECT_THROW(fit_locality(s, FitKind::LogLeastSquares), Error);
}

TEST(TruncationDistance, Formula) {
  LocalityFit f;
  f.C = 10.0;
  f.alpha = 1.0;
  EXPECT_EQ(min_truncation_distance(f, 0.1), 5u);
  EXPECT_EQ(min_truncation_distance(f, 10.0), 0u);
  EXPECT_EQ(min_truncation_distance(f, 50.0), 0u);
  f.C = 2.0;
  f.alpha = 0.5;
  EXPECT_EQ(min_truncation_distance(f, 0.01), 11u);
  f.alpha = 0.0;
  EXPECT_FALSE(min_truncation_distance(f, 0.01).has_value());
  EXPECT_EQ(min_truncation_distance(f, 3.0), 0u);
}

TEST(GradError, SweepProperties) {
  DecoderConfig cfg = tiny_config(3);
  cfg.cache_length = 2;
  const auto inst = random_instance(cfg, 5, 8);
  const GradErrorReport r =
      grad_error_sweep(inst.latents, inst.targets, inst.params, {PixelLoss::Mse, 1.0, 0.0}, {4, 0, 2, 1, 3});
  ASSERT_EQ(r.rows.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(r.rows[k].d_trunc, k);
  EXPECT_LT(r.rows.back().abs_error, 1e-10);
  EXPECT_TRUE(r.monotone);
  EXPECT_TRUE(r.all_bounds_hold);
  EXPECT_GT(r.rows.front().abs_error, 0.0);
}

TEST(ParamGrad, CompareProperties) {
  DecoderConfig cfg = tiny_config(3);
  std::vector<Sample> data;
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto inst = random_instance(cfg, 4, s + 10);
    data.push_back({inst.latents, inst.targets});
  }
  const DecoderParams params = init_params(cfg);
  const auto cmp = param_grad_compare(data, params, {PixelLoss::Mse, 1.0, 0.0}, {0, 1, 2, 3});
  ASSERT_EQ(cmp.rows.size(), 4u);
  EXPECT_LT(cmp.rows[3].normalized_mae, 1e-10);
  EXPECT_GT(cmp.rows[3].cosine, 1 - 1e-12);
  EXPECT_GT(cmp.rows[0].normalized_mae, cmp.rows[2].normalized_mae);
  for (const auto& row : cmp.rows) {
    EXPECT_GE(row.cosine, -1.0);
    EXPECT_LE(row.cosine, 1.0);
  }
  const auto threaded = param_grad_compare(data, params, {PixelLoss::Mse, 1.0, 0.0}, {0, 1, 2, 3}, 3);
  EXPECT_EQ(threaded.rows[0].normalized_mae, cmp.rows[0].normalized_mae);
  EXPECT_THROW(param_grad_compare({}, params, {}, {0}), Error);
}

TEST(SpatialProbe, BottomHalfLeavesTopRowsExact) {
  DecoderConfig cfg = tiny_config(2);
  cfg.latent_height = cfg.latent_width = 8;
  const auto inst = random_instance(cfg, 3, 1);
  const SpatialProbe p = spatial_locality_probe(inst.latents, inst.params, {4, 0, 4, 8});
  EXPECT_TRUE(p.outside_identical);
  EXPECT_GT(p.max_inside, 0.0);
  // Radius from the kernel schedule: 3x3 then x2 then 3x3 reaches
  // 2*(4-1) - 1 = 5 pixels; rows 0..4 must be unchanged.
  for (std::size_t c = 0; c < p.diff.dim(0); ++c)
    for (std::size_t t = 0; t < p.diff.dim(1); ++t)
      for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < p.diff.dim(3); ++x) EXPECT_EQ(p.diff.at(c, t, y, x), 0.0);
  EXPECT_GT(p.outside_pixels, 0u);
}

TEST(SpatialProbe, EmptyAndWholeBlocks) {
  const auto inst = random_instance(tiny_config(2), 2, 1);
  const SpatialProbe none = spatial_locality_probe(inst.latents, inst.params, {0, 0, 0, 3});
  EXPECT_EQ(max_abs(none.diff), 0.0);
  const SpatialProbe all = spatial_locality_probe(inst.latents, inst.params, {0, 0, 3, 3});
  EXPECT_EQ(all.outside_pixels, 0u);
  EXPECT_GT(all.max_inside, 0.0);
  EXPECT_THROW(spatial_locality_probe(inst.latents, inst.params, {2, 0, 2, 1}), Error);
}

TEST(Decomposition, ReconstructsOracle) {
  const auto inst = random_instance(tiny_config(6), 4, 2);
  const auto rep = verify_decomposition(inst.latents, inst.targets, inst.params, {PixelLoss::Mse, 1.0, 0.5});
  EXPECT_LT(rep.max_rel_error, 1e-8);
  EXPECT_TRUE(rep.inequality_holds);
  const Targets first{{inst.targets.frames[0]}, {inst.targets.latents[0]}};
  const auto single = verify_decomposition(std::span<const Tensor>(inst.latents.data(), 1), first, inst.params,
                                           {PixelLoss::Mae, 1.0, 0.0});
  EXPECT_LT(single.max_rel_error, 1e-10);
}

}  // namespace
}  // namespace chopgrad
