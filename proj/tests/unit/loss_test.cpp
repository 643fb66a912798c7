#include <gtest/gtest.h>

#include "chopgrad/finite_difference.hpp"
#include "chopgrad/loss.hpp"
#include "fixtures.hpp"

namespace chopgrad {
namespace {

using testing::random_tensor;

double eval_loss(const Tensor& frames, const Tensor& target, const LossSpec& spec) {
  const Tensor z({1, 1, frames.dim(2), frames.dim(3)});
  return group_loss(Recorder(), frames, z, target, nullptr, spec, LossRegion::whole(z), 1).item();
}

TEST(Loss, MseAndMaeValues) {
  const Tensor a({1, 1, 1, 2}, {1.0, 3.0}), b({1, 1, 1, 2}, {0.0, 1.0});
  EXPECT_DOUBLE_EQ(eval_loss(a, b, {PixelLoss::Mse, 1.0, 0.0}), 2.5);
  EXPECT_DOUBLE_EQ(eval_loss(a, b, {PixelLoss::Mae, 2.0, 0.0}), 3.0);
}

TEST(Loss, MultiscaleGradientValue) {
  // Independent evaluation: mean squared spatial differences at steps 1, 2.
  std::mt19937_64 rng(3);
  const Tensor p = random_tensor({2, 2, 4, 5}, rng), t = random_tensor({2, 2, 4, 5}, rng);
  double total = 0.0;
  for (std::size_t step : {1u, 2u})
    for (int axis : {2, 3}) {
      double acc = 0.0;
      std::size_t n = 0;
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t f = 0; f < 2; ++f)
          for (std::size_t y = 0; y + (axis == 2 ? step : 0) < 4; ++y)
            for (std::size_t x = 0; x + (axis == 3 ? step : 0) < 5; ++x) {
              const std::size_t y2 = y + (axis == 2 ? step : 0), x2 = x + (axis == 3 ? step : 0);
              const double d = (p.at(c, f, y2, x2) - p.at(c, f, y, x)) - (t.at(c, f, y2, x2) - t.at(c, f, y, x));
              acc += d * d;
              ++n;
            }
      total += acc / static_cast<double>(n);
    }
  EXPECT_NEAR(eval_loss(p, t, {PixelLoss::MultiscaleGradient, 1.0, 0.0}), 0.25 * total, 1e-12);
}

TEST(Loss, PixelCotangentMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const Tensor p = random_tensor({2, 2, 4, 4}, rng), t = random_tensor({2, 2, 4, 4}, rng);
  for (PixelLoss kind : {PixelLoss::Mse, PixelLoss::Mae, PixelLoss::MultiscaleGradient}) {
    const LossSpec spec{kind, 3.0, 0.0};
    const auto f = [&](const Tensor& x) { return Tensor::scalar(eval_loss(x, t, spec)); };
    EXPECT_LT(relative_error(pixel_cotangent(p, t, spec), finite_difference_grad(f, p)), 1e-4) << to_string(kind);
  }
}

TEST(Loss, ZeroWeightTermIsSkipped) {
  const Tensor z({1, 1, 2, 2}, 1.0);
  // A pixel target of the wrong shape would throw if the pixel term ran.
  const LossSpec latent_only{PixelLoss::Mse, 0.0, 1.0};
  const Tensor zt({1, 1, 2, 2}, 0.0);
  EXPECT_DOUBLE_EQ(group_loss(Recorder(), Tensor({1, 1, 2, 2}), z, Tensor(), &zt, latent_only,
                              LossRegion::whole(z), 1).item(),
                   1.0);
}

TEST(Loss, Validation) {
  EXPECT_THROW((LossSpec{PixelLoss::Mse, 0.0, 0.0}.validate()), Error);
  EXPECT_THROW((LossSpec{PixelLoss::Mse, -1.0, 1.0}.validate()), Error);
  EXPECT_THROW(pixel_loss_from_string("lpips"), Error);
  EXPECT_EQ(pixel_loss_from_string(to_string(PixelLoss::MultiscaleGradient)), PixelLoss::MultiscaleGradient);
}

}  // namespace
}  // namespace chopgrad
