#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <random>
#include <string>
#include <vector>

#include "chopgrad/decoder.hpp"
#include "chopgrad/loss.hpp"

namespace chopgrad {

struct CheckResult {
  std::string suite;
  std::string name;
  std::uint64_t seed = 0;
  double value = 0.0;  // relative error
  double tolerance = 0.0;
  bool pass = false;
  double raw_value = 0.0;     // relative error before kink exclusion
  std::size_t checked = 0;    // coordinates compared
  std::size_t excluded = 0;   // coordinates whose stencil crossed a kink
};

/// Central differences that also flag coordinates where the stencil crosses a
/// kink of a piecewise-linear op. There the one-sided differences disagree by
/// twice the central error, so excluding coordinates with
/// |fd+ - fd-| > tolerance * max|reference| leaves at most half the tolerance
/// of kink error in the rest. Only coordinates already over the tolerance
/// are excluded, since smooth curvature trips the same test. A result passes when the remaining error is
/// below tolerance and at most max(1, 1%) of coordinates were excluded.
CheckResult kink_aware_check(std::string suite, std::string name, std::uint64_t seed,
                             const std::function<double(std::span<const double>)>& f, std::vector<double> x,
                             std::span<const double> analytic, double h, double tolerance);

/// Untaped sum of the per-group losses.
double total_loss(std::span<const Tensor> latents, const Targets& targets, const DecoderParams& params,
                  const LossSpec& loss);

/// Full-backprop latent and parameter gradients against kink-aware central
/// differences of total_loss. One row for latents, one for parameters.
std::vector<CheckResult> decoder_fd_check(const DecoderConfig& config, std::size_t groups, const LossSpec& loss,
                                          std::uint64_t seed, double h = 1e-5, double tolerance = 1e-4);

/// Truncated backprop at depth groups - 1 against full backprop, latents and
/// parameters together.
CheckResult oracle_equivalence_check(const DecoderConfig& config, std::size_t groups, const LossSpec& loss,
                                     std::uint64_t seed, double tolerance = 1e-10);

/// Every op's VJP against central differences on random inputs.
std::vector<CheckResult> op_fd_checks(std::uint64_t seed, double h = 1e-5, double tolerance = 1e-4);

/// A random valid decoder with M <= 3 layers and small channel counts.
DecoderConfig random_tiny_config(std::mt19937_64& rng);

}  // namespace chopgrad
