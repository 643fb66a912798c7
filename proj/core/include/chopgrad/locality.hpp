#pragma once

#include <optional>
#include <span>
#include <vector>

#include "chopgrad/decoder.hpp"
#include "chopgrad/loss.hpp"
#include "chopgrad/scheduler.hpp"

namespace chopgrad {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double frobenius() const;
};

struct JacobianOptions {
  std::size_t max_rows = 4096;
  std::size_t max_cols = 4096;
  std::size_t threads = 1;
};

/// d(pixels of group i) / d(latent j), one VJP per pixel of group i. Groups
/// up to max(i, j) are decoded on one tape so a future source is measured,
/// not assumed, to be zero.
Matrix exact_jacobian(std::size_t i, std::size_t j, std::span<const Tensor> latents,
                      const DecoderParams& params, const JacobianOptions& opts = {});

/// Jacobians of group i's pixels with respect to every latent, from one set
/// of VJPs. Entry j is d(pixels_i)/d(z_j).
std::vector<Matrix> sink_jacobians(std::size_t i, std::span<const Tensor> latents,
                                   const DecoderParams& params, const JacobianOptions& opts = {});

/// Frobenius norm of J_{i,j}.
struct InfluenceSample {
  std::size_t source = 0;  // j
  std::size_t sink = 0;    // i
  std::size_t distance = 0;
  double norm = 0.0;
};

InfluenceSample influence(std::size_t i, std::size_t j, std::span<const Tensor> latents,
                          const DecoderParams& params, const JacobianOptions& opts = {});

/// Every (i, j) pair with j <= i, or all pairs when `include_future` is set.
std::vector<InfluenceSample> influence_table(std::span<const Tensor> latents, const DecoderParams& params,
                                             bool include_future = false,
                                             const JacobianOptions& opts = {});

struct DistanceMean {
  std::size_t distance = 0;
  double mean = 0.0;
  std::size_t count = 0;
};

/// Mean sample norm per distance, sorted by distance.
std::vector<DistanceMean> average_by_distance(std::span<const InfluenceSample> samples);

enum class FitKind { UpperEnvelope, LogLeastSquares };

std::string to_string(FitKind k);

/// norm ~ C * exp(-alpha * distance). Zero-valued samples do not enter the fit
/// and are counted in `zero_count`.
struct LocalityFit {
  double C = 0.0;
  double alpha = 0.0;
  FitKind kind = FitKind::UpperEnvelope;
  double r_squared = 0.0;  // log-least-squares only
  std::size_t sample_count = 0;
  std::size_t zero_count = 0;

  double envelope(std::size_t distance) const;
};

/// The envelope kind passes through the leftmost upper-hull vertex (largest
/// value at the smallest distance) and takes the steepest slope that keeps
/// every sample below it. An increasing sequence yields alpha = 0 and
/// C = max value.
LocalityFit fit_locality(std::span<const InfluenceSample> samples, FitKind kind);

/// Smallest D with C * exp(-alpha * D) <= epsilon; nullopt when alpha = 0 and
/// epsilon < C (no finite distance suffices).
std::optional<std::size_t> min_truncation_distance(const LocalityFit& fit, double epsilon);

struct GradErrorRow {
  std::size_t d_trunc = 0;
  double abs_error = 0.0;         // ||full - trunc||_F over all latent gradients
  double rel_error = 0.0;         // abs_error / ||full||_F
  double max_latent_error = 0.0;  // max_j ||full_j - trunc_j||_F
  double bound = 0.0;             // C exp(-alpha D) * sum_i ||dL/dX_i||
  bool bound_holds = false;
};

struct GradErrorReport {
  std::vector<GradErrorRow> rows;  // sorted by d_trunc
  LocalityFit fit;                 // envelope over this instance's influence table
  double seed_norm_sum = 0.0;      // sum_i ||dL/dX_i||_F
  bool monotone = false;           // abs_error non-increasing in d_trunc
  bool all_bounds_hold = false;
};

/// Truncation error against the full-backprop oracle for every depth in
/// `d_list`, with the temporal error bound evaluated per depth.
GradErrorReport grad_error_sweep(std::span<const Tensor> latents, const Targets& targets,
                                 const DecoderParams& params, const LossSpec& loss,
                                 std::vector<std::size_t> d_list, const JacobianOptions& opts = {});

struct ParamGradRow {
  std::size_t d_trunc = 0;
  double normalized_mae = 0.0;  // mean|trunc - full| / mean|full|
  double cosine = 0.0;
};

struct ParamGradComparison {
  std::vector<ParamGradRow> rows;
  std::vector<double> full_mean_grad;
};

/// Dataset-averaged decoder parameter gradients per depth against the
/// averaged full-backprop gradient.
ParamGradComparison param_grad_compare(std::span<const Sample> dataset, const DecoderParams& params,
                                       const LossSpec& loss, std::vector<std::size_t> d_list,
                                       std::size_t threads = 1);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Latent cells zeroed in every group and channel.
struct LatentBlock {
  std::size_t h0 = 0, w0 = 0, height = 0, width = 0;
  bool empty() const { return height == 0 || width == 0; }
};

struct SpatialProbe {
  Tensor diff;                   // |decode(original) - decode(zeroed)|, (C, T, H, W)
  std::vector<bool> may_depend;  // per pixel (h, w): dependency interval meets the block
  double max_outside = 0.0;      // largest diff where may_depend is false
  double max_inside = 0.0;
  std::size_t outside_pixels = 0;
  bool outside_identical = false;  // bit-identical outside the dependency region
};

/// An empty block yields a zero map; a block beyond the latent extent is an error.
SpatialProbe spatial_locality_probe(std::span<const Tensor> latents, const DecoderParams& params,
                                    const LatentBlock& block);

struct DecompositionReport {
  std::vector<double> rel_error;  // per latent j
  double max_rel_error = 0.0;
  std::vector<double> lhs;        // ||dL/dz_j||
  std::vector<double> rhs;        // ||direct_j|| + sum_i ||dL/dX_i|| L_{i<-j}
  bool inequality_holds = false;
};

/// Rebuilds dL/dz_j as sum_i (dL/dX_i) J_{i,j} plus the direct latent-loss
/// term and compares it with the full-backprop gradient.
DecompositionReport verify_decomposition(std::span<const Tensor> latents, const Targets& targets,
                                         const DecoderParams& params, const LossSpec& loss,
                                         const JacobianOptions& opts = {});

}  // namespace chopgrad
