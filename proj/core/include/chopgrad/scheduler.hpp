#pragma once

#include <string>
#include <utility>
#include <vector>

#include "chopgrad/decoder.hpp"
#include "chopgrad/loss.hpp"
#include "chopgrad/trace.hpp"

namespace chopgrad {

enum class EvictionMode { Eager, Deferred };
enum class HaloMode { Full, None };

std::string to_string(EvictionMode m);
EvictionMode eviction_mode_from_string(const std::string& s);
std::string to_string(HaloMode m);
HaloMode halo_mode_from_string(const std::string& s);

/// How far loss gradients may travel back through the cache, and how
/// segments are evicted. Distances are in frame groups. A truncation distance
/// beyond the last group behaves as full backpropagation.
struct TruncationPolicy {
  std::size_t d_trunc = 1;
  EvictionMode mode = EvictionMode::Eager;
  std::size_t stride = 1;  // deferred mode: groups released per eviction
  std::size_t chunk_rows = 1;
  std::size_t chunk_cols = 1;
  HaloMode halo = HaloMode::Full;

  void validate() const;
  std::size_t effective_depth(std::size_t groups) const;
  std::string describe() const;
};

struct GradResult {
  std::vector<Tensor> latent_grads;  // one per group
  std::vector<double> param_grad;    // DecoderParams::tensors() order
  double loss = 0.0;
  std::size_t backward_steps = 0;    // per-segment backward traversals
};

struct RunResult {
  GradResult grads;
  MemoryTimeTrace trace;
};

/// Oracle: one tape over every group with the cache never detached.
/// Reports one backward step per group.
RunResult run_full_backprop(std::span<const Tensor> latents, const Targets& targets,
                            const DecoderParams& params, const LossSpec& loss);

/// Eager truncated backpropagation. Each group decodes in a fresh segment with
/// a detached cache; its loss is backpropagated locally and then carried
/// `d_trunc` segments back through the cache before the oldest segment is
/// released.
RunResult run_truncated_backprop(std::span<const Tensor> latents, const Targets& targets,
                                 const DecoderParams& params, const LossSpec& loss,
                                 const TruncationPolicy& policy);

/// Deferred eviction. Local backward still runs per group, but cache
/// cotangents are only carried back when segments have to be evicted,
/// `stride` at a time. Gradients equal the eager schedule.
RunResult run_deferred(std::span<const Tensor> latents, const Targets& targets,
                       const DecoderParams& params, const LossSpec& loss,
                       const TruncationPolicy& policy);

/// Runs each spatial latent chunk (with its halo) through the scheduler
/// selected by `policy.mode` and sums the contributions. With a full halo the
/// result equals the unchunked run.
RunResult spatial_chunk_backward(std::span<const Tensor> latents, const Targets& targets,
                                 const DecoderParams& params, const LossSpec& loss,
                                 const TruncationPolicy& policy);

/// Dispatches on policy mode and chunk grid.
RunResult run_chopgrad(std::span<const Tensor> latents, const Targets& targets,
                       const DecoderParams& params, const LossSpec& loss,
                       const TruncationPolicy& policy);

std::vector<Tensor> latent_data(std::span<const FrameGroupLatent> latents);

}  // namespace chopgrad
