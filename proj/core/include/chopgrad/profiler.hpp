#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "chopgrad/decoder.hpp"
#include "chopgrad/loss.hpp"
#include "chopgrad/report.hpp"
#include "chopgrad/scheduler.hpp"

namespace chopgrad {

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  std::size_t points = 0;
};

/// Ordinary least squares y = slope * x + intercept. Needs two distinct x.
LinearFit linear_fit(std::span<const double> x, std::span<const double> y);

/// Backward traversals of the eager schedule: sum_i (1 + min(D, i)).
std::size_t eager_step_count(std::size_t groups, std::size_t d_trunc);
/// Backward traversals of the deferred schedule with stride s, including the
/// local step per group and the terminal flush.
std::size_t deferred_step_count(std::size_t groups, std::size_t d_trunc, std::size_t stride);
/// min(T, D + 1) for eager, min(T, D + s) for deferred; D is clamped to T - 1.
std::size_t peak_segment_count(std::size_t groups, const TruncationPolicy& policy);

struct StepAudit {
  std::size_t observed_steps = 0;
  std::size_t predicted_steps = 0;
  std::size_t observed_peak_segments = 0;
  std::size_t predicted_peak_segments = 0;
  bool live_law_holds = true;  // eager only: live = min(i + 1, D + 1) at every step
  bool ok() const {
    return observed_steps == predicted_steps && observed_peak_segments == predicted_peak_segments && live_law_holds;
  }
};

/// Compares a completed unchunked run against the closed forms.
StepAudit step_count_audit(const RunResult& run, std::size_t groups, const TruncationPolicy& policy);

struct ProfileRow {
  std::size_t groups = 0;
  std::size_t d_trunc = 0;  // groups - 1 for the full-backprop reference
  std::string mode;         // eager | deferred | full
  std::size_t stride = 1;
  std::size_t peak_bytes = 0;
  std::size_t peak_segments = 0;
  std::size_t backward_steps = 0;
  double forward_ms = 0.0;
  double backward_ms = 0.0;
};

struct ProfileRequest {
  DecoderConfig config;
  TruncationPolicy policy;  // mode, stride and the D used for the flatness ratio
  LossSpec loss;
  std::vector<std::size_t> d_list;
  std::vector<std::size_t> t_list;
  std::size_t full_reference_max_groups = 64;  // skip full backprop above this
  std::uint64_t data_seed = 0;
};

struct ScalingReport {
  std::vector<ProfileRow> rows;       // truncated runs, (T, D) order
  std::vector<ProfileRow> reference;  // full backprop per T where run
  LinearFit memory_vs_d;              // peak bytes at the largest T
  LinearFit time_vs_d;                // forward + backward ms at the largest T
  std::size_t flatness_d = 0;
  double flatness = 0.0;              // peak bytes at max T / at min T
  std::vector<StepAudit> audits;      // one per row
};

/// Random latents and targets for `groups` groups, deterministic in `seed`.
Sample random_sample(const DecoderConfig& config, std::size_t groups, std::uint64_t seed);

ScalingReport profile_sweep(const ProfileRequest& request);

/// Counters only, so reruns are byte-identical.
std::string profile_csv(const ScalingReport& report);
/// Wall-clock columns, which vary between runs.
std::string profile_timing_csv(const ScalingReport& report);
/// Peak memory and time against D at the largest T, with full backprop dashed.
SvgChart memory_chart(const ScalingReport& report);
SvgChart time_chart(const ScalingReport& report);

}  // namespace chopgrad
