#pragma once

#include <chrono>
#include <cstddef>
#include <string>
#include <vector>

namespace chopgrad {

class Tape;

/// State at the high-water point of one group step (after that step's
/// backward sweeps, before any release).
struct StepSample {
  std::size_t group = 0;
  std::size_t live_segments = 0;
  std::size_t live_bytes = 0;
  double forward_ms = 0.0;
  double backward_ms = 0.0;
  std::size_t backward_steps = 0;  // cumulative
};

/// Activation and timing record of one scheduler run. Memory figures come
/// from tape accounting, never from the allocator.
struct MemoryTimeTrace {
  std::vector<StepSample> samples;
  std::size_t peak_segments = 0;
  std::size_t peak_bytes = 0;
  double forward_ms = 0.0;
  double backward_ms = 0.0;
  std::string policy;

  /// Folds the tape's current live counters into the peaks.
  void observe(const Tape& tape);
  void push_sample(const Tape& tape, std::size_t group, std::size_t steps, double fwd_ms,
                   double bwd_ms);
  void merge_peak(const MemoryTimeTrace& other);
};

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace chopgrad
