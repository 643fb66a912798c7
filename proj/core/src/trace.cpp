#include "chopgrad/trace.hpp"

#include <algorithm>

#include "chopgrad/tape.hpp"

namespace chopgrad {

void MemoryTimeTrace::observe(const Tape& tape) {
  peak_segments = std::max(peak_segments, tape.live_segments());
  peak_bytes = std::max(peak_bytes, tape.live_activation_bytes());
}

void MemoryTimeTrace::push_sample(const Tape& tape, std::size_t group, std::size_t steps,
                                  double fwd_ms, double bwd_ms) {
  StepSample s;
  s.group = group;
  s.live_segments = tape.live_segments();
  s.live_bytes = tape.live_activation_bytes();
  s.forward_ms = fwd_ms;
  s.backward_ms = bwd_ms;
  s.backward_steps = steps;
  samples.push_back(s);
  observe(tape);
}

void MemoryTimeTrace::merge_peak(const MemoryTimeTrace& other) {
  peak_segments = std::max(peak_segments, other.peak_segments);
  peak_bytes = std::max(peak_bytes, other.peak_bytes);
}

}  // namespace chopgrad
