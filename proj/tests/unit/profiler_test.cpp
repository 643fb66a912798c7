#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "chopgrad/profiler.hpp"
#include "fixtures.hpp"

namespace chopgrad {
namespace {

using testing::random_instance;
using testing::tiny_config;

/// Tensor-free replay of the deferred schedule: count segments traversed.
/// A loss at group i needs segments i-1 down to max(0, i-D); a sweep visits
/// every segment that some pending loss still needs, once.
std::size_t simulate_deferred(std::size_t T, std::size_t D, std::size_t s) {
  D = std::min(D, T - 1);
  std::size_t steps = 0, live = 0;
  std::vector<std::pair<std::size_t, std::size_t>> pending;  // [lo, hi] segment ranges
  const auto sweep = [&] {
    std::set<std::size_t> touched;
    for (auto [lo, hi] : pending)
      for (std::size_t g = lo; g <= hi; ++g) touched.insert(g);
    steps += touched.size();
    pending.clear();
  };
  for (std::size_t i = 0; i < T; ++i) {
    ++live;
    ++steps;
    if (i > 0 && D > 0) pending.push_back({i - std::min(i, D), i - 1});
    if (live == D + s) {
      sweep();
      live -= s;
    }
  }
  sweep();
  return steps;
}

TEST(Profiler, EagerClosedForm) {
  EXPECT_EQ(eager_step_count(10, 2), 27u);
  EXPECT_EQ(eager_step_count(10, 0), 10u);
  EXPECT_EQ(eager_step_count(20, 15), 200u);
}

TEST(Profiler, DeferredClosedFormMatchesSimulation) {
  for (std::size_t T = 1; T <= 24; ++T)
    for (std::size_t D = 0; D < T + 2; ++D)
      for (std::size_t s = 1; s <= 5; ++s)
        ASSERT_EQ(deferred_step_count(T, D, s), simulate_deferred(T, D, s)) << T << ' ' << D << ' ' << s;
  EXPECT_EQ(deferred_step_count(10, 0, 1), 10u);
  EXPECT_EQ(deferred_step_count(10, 2, 1), 10u + 2u * 8u);
  EXPECT_EQ(deferred_step_count(20, 15, 1), 95u);
}

TEST(Profiler, AuditMatchesRuns) {
  const auto inst = random_instance(tiny_config(1), 10, 3);
  const LossSpec loss{PixelLoss::Mse, 1.0, 0.0};
  for (EvictionMode mode : {EvictionMode::Eager, EvictionMode::Deferred})
    for (std::size_t d : {0u, 1u, 2u, 5u, 9u})
      for (std::size_t s : {1u, 2u, 4u}) {
        if (mode == EvictionMode::Eager && s > 1) continue;
        TruncationPolicy p;
        p.d_trunc = d;
        p.mode = mode;
        p.stride = s;
        const StepAudit a = step_count_audit(run_chopgrad(inst.latents, inst.targets, inst.params, loss, p), 10, p);
        EXPECT_TRUE(a.ok()) << p.describe() << " steps " << a.observed_steps << " vs " << a.predicted_steps
                            << " peak " << a.observed_peak_segments << " vs " << a.predicted_peak_segments;
      }
}

TEST(Profiler, StrideTradeoff) {
  TruncationPolicy s1, s4;
  s1.mode = s4.mode = EvictionMode::Deferred;
  s1.d_trunc = s4.d_trunc = 30;
  s4.stride = 4;
  EXPECT_EQ(peak_segment_count(200, s4), 34u);
  const double ratio = static_cast<double>(deferred_step_count(200, 30, 1) - 200) /
                       static_cast<double>(deferred_step_count(200, 30, 4) - 200);
  EXPECT_GT(ratio, 3.0);
}

TEST(Profiler, LinearFit) {
  const std::vector<double> x{0, 1, 2, 3}, y{1, 3, 5, 7};
  const LinearFit f = linear_fit(x, y);
  EXPECT_DOUBLE_EQ(f.slope, 2.0);
  EXPECT_DOUBLE_EQ(f.intercept, 1.0);
  EXPECT_DOUBLE_EQ(f.r_squared, 1.0);
  EXPECT_THROW(linear_fit(std::vector<double>{1, 1}, std::vector<double>{1, 2}), Error);
}

TEST(Profiler, SweepMemoryLaws) {
  ProfileRequest req;
  req.config = tiny_config(2);
  req.policy.d_trunc = 1;
  req.d_list = {0, 1, 2, 3, 4, 5};
  req.t_list = {8, 32};
  const ScalingReport rep = profile_sweep(req);
  EXPECT_EQ(rep.rows.size(), 12u);
  EXPECT_EQ(rep.reference.size(), 2u);
  EXPECT_GT(rep.memory_vs_d.r_squared, 0.99);
  EXPECT_GT(rep.memory_vs_d.slope, 0.0);
  EXPECT_NEAR(rep.flatness, 1.0, 0.05);
  for (const StepAudit& a : rep.audits) EXPECT_TRUE(a.ok());
  // Full backprop is the dashed ceiling.
  for (const ProfileRow& r : rep.rows)
    if (r.groups == 32) EXPECT_LT(r.peak_bytes, rep.reference.back().peak_bytes);
  const std::string csv = profile_csv(rep);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "T,D_trunc,mode,s,peak_bytes,peak_segments,backward_steps");
  const std::string timing = profile_timing_csv(rep);
  EXPECT_EQ(timing.substr(0, timing.find('\n')), "T,D_trunc,mode,s,fwd_ms,bwd_ms");
  EXPECT_NE(memory_chart(rep).render().find("stroke-dasharray"), std::string::npos);
}

TEST(Report, CsvEscaping) {
  CsvWriter w({"a", "b"});
  w.row({"x,y", "say \"hi\""});
  EXPECT_EQ(w.str(), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\n");
  EXPECT_THROW(w.row({"1"}), Error);
  EXPECT_EQ(format_double(0.1), "0.1");
}

}  // namespace
}  // namespace chopgrad
