#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "chopgrad/experiment.hpp"
#include "chopgrad/gradcheck.hpp"
#include "chopgrad/locality.hpp"
#include "chopgrad/profiler.hpp"
#include "chopgrad/training.hpp"
#include "fixtures.hpp"

namespace {

using namespace chopgrad;
using chopgrad::testing::tiny_config;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::vector<double> flat(const GradResult& g) {
  std::vector<double> out = chopgrad::testing::flatten_grads(g.latent_grads);
  out.insert(out.end(), g.param_grad.begin(), g.param_grad.end());
  return out;
}

DecoderConfig tiny_n2(std::uint64_t seed) {
  DecoderConfig c = tiny_config(seed);
  c.cache_length = 2;
  return c;
}

// 1. Truncation at full depth equals full backprop on random tiny configs.
Outcome oracle_equivalence() {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int k = 0; k < 10; ++k) {
    const DecoderConfig cfg = random_tiny_config(rng);
    const std::size_t groups = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const LossSpec loss{PixelLoss::Mse, 1.0, k % 2 ? 0.5 : 0.0};
    worst = std::max(worst, oracle_equivalence_check(cfg, groups, loss, 100 + k).value);
  }
  return {worst < 1e-10, "max rel diff " + fmt("%.3g", worst) + " (< 1e-10) over 10 configs"};
}

// 2. Oracle gradients against central differences, h = 1e-5.
Outcome finite_differences() {
  double worst = 0.0, worst_raw = 0.0, worst_op = 0.0;
  std::size_t excluded = 0, checked = 0;
  bool pass = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const LossSpec loss{PixelLoss::Mse, 1.0, 0.5};
    for (const CheckResult& r : decoder_fd_check(tiny_config(seed), 4, loss, seed, 1e-5, 1e-4)) {
      worst = std::max(worst, r.value);
      worst_raw = std::max(worst_raw, r.raw_value);
      excluded += r.excluded;
      checked += r.checked;
      pass &= r.pass;
    }
    for (const CheckResult& r : op_fd_checks(seed, 1e-5, 1e-4)) {
      worst_op = std::max(worst_op, r.value);
      pass &= r.pass;
    }
  }
  return {pass, "decoder rel err " + fmt("%.3g", worst) + " (raw " + fmt("%.3g", worst_raw) + ", " +
                    std::to_string(excluded) + "/" + std::to_string(checked) + " kink-excluded), ops " +
                    fmt("%.3g", worst_op) + " (< 1e-4), 10 seeds"};
}

// 3. Deferred eviction reproduces eager gradients.
Outcome eager_equals_deferred() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto inst = chopgrad::testing::random_instance(tiny_n2(seed), 8, seed);
    const LossSpec loss{PixelLoss::Mse, 1.0, 0.25};
    for (std::size_t d = 0; d <= 5; ++d) {
      TruncationPolicy eager;
      eager.d_trunc = d;
      const RunResult a = run_truncated_backprop(inst.latents, inst.targets, inst.params, loss, eager);
      for (std::size_t s : {1, 2, 4}) {
        TruncationPolicy deferred = eager;
        deferred.mode = EvictionMode::Deferred;
        deferred.stride = s;
        const RunResult b = run_deferred(inst.latents, inst.targets, inst.params, loss, deferred);
        worst = std::max(worst, chopgrad::testing::max_rel_diff(flat(b.grads), flat(a.grads)));
      }
    }
  }
  return {worst < 1e-12, "max rel diff " + fmt("%.3g", worst) + " (< 1e-12), D 0..5, s {1,2,4}, T = 8"};
}

// 4. Jacobian decomposition of the latent gradient and its norm inequality.
Outcome decomposition() {
  double worst = 0.0;
  std::size_t holds = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = chopgrad::testing::random_instance(tiny_n2(seed), 4, seed);
    const DecompositionReport r =
        verify_decomposition(inst.latents, inst.targets, inst.params, LossSpec{PixelLoss::Mse, 1.0, 0.5});
    worst = std::max(worst, r.max_rel_error);
    holds += r.inequality_holds ? 1 : 0;
  }
  return {worst < 1e-8 && holds == 20,
          "max rel err " + fmt("%.3g", worst) + " (< 1e-8), inequality on " + std::to_string(holds) + "/20 seeds"};
}

// 5. Truncation error under the envelope bound and non-increasing in D.
Outcome temporal_bound() {
  std::size_t bound_ok = 0, monotone_ok = 0;
  double tightest = 0.0;
  const std::size_t seeds = 10;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    const auto inst = chopgrad::testing::random_instance(tiny_n2(seed), 5, seed);
    const GradErrorReport r =
        grad_error_sweep(inst.latents, inst.targets, inst.params, LossSpec{}, {0, 1, 2, 3, 4});
    bound_ok += r.all_bounds_hold ? 1 : 0;
    monotone_ok += r.monotone ? 1 : 0;
    for (const GradErrorRow& row : r.rows)
      if (row.bound > 0.0) tightest = std::max(tightest, row.max_latent_error / row.bound);
  }
  return {bound_ok == seeds && monotone_ok == seeds,
          "bound on " + std::to_string(bound_ok) + "/10 seeds (max error/bound " + fmt("%.3g", tightest) +
              "), monotone on " + std::to_string(monotone_ok) + "/10"};
}

// 6. Live-segment law, linear memory in D, flat memory in T.
Outcome memory_law() {
  ProfileRequest req;
  req.config = tiny_config(5);
  req.policy.d_trunc = 1;
  req.d_list = {0, 1, 2, 3, 4, 5};
  req.t_list = {8, 32};
  req.data_seed = 3;
  const ScalingReport rep = profile_sweep(req);
  bool live = true;
  for (const StepAudit& a : rep.audits) live &= a.live_law_holds;
  const bool flat_ok = std::abs(rep.flatness - 1.0) <= 0.05;
  return {live && rep.memory_vs_d.r_squared > 0.99 && flat_ok,
          std::string("live law ") + (live ? "exact" : "violated") + ", r^2 " +
              fmt("%.6f", rep.memory_vs_d.r_squared) + " (> 0.99), peak T=32 / T=8 at D=1 " +
              fmt("%.4f", rep.flatness) + " (within 5%)"};
}

// 7. Backward step and peak-segment counters against the closed forms.
Outcome step_counters() {
  const DecoderConfig cfg = tiny_config(6);
  const DecoderParams params = init_params(cfg);
  std::size_t runs = 0, bad = 0;
  for (std::size_t T = 1; T <= 20; ++T) {
    const Sample s = random_sample(cfg, T, T);
    for (std::size_t d = 0; d <= 6; ++d) {
      TruncationPolicy p;
      p.d_trunc = d;
      bad += step_count_audit(run_truncated_backprop(s.latents, s.targets, params, LossSpec{}, p), T, p).ok() ? 0 : 1;
      ++runs;
      for (std::size_t stride : {1, 2, 3, 4}) {
        p.mode = EvictionMode::Deferred;
        p.stride = stride;
        bad += step_count_audit(run_deferred(s.latents, s.targets, params, LossSpec{}, p), T, p).ok() ? 0 : 1;
        ++runs;
      }
      p.mode = EvictionMode::Eager;
      p.stride = 1;
    }
  }
  const bool example = eager_step_count(20, 15) == 200 && deferred_step_count(20, 15, 1) == 95;
  return {bad == 0 && example, std::to_string(runs - bad) + "/" + std::to_string(runs) +
                                   " runs match (T 1..20, D 0..6, eager + deferred s 1..4); T=20 D=15: " +
                                   std::to_string(eager_step_count(20, 15)) + " eager vs " +
                                   std::to_string(deferred_step_count(20, 15, 1)) + " deferred"};
}

// 8. Zeroing a latent block leaves pixels outside its receptive field untouched.
Outcome spatial_locality() {
  std::size_t ok = 0, total = 0, outside = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    DecoderConfig cfg;  // 8x8 latents, x2 upsample, 3x3 kernels
    cfg.cache_length = 1 + seed % 2;
    cfg.init_seed = seed;
    const DecoderParams params = init_params(cfg);
    const Sample s = random_sample(cfg, 3, seed);
    for (const LatentBlock b : {LatentBlock{0, 0, 2, 2}, LatentBlock{3, 3, 2, 2}, LatentBlock{5, 1, 3, 1}}) {
      const SpatialProbe p = spatial_locality_probe(s.latents, params, b);
      ok += p.outside_identical && p.outside_pixels > 0 ? 1 : 0;
      outside += p.outside_pixels;
      ++total;
    }
  }
  return {ok == total, std::to_string(ok) + "/" + std::to_string(total) + " probes bit-identical outside (" +
                           std::to_string(outside) + " pixels checked)"};
}

// 9. 2x2 full-halo chunking is exact and at least halves peak memory.
Outcome spatial_chunking() {
  DecoderConfig cfg;
  cfg.channel_widths = {2, 2};
  cfg.pixel_channels = 2;
  cfg.group_size = 2;
  cfg.latent_height = 16;
  cfg.latent_width = 16;
  cfg.cache_length = 2;
  cfg.init_seed = 9;
  const DecoderParams params = init_params(cfg);
  const Sample s = random_sample(cfg, 4, 9);
  TruncationPolicy p;
  p.d_trunc = 1;
  const RunResult whole = run_truncated_backprop(s.latents, s.targets, params, LossSpec{}, p);
  p.chunk_rows = p.chunk_cols = 2;
  const RunResult chunked = spatial_chunk_backward(s.latents, s.targets, params, LossSpec{}, p);
  const double err = chopgrad::testing::max_rel_diff(chunked.grads.param_grad, whole.grads.param_grad);
  const double ratio = static_cast<double>(whole.trace.peak_bytes) / static_cast<double>(chunked.trace.peak_bytes);
  return {err < 1e-8 && ratio >= 2.0, "param rel err " + fmt("%.3g", err) + " (< 1e-8), peak reduction " +
                                          fmt("%.2f", ratio) + "x (>= 2x)"};
}

// 10. Averaged influence decays exponentially with distance.
Outcome influence_decay() {
  std::vector<InfluenceSample> pooled;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto inst = chopgrad::testing::random_instance(tiny_n2(seed), 5, seed);
    const auto t = influence_table(inst.latents, inst.params);
    pooled.insert(pooled.end(), t.begin(), t.end());
  }
  const std::vector<DistanceMean> means = average_by_distance(pooled);
  std::vector<InfluenceSample> curve;
  bool non_increasing = true;
  std::string values;
  for (std::size_t k = 0; k < means.size(); ++k) {
    curve.push_back({0, means[k].distance, means[k].distance, means[k].mean});
    if (k > 0) non_increasing &= means[k].mean <= means[k - 1].mean;
    values += (k ? ", " : "") + fmt("%.3g", means[k].mean);
  }
  const LocalityFit fit = fit_locality(curve, FitKind::LogLeastSquares);
  return {non_increasing && fit.alpha > 0.0 && fit.r_squared > 0.8 && means.size() == 5,
          "means d=0..4 [" + values + "], slope " + fmt("%.3f", -fit.alpha) + ", r^2 " + fmt("%.3f", fit.r_squared) +
              " (> 0.8)"};
}

ExperimentConfig toy_experiment() {
  ExperimentConfig c;
  c.seed = 7;
  c.decoder.cache_length = 2;
  c.decoder.channel_widths = {4, 4};
  c.decoder.init_seed = 1;
  return c;
}

// 11. Dataset-averaged parameter gradients stay aligned with full backprop.
Outcome param_alignment() {
  ExperimentConfig c = toy_experiment();
  ToyTask task = c.task;
  task.frames = 32;
  task.seed = c.seeds().data;
  const ToyDataset data = generate_dataset(task, c.decoder, c.seeds().encoder);
  std::vector<Sample> samples;
  for (const ToyVideo& v : data.train) {
    Sample s;
    s.latents = v.corrupted_latents;
    s.targets.frames = split_groups(v.clean, c.decoder.frames_per_group());
    samples.push_back(std::move(s));
  }
  const ParamGradComparison cmp =
      param_grad_compare(samples, init_params(c.decoder), LossSpec{}, {0, 1, 2, 3, 4, 5});
  double min_cos = 1.0;
  std::string maes;
  for (const ParamGradRow& r : cmp.rows) {
    min_cos = std::min(min_cos, r.cosine);
    maes += (maes.empty() ? "" : ", ") + fmt("%.3g", r.normalized_mae);
  }
  const bool decreasing = cmp.rows[1].normalized_mae < cmp.rows[0].normalized_mae &&
                          cmp.rows[2].normalized_mae < cmp.rows[1].normalized_mae;
  return {min_cos > 0.9 && decreasing,
          "min cosine " + fmt("%.5f", min_cos) + " (> 0.9), normalized MAE D=0..5 [" + maes + "]"};
}

// 12. Pixel-loss training beats latent-only training on validation MSE.
Outcome training_ablation() {
  const ExperimentConfig c = toy_experiment();
  ToyTask task = c.task;
  task.seed = c.seeds().data;
  const ToyDataset data = generate_dataset(task, c.decoder, c.seeds().encoder);
  DecoderParams decoder = init_params(c.decoder);
  fit_decoder(data, decoder, c.decoder_fit);
  const ToyBackbone backbone0 =
      ToyBackbone::init(c.decoder.channel_widths.front(), c.analysis.backbone_hidden, c.seeds().backbone);
  const auto run = [&](double pixel_weight, std::size_t d) {
    TrainConfig t = c.train;
    t.pixel_weight = pixel_weight;
    t.policy.d_trunc = d;
    t.seed = c.seeds().order;
    ToyBackbone b = backbone0;
    DecoderParams p = decoder;
    return train(data, b, p, t).validation.mean_mse;
  };
  const double latent_only = run(0.0, 1);
  std::vector<double> pixel;
  for (std::size_t d : {0, 1, 2}) pixel.push_back(run(c.train.pixel_weight, d));
  const double lo = *std::min_element(pixel.begin(), pixel.end());
  const double hi = *std::max_element(pixel.begin(), pixel.end());
  return {pixel[1] < latent_only, "val MSE latent-only " + fmt("%.5f", latent_only) + " vs pixel D=1 " +
                                      fmt("%.5f", pixel[1]) + "; D=0,1,2: " + fmt("%.5f", pixel[0]) + ", " +
                                      fmt("%.5f", pixel[1]) + ", " + fmt("%.5f", pixel[2]) + " (spread " +
                                      fmt("%.2f", 100.0 * (hi - lo) / lo) + "%, band 10% reported only)"};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;  // 0: no runtime limit
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "full-depth oracle equivalence", 120, oracle_equivalence},
      {2, "finite-difference ground truth", 300, finite_differences},
      {3, "eager equals deferred", 120, eager_equals_deferred},
      {4, "Jacobian decomposition and norm inequality", 0, decomposition},
      {5, "temporal error bound and monotone error", 0, temporal_bound},
      {6, "memory law", 180, memory_law},
      {7, "backward step counters", 0, step_counters},
      {8, "spatial locality", 0, spatial_locality},
      {9, "spatial chunking", 0, spatial_chunking},
      {10, "influence decay", 0, influence_decay},
      {11, "parameter gradient alignment", 0, param_alignment},
      {12, "pixel-loss training ablation", 900, training_ablation},
  };
  int failures = 0;
  for (const Criterion& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_s == 0 || s < c.limit_s;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::printf("%s %2d %s: %s [%.1f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), s,
                c.limit_s > 0 ? (in_time ? ", within limit" : ", OVER LIMIT") : "");
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
