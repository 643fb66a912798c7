#include "chopgrad/profiler.hpp"

#include <algorithm>
#include <random>

namespace chopgrad {

LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("linear_fit: x and y lengths differ");
  LinearFit fit;
  fit.points = x.size();
  if (x.size() < 2) throw Error("linear_fit needs at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
    syy += (y[k] - my) * (y[k] - my);
  }
  if (sxx == 0.0) throw Error("linear_fit needs two distinct x values");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double e = y[k] - (fit.intercept + fit.slope * x[k]);
    ss_res += e * e;
  }
  fit.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return fit;
}

std::size_t eager_step_count(std::size_t groups, std::size_t d_trunc) {
  std::size_t total = 0;
  for (std::size_t i = 0; i < groups; ++i) total += 1 + std::min(d_trunc, i);
  return total;
}

std::size_t deferred_step_count(std::size_t groups, std::size_t d_trunc, std::size_t stride) {
  if (groups == 0) return 0;
  const std::size_t T = groups, D = std::min(d_trunc, T - 1), s = stride;
  const std::size_t evictions = T >= D + s ? (T - D - s) / s + 1 : 0;
  const std::size_t per_eviction = D >= 1 ? D + s - 1 : 0;
  const std::size_t rest = evictions > 0 ? T - D - evictions * s : T;
  std::size_t flush = 0;
  if (D >= 1 && rest > 0) flush = evictions > 0 ? D + rest - 1 : T - 1;
  return T + evictions * per_eviction + flush;
}

std::size_t peak_segment_count(std::size_t groups, const TruncationPolicy& policy) {
  const std::size_t D = policy.effective_depth(groups);
  const std::size_t window = policy.mode == EvictionMode::Eager ? D + 1 : D + policy.stride;
  return std::min(groups, window);
}

StepAudit step_count_audit(const RunResult& run, std::size_t groups, const TruncationPolicy& policy) {
  StepAudit a;
  a.observed_steps = run.grads.backward_steps;
  a.predicted_steps = policy.mode == EvictionMode::Eager
                          ? eager_step_count(groups, policy.effective_depth(groups))
                          : deferred_step_count(groups, policy.d_trunc, policy.stride);
  a.observed_peak_segments = run.trace.peak_segments;
  a.predicted_peak_segments = peak_segment_count(groups, policy);
  if (policy.mode == EvictionMode::Eager) {
    const std::size_t D = policy.effective_depth(groups);
    a.live_law_holds = run.trace.samples.size() == groups;
    for (std::size_t i = 0; a.live_law_holds && i < groups; ++i) {
      a.live_law_holds = run.trace.samples[i].live_segments == std::min(i + 1, D + 1);
    }
  }
  return a;
}

Sample random_sample(const DecoderConfig& config, std::size_t groups, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  const auto draw = [&](const Shape& shape, double scale) {
    Tensor t(shape);
    for (double& v : t.values()) v = scale * n(rng);
    return t;
  };
  Sample s;
  for (std::size_t i = 0; i < groups; ++i) {
    s.latents.push_back(draw(config.latent_shape(), 1.0));
    s.targets.frames.push_back(draw(config.frames_shape(), 0.5));
    s.targets.latents.push_back(draw(config.latent_shape(), 0.5));
  }
  return s;
}

namespace {

ProfileRow make_row(std::size_t groups, std::size_t d, const std::string& mode, std::size_t stride,
                    const RunResult& r) {
  return {groups, d, mode, stride, r.trace.peak_bytes, r.trace.peak_segments, r.grads.backward_steps,
          r.trace.forward_ms, r.trace.backward_ms};
}

}  // namespace

ScalingReport profile_sweep(const ProfileRequest& req) {
  if (req.d_list.empty() || req.t_list.empty()) throw Error("profile_sweep needs non-empty D and T lists");
  req.policy.validate();
  if (req.policy.chunk_rows != 1 || req.policy.chunk_cols != 1) {
    throw Error("profile_sweep profiles the temporal schedule; use a 1x1 chunk grid");
  }
  const DecoderParams params = init_params(req.config);
  std::vector<std::size_t> ts = req.t_list, ds = req.d_list;
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  std::sort(ds.begin(), ds.end());
  ds.erase(std::unique(ds.begin(), ds.end()), ds.end());

  ScalingReport report;
  report.flatness_d = req.policy.d_trunc;
  const std::string mode = to_string(req.policy.mode);
  std::size_t peak_min_t = 0, peak_max_t = 0;
  for (std::size_t T : ts) {
    if (T == 0) throw Error("profile_sweep: T must be positive");
    const Sample data = random_sample(req.config, T, req.data_seed + T);
    std::vector<std::size_t> run_ds = ds;
    if (std::find(run_ds.begin(), run_ds.end(), report.flatness_d) == run_ds.end()) {
      run_ds.push_back(report.flatness_d);
    }
    for (std::size_t d : run_ds) {
      TruncationPolicy p = req.policy;
      p.d_trunc = d;
      const RunResult r = run_chopgrad(data.latents, data.targets, params, req.loss, p);
      if (d == report.flatness_d) {
        if (T == ts.front()) peak_min_t = r.trace.peak_bytes;
        if (T == ts.back()) peak_max_t = r.trace.peak_bytes;
      }
      if (std::find(ds.begin(), ds.end(), d) == ds.end()) continue;
      report.rows.push_back(make_row(T, d, mode, p.stride, r));
      report.audits.push_back(step_count_audit(r, T, p));
    }
    if (T <= req.full_reference_max_groups) {
      report.reference.push_back(
          make_row(T, T - 1, "full", 1, run_full_backprop(data.latents, data.targets, params, req.loss)));
    }
  }
  report.flatness = peak_min_t > 0 ? static_cast<double>(peak_max_t) / static_cast<double>(peak_min_t) : 0.0;

  std::vector<double> x, mem, time;
  for (const ProfileRow& row : report.rows) {
    if (row.groups != ts.back()) continue;
    x.push_back(static_cast<double>(row.d_trunc));
    mem.push_back(static_cast<double>(row.peak_bytes));
    time.push_back(row.forward_ms + row.backward_ms);
  }
  if (x.size() >= 2) {
    report.memory_vs_d = linear_fit(x, mem);
    report.time_vs_d = linear_fit(x, time);
  }
  return report;
}

std::string profile_csv(const ScalingReport& report) {
  CsvWriter csv({"T", "D_trunc", "mode", "s", "peak_bytes", "peak_segments", "backward_steps"});
  const auto emit = [&](const ProfileRow& r) {
    csv.row({std::to_string(r.groups), std::to_string(r.d_trunc), r.mode, std::to_string(r.stride),
             std::to_string(r.peak_bytes), std::to_string(r.peak_segments), std::to_string(r.backward_steps)});
  };
  for (const ProfileRow& r : report.rows) emit(r);
  for (const ProfileRow& r : report.reference) emit(r);
  return csv.str();
}

std::string profile_timing_csv(const ScalingReport& report) {
  CsvWriter csv({"T", "D_trunc", "mode", "s", "fwd_ms", "bwd_ms"});
  const auto emit = [&](const ProfileRow& r) {
    csv.row({std::to_string(r.groups), std::to_string(r.d_trunc), r.mode, std::to_string(r.stride),
             format_double(r.forward_ms), format_double(r.backward_ms)});
  };
  for (const ProfileRow& r : report.rows) emit(r);
  for (const ProfileRow& r : report.reference) emit(r);
  return csv.str();
}

namespace {

SvgChart chart_vs_d(const ScalingReport& report, bool memory) {
  SvgChart chart;
  chart.title = memory ? "Peak activation memory vs truncation distance" : "Time vs truncation distance";
  chart.x_label = "D_trunc (frame groups)";
  chart.y_label = memory ? "peak activation bytes" : "forward + backward ms";
  std::vector<std::size_t> ts;
  for (const ProfileRow& r : report.rows)
    if (std::find(ts.begin(), ts.end(), r.groups) == ts.end()) ts.push_back(r.groups);
  for (std::size_t T : ts) {
    SvgSeries s;
    s.name = "T=" + std::to_string(T);
    for (const ProfileRow& r : report.rows) {
      if (r.groups != T) continue;
      s.x.push_back(static_cast<double>(r.d_trunc));
      s.y.push_back(memory ? static_cast<double>(r.peak_bytes) : r.forward_ms + r.backward_ms);
    }
    chart.series.push_back(std::move(s));
  }
  for (const ProfileRow& r : report.reference) {
    chart.references.push_back({"full T=" + std::to_string(r.groups),
                                memory ? static_cast<double>(r.peak_bytes) : r.forward_ms + r.backward_ms});
  }
  return chart;
}

}  // namespace

SvgChart memory_chart(const ScalingReport& report) { return chart_vs_d(report, true); }
SvgChart time_chart(const ScalingReport& report) { return chart_vs_d(report, false); }

}  // namespace chopgrad
