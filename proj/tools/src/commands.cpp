#include "commands.hpp"

#include <cmath>
#include <iostream>

#include "chopgrad/gradcheck.hpp"
#include "chopgrad/io.hpp"
#include "chopgrad/locality.hpp"
#include "chopgrad/profiler.hpp"
#include "chopgrad/report.hpp"
#include "chopgrad/training.hpp"

namespace chopgrad::cli {

using nlohmann::json;

namespace {

std::string fmt(double v) { return format_double(v); }
std::string num(std::size_t v) { return std::to_string(v); }

json fit_json(const LocalityFit& f) {
  return {{"kind", to_string(f.kind)},     {"C", f.C},
          {"alpha", f.alpha},              {"r_squared", f.r_squared},
          {"sample_count", f.sample_count}, {"zero_count", f.zero_count}};
}

JacobianOptions jacobian_options(const RunContext& ctx) {
  JacobianOptions o;
  o.threads = ctx.threads;
  return o;
}

Sample analysis_sample(const RunContext& ctx) {
  return random_sample(ctx.config.decoder, ctx.config.analysis.groups, ctx.config.seeds().data);
}

int finish(const RunContext& ctx, const json& results, bool passed) {
  ctx.write_manifest(results, passed);
  std::cout << ctx.command << ": " << (passed ? "ok" : "CHECK FAILED") << ", outputs in " << ctx.out_dir.string()
            << "\n";
  return passed ? kOk : kCheckFailed;
}

}  // namespace

int cmd_gradcheck(const RunContext& ctx) {
  const ExperimentConfig& c = ctx.config;
  CsvWriter csv({"suite", "name", "seed", "rel_error", "raw_rel_error", "checked", "kink_excluded", "tolerance",
                 "pass"});
  std::size_t failures = 0, total = 0;
  const auto record = [&](const CheckResult& r) {
    csv.row({r.suite, r.name, std::to_string(r.seed), fmt(r.value), fmt(r.raw_value), num(r.checked),
             num(r.excluded), fmt(r.tolerance), r.pass ? "1" : "0"});
    ++total;
    if (!r.pass) {
      ++failures;
      std::cerr << "FAILED " << r.suite << "/" << r.name << " seed " << r.seed << ": " << r.value << " >= "
                << r.tolerance << "\n";
    }
  };
  for (std::size_t k = 0; k < c.analysis.gradcheck_seeds; ++k) {
    const std::uint64_t seed = c.seeds().data + k;
    for (const CheckResult& r : op_fd_checks(seed)) record(r);
    for (const CheckResult& r : decoder_fd_check(c.decoder, c.analysis.groups, c.loss, seed)) record(r);
    record(oracle_equivalence_check(c.decoder, c.analysis.groups, c.loss, seed));
  }
  csv.save(ctx.out_dir / "gradcheck.csv");
  return finish(ctx, {{"checks", total}, {"failures", failures}}, failures == 0);
}

int cmd_locality(const RunContext& ctx) {
  const DecoderParams params = init_params(ctx.config.decoder);
  const Sample s = analysis_sample(ctx);
  const std::vector<InfluenceSample> table = influence_table(s.latents, params, false, jacobian_options(ctx));

  CsvWriter csv({"i", "j", "distance", "frobenius_norm"});
  for (const InfluenceSample& x : table) csv.row({num(x.sink), num(x.source), num(x.distance), fmt(x.norm)});
  csv.save(ctx.out_dir / "locality.csv");

  const std::vector<DistanceMean> means = average_by_distance(table);
  CsvWriter mean_csv({"distance", "mean_frobenius_norm", "count"});
  std::vector<InfluenceSample> mean_samples;
  for (const DistanceMean& m : means) {
    mean_csv.row({num(m.distance), fmt(m.mean), num(m.count)});
    mean_samples.push_back({0, m.distance, m.distance, m.mean});
  }
  mean_csv.save(ctx.out_dir / "locality_mean.csv");

  const LocalityFit envelope = fit_locality(table, FitKind::UpperEnvelope);
  const LocalityFit lsq = fit_locality(table, FitKind::LogLeastSquares);
  const LocalityFit mean_lsq = fit_locality(mean_samples, FitKind::LogLeastSquares);

  SvgChart chart;
  chart.title = "Influence of latent j on pixels of group i";
  chart.x_label = "distance |i - j| (frame groups)";
  chart.y_label = "||J_ij||_F";
  chart.log_y = true;
  SvgSeries pts{"samples", {}, {}, true};
  for (const InfluenceSample& x : table) {
    pts.x.push_back(static_cast<double>(x.distance));
    pts.y.push_back(x.norm);
  }
  SvgSeries avg{"mean", {}, {}, false};
  SvgSeries env{"envelope C exp(-alpha D)", {}, {}, false};
  for (const DistanceMean& m : means) {
    avg.x.push_back(static_cast<double>(m.distance));
    avg.y.push_back(m.mean);
    env.x.push_back(static_cast<double>(m.distance));
    env.y.push_back(envelope.envelope(m.distance));
  }
  chart.series = {pts, avg, env};
  chart.save(ctx.out_dir / "locality.svg");

  bool non_increasing = true;
  for (std::size_t k = 1; k < means.size(); ++k) non_increasing &= means[k].mean <= means[k - 1].mean;
  return finish(ctx,
                {{"fits", {{"envelope", fit_json(envelope)},
                           {"log_least_squares", fit_json(lsq)},
                           {"mean_log_least_squares", fit_json(mean_lsq)}}},
                 {"mean_non_increasing", non_increasing}},
                true);
}

int cmd_grad_error(const RunContext& ctx) {
  const DecoderParams params = init_params(ctx.config.decoder);
  const Sample s = analysis_sample(ctx);
  const GradErrorReport rep =
      grad_error_sweep(s.latents, s.targets, params, ctx.config.loss, ctx.config.analysis.d_list, jacobian_options(ctx));

  CsvWriter csv({"D_trunc", "abs_error", "rel_error", "max_latent_error", "bound", "bound_holds"});
  SvgSeries err{"max_j ||error_j||", {}, {}, false}, bound{"bound", {}, {}, false};
  for (const GradErrorRow& r : rep.rows) {
    csv.row({num(r.d_trunc), fmt(r.abs_error), fmt(r.rel_error), fmt(r.max_latent_error), fmt(r.bound),
             r.bound_holds ? "1" : "0"});
    err.x.push_back(static_cast<double>(r.d_trunc));
    err.y.push_back(r.max_latent_error);
    bound.x.push_back(static_cast<double>(r.d_trunc));
    bound.y.push_back(r.bound);
  }
  csv.save(ctx.out_dir / "grad_error.csv");
  SvgChart chart{"Latent gradient truncation error", "D_trunc (frame groups)", "Frobenius norm", {err, bound}, {}, true};
  chart.save(ctx.out_dir / "grad_error.svg");
  return finish(ctx,
                {{"fit", fit_json(rep.fit)},
                 {"seed_norm_sum", rep.seed_norm_sum},
                 {"monotone", rep.monotone},
                 {"all_bounds_hold", rep.all_bounds_hold}},
                rep.all_bounds_hold && rep.monotone);
}

int cmd_param_compare(const RunContext& ctx) {
  const ExperimentConfig& c = ctx.config;
  const DecoderParams params = init_params(c.decoder);
  std::vector<Sample> data;
  for (std::size_t k = 0; k < c.analysis.dataset_size; ++k) {
    data.push_back(random_sample(c.decoder, c.analysis.groups, c.seeds().data + 1000 * k));
  }
  const ParamGradComparison cmp = param_grad_compare(data, params, c.loss, c.analysis.d_list, ctx.threads);
  CsvWriter csv({"D_trunc", "normalized_mae", "cosine_similarity"});
  SvgSeries mae{"normalized MAE", {}, {}, false}, cos{"cosine similarity", {}, {}, false};
  for (const ParamGradRow& r : cmp.rows) {
    csv.row({num(r.d_trunc), fmt(r.normalized_mae), fmt(r.cosine)});
    mae.x.push_back(static_cast<double>(r.d_trunc));
    mae.y.push_back(r.normalized_mae);
    cos.x.push_back(static_cast<double>(r.d_trunc));
    cos.y.push_back(r.cosine);
  }
  csv.save(ctx.out_dir / "param_compare.csv");
  SvgChart chart{"Decoder parameter gradients vs full backprop", "D_trunc (frame groups)", "", {mae, cos}, {}, false};
  chart.save(ctx.out_dir / "param_compare.svg");
  return finish(ctx, {{"dataset_size", data.size()}}, true);
}

int cmd_profile(const RunContext& ctx) {
  const ExperimentConfig& c = ctx.config;
  ProfileRequest req;
  req.config = c.decoder;
  req.policy = c.policy;
  req.loss = c.loss;
  req.d_list = c.analysis.d_list;
  req.t_list = c.analysis.t_list;
  req.full_reference_max_groups = c.analysis.full_reference_max_groups;
  req.data_seed = c.seeds().data;
  const ScalingReport rep = profile_sweep(req);
  write_text(ctx.out_dir / "profile.csv", profile_csv(rep));
  write_text(ctx.out_dir / "profile_timing.csv", profile_timing_csv(rep));
  memory_chart(rep).save(ctx.out_dir / "profile_memory.svg");
  time_chart(rep).save(ctx.out_dir / "profile_time.svg");
  bool audits_ok = true;
  for (const StepAudit& a : rep.audits) audits_ok &= a.ok();
  const auto lin = [](const LinearFit& f) {
    return json{{"slope", f.slope}, {"intercept", f.intercept}, {"r_squared", f.r_squared}, {"points", f.points}};
  };
  return finish(ctx,
                {{"memory_vs_d", lin(rep.memory_vs_d)},
                 {"time_vs_d", lin(rep.time_vs_d)},
                 {"flatness_d", rep.flatness_d},
                 {"flatness", rep.flatness},
                 {"step_audits_ok", audits_ok}},
                audits_ok);
}

int cmd_spatial_probe(const RunContext& ctx) {
  const DecoderParams params = init_params(ctx.config.decoder);
  const Sample s = analysis_sample(ctx);
  const SpatialProbe p = spatial_locality_probe(s.latents, params, ctx.config.analysis.probe_block);
  const std::size_t H = p.diff.dim(2), W = p.diff.dim(3);
  std::vector<double> peak(H * W, 0.0);
  for (std::size_t c = 0; c < p.diff.dim(0); ++c)
    for (std::size_t t = 0; t < p.diff.dim(1); ++t)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) peak[y * W + x] = std::max(peak[y * W + x], p.diff.at(c, t, y, x));
  CsvWriter csv({"h", "w", "may_depend", "max_abs_diff"});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      csv.row({num(y), num(x), p.may_depend[y * W + x] ? "1" : "0", fmt(peak[y * W + x])});
  csv.save(ctx.out_dir / "spatial_probe.csv");
  SvgHeatmap map;
  map.title = "max |decode - decode with zeroed block|";
  map.rows = H;
  map.cols = W;
  map.values = peak;
  map.outline = p.may_depend;
  map.outline_label = "receptive-field region";
  map.save(ctx.out_dir / "spatial_probe.svg");
  return finish(ctx,
                {{"max_outside", p.max_outside},
                 {"max_inside", p.max_inside},
                 {"outside_pixels", p.outside_pixels},
                 {"outside_identical", p.outside_identical}},
                p.outside_identical);
}

int cmd_train_toy(const RunContext& ctx) {
  const ExperimentConfig& c = ctx.config;
  const SeedSet seeds = c.seeds();
  ToyTask task = c.task;
  task.seed = seeds.data;
  const ToyDataset data = generate_dataset(task, c.decoder, seeds.encoder);
  DecoderParams decoder0 = init_params(c.decoder);
  const std::vector<double> fit = fit_decoder(data, decoder0, c.decoder_fit);
  CsvWriter fit_csv({"step", "train_pixel_mse"});
  for (std::size_t k = 0; k < fit.size(); ++k) fit_csv.row({num(k), fmt(fit[k])});
  fit_csv.save(ctx.out_dir / "decoder_fit.csv");
  save_params(ctx.out_dir / "decoder_fitted", decoder0);
  const ToyBackbone backbone0 = ToyBackbone::init(c.decoder.channel_widths.front(), c.analysis.backbone_hidden,
                                                  seeds.backbone);

  struct Variant {
    std::string name;
    TrainConfig config;
  };
  TrainConfig base = c.train;
  base.policy = c.policy;
  base.pixel = c.loss.pixel;
  base.seed = seeds.order;
  std::vector<Variant> variants;
  {
    TrainConfig t = base;
    t.pixel_weight = 0.0;
    variants.push_back({"latent_only", t});
  }
  for (std::size_t d : c.analysis.d_list) {
    TrainConfig t = base;
    t.policy.d_trunc = d;
    variants.push_back({"pixel_D" + std::to_string(d), t});
  }
  {
    TrainConfig t = base;
    t.full_backprop = true;
    variants.push_back({"pixel_full", t});
  }

  CsvWriter curves({"variant", "step", "latent_loss", "pixel_loss", "total_loss"});
  CsvWriter summary({"variant", "D_trunc", "full_backprop", "pixel_weight", "val_mse", "val_psnr",
                     "peak_decoder_bytes", "backbone_bytes", "diverged"});
  SvgChart chart{"Training loss", "step", "total loss", {}, {}, true};
  json results = json::array();
  bool ok = true;
  double latent_only_mse = 0.0, lo = 1e300, hi = 0.0;
  for (const Variant& v : variants) {
    ToyBackbone backbone = backbone0;
    DecoderParams decoder = decoder0;
    const TrainReport rep = train(data, backbone, decoder, v.config);
    SvgSeries curve{v.name, {}, {}, false};
    for (const TrainStep& s : rep.steps) {
      curves.row({v.name, num(s.step), fmt(s.latent_loss), std::isnan(s.pixel_loss) ? "" : fmt(s.pixel_loss),
                  fmt(s.total_loss)});
      curve.x.push_back(static_cast<double>(s.step));
      curve.y.push_back(s.total_loss);
    }
    chart.series.push_back(std::move(curve));
    const std::size_t d = v.config.full_backprop ? c.task.frames / c.decoder.frames_per_group() - 1
                                                 : v.config.policy.d_trunc;
    summary.row({v.name, num(d), v.config.full_backprop ? "1" : "0", fmt(rep.effective_pixel_weight),
                 fmt(rep.validation.mean_mse), fmt(rep.validation.mean_psnr), num(rep.peak_decoder_bytes),
                 num(rep.backbone_bytes), rep.diverged ? "1" : "0"});
    save_checkpoint(ctx.out_dir / ("checkpoint_" + v.name), backbone, decoder, rep.steps.size());
    results.push_back({{"variant", v.name},
                       {"val_mse", rep.validation.mean_mse},
                       {"val_psnr", rep.validation.mean_psnr},
                       {"wall_ms", rep.wall_ms},
                       {"diverged", rep.diverged}});
    ok &= !rep.diverged;
    if (v.name == "latent_only") latent_only_mse = rep.validation.mean_mse;
    if (!v.config.full_backprop && v.config.pixel_weight > 0.0 && v.config.policy.d_trunc <= 2) {
      lo = std::min(lo, rep.validation.mean_mse);
      hi = std::max(hi, rep.validation.mean_mse);
    }
  }
  curves.save(ctx.out_dir / "train_curves.csv");
  summary.save(ctx.out_dir / "train_summary.csv");
  chart.save(ctx.out_dir / "train_curves.svg");
  json summary_json{{"variants", results},
                    {"decoder_fit_initial_mse", fit.empty() ? 0.0 : fit.front()},
                    {"decoder_fit_final_mse", fit.empty() ? 0.0 : fit.back()},
                    {"latent_only_val_mse", latent_only_mse}};
  if (hi > 0.0) summary_json["pixel_d0_to_d2_relative_spread"] = (hi - lo) / lo;
  return finish(ctx, summary_json, ok);
}

}  // namespace chopgrad::cli
