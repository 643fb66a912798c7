#include "chopgrad/locality.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "chopgrad/finite_difference.hpp"
#include "parallel.hpp"

namespace chopgrad {

double Matrix::frobenius() const {
  double s = 0.0;
  for (double v : data) s += v * v;
  return std::sqrt(s);
}

namespace {

void check_latents(std::span<const Tensor> latents, const DecoderParams& params) {
  params.config.validate();
  if (latents.empty()) throw Error("no latent groups");
  for (const Tensor& z : latents) {
    if (z.shape() != latents.front().shape()) throw ShapeError("latent groups have inconsistent shapes");
  }
}

/// Decodes groups [0, count) on one segment with the cache chained.
struct MonolithicTape {
  Tape tape;
  SegmentId seg = 0;
  std::vector<NodeId> latent_nodes;
  std::vector<NodeId> frame_nodes;
  std::vector<Shape> frame_shapes;

  MonolithicTape(std::span<const Tensor> latents, std::size_t count, const DecoderParams& params) {
    seg = tape.open_segment();
    const Recorder rec(tape, seg);
    const Tensor& z0 = latents.front();
    CacheState cache = CacheState::zeros(params.config, z0.dim(2), z0.dim(3));
    for (std::size_t g = 0; g < count; ++g) {
      const Tensor z = tape.leaf(latents[g].constant());
      latent_nodes.push_back(*z.node());
      DecodeStep step = decode_step(rec, z, cache, params);
      frame_nodes.push_back(*step.frames.node());
      frame_shapes.push_back(step.frames.shape());
      cache = std::move(step.cache);
    }
  }
};

}  // namespace

std::vector<Matrix> sink_jacobians(std::size_t i, std::span<const Tensor> latents, const DecoderParams& params,
                                   const JacobianOptions& opts) {
  check_latents(latents, params);
  if (i >= latents.size()) throw Error("sink group " + std::to_string(i) + " out of range");
  const std::size_t rows = element_count(params.config.frames_shape(latents.front().dim(2), latents.front().dim(3)));
  const std::size_t cols = latents.front().size();
  if (rows > opts.max_rows || cols > opts.max_cols) {
    throw Error("jacobian " + std::to_string(rows) + "x" + std::to_string(cols) + " exceeds the " +
                std::to_string(opts.max_rows) + "x" + std::to_string(opts.max_cols) + " guard");
  }
  const MonolithicTape mono(latents, latents.size(), params);
  std::vector<Matrix> out(latents.size(), Matrix(rows, cols));
  detail::parallel_for(rows, opts.threads, [&](std::size_t r) {
    Tensor unit(mono.frame_shapes[i]);
    unit[r] = 1.0;
    GradientStore seeds;
    seeds.set(mono.frame_nodes[i], std::move(unit));
    const GradientStore g = mono.tape.backward(mono.seg, seeds);
    for (std::size_t j = 0; j < latents.size(); ++j) {
      const Tensor* gj = g.find(mono.latent_nodes[j]);
      if (!gj) continue;
      std::copy(gj->values().begin(), gj->values().end(), out[j].data.begin() + static_cast<long>(r * cols));
    }
  });
  return out;
}

Matrix exact_jacobian(std::size_t i, std::size_t j, std::span<const Tensor> latents, const DecoderParams& params,
                      const JacobianOptions& opts) {
  if (j >= latents.size()) throw Error("source group " + std::to_string(j) + " out of range");
  const std::size_t count = std::max(i, j) + 1;
  return sink_jacobians(i, latents.first(std::min(count, latents.size())), params, opts)[j];
}

InfluenceSample influence(std::size_t i, std::size_t j, std::span<const Tensor> latents,
                          const DecoderParams& params, const JacobianOptions& opts) {
  return {j, i, i > j ? i - j : j - i, exact_jacobian(i, j, latents, params, opts).frobenius()};
}

std::vector<InfluenceSample> influence_table(std::span<const Tensor> latents, const DecoderParams& params,
                                             bool include_future, const JacobianOptions& opts) {
  std::vector<InfluenceSample> out;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const std::vector<Matrix> js = sink_jacobians(i, latents, params, opts);
    for (std::size_t j = 0; j < latents.size(); ++j) {
      if (j > i && !include_future) continue;
      out.push_back({j, i, i > j ? i - j : j - i, js[j].frobenius()});
    }
  }
  return out;
}

std::vector<DistanceMean> average_by_distance(std::span<const InfluenceSample> samples) {
  std::map<std::size_t, DistanceMean> acc;
  for (const InfluenceSample& s : samples) {
    DistanceMean& m = acc[s.distance];
    m.distance = s.distance;
    m.mean += s.norm;
    ++m.count;
  }
  std::vector<DistanceMean> out;
  for (auto& [d, m] : acc) {
    m.mean /= static_cast<double>(m.count);
    out.push_back(m);
  }
  return out;
}

std::string to_string(FitKind k) {
  return k == FitKind::UpperEnvelope ? "upper_envelope" : "log_least_squares";
}

double LocalityFit::envelope(std::size_t distance) const {
  return C * std::exp(-alpha * static_cast<double>(distance));
}

LocalityFit fit_locality(std::span<const InfluenceSample> samples, FitKind kind) {
  std::vector<std::pair<double, double>> pts;  // (distance, log norm)
  LocalityFit fit;
  fit.kind = kind;
  std::vector<std::size_t> all_d;
  for (const InfluenceSample& s : samples) {
    if (s.norm < 0.0 || !std::isfinite(s.norm)) throw Error("influence samples must be finite and non-negative");
    all_d.push_back(s.distance);
    if (s.norm == 0.0) {
      ++fit.zero_count;
      continue;
    }
    pts.emplace_back(static_cast<double>(s.distance), std::log(s.norm));
  }
  std::sort(all_d.begin(), all_d.end());
  if (std::unique(all_d.begin(), all_d.end()) - all_d.begin() < 2) {
    throw Error("locality fit needs samples at two or more distances");
  }
  fit.sample_count = pts.size();
  std::vector<double> pos_d;
  for (const auto& p : pts) pos_d.push_back(p.first);
  std::sort(pos_d.begin(), pos_d.end());
  const auto distinct = std::unique(pos_d.begin(), pos_d.end()) - pos_d.begin();

  if (kind == FitKind::UpperEnvelope) {
    if (pts.empty()) return fit;  // every sample is zero: C = 0 dominates them
    // Leftmost upper-hull vertex: the largest value at the smallest distance.
    auto anchor = pts.front();
    for (const auto& p : pts) {
      if (p.first < anchor.first || (p.first == anchor.first && p.second > anchor.second)) anchor = p;
    }
    double alpha = std::numeric_limits<double>::infinity();
    for (const auto& p : pts) {
      if (p.first > anchor.first) alpha = std::min(alpha, (anchor.second - p.second) / (p.first - anchor.first));
    }
    if (!std::isfinite(alpha)) {
      throw Error("envelope fit needs non-zero samples at two or more distances");
    }
    if (alpha <= 0.0) {
      fit.alpha = 0.0;
      double mx = -std::numeric_limits<double>::infinity();
      for (const auto& p : pts) mx = std::max(mx, p.second);
      fit.C = std::exp(mx);
    } else {
      fit.alpha = alpha;
      fit.C = std::exp(anchor.second + alpha * anchor.first);
    }
    return fit;
  }

  if (distinct < 2) throw Error("log least-squares fit needs non-zero samples at two or more distances");
  const double n = static_cast<double>(pts.size());
  double sx = 0, sy = 0;
  for (const auto& [x, y] : pts) {
    sx += x;
    sy += y;
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& [x, y] : pts) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
    syy += (y - my) * (y - my);
  }
  const double slope = sxy / sxx;
  fit.alpha = -slope;
  fit.C = std::exp(my - slope * mx);
  double ss_res = 0.0;
  for (const auto& [x, y] : pts) {
    const double e = y - (my + slope * (x - mx));
    ss_res += e * e;
  }
  fit.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return fit;
}

std::optional<std::size_t> min_truncation_distance(const LocalityFit& fit, double epsilon) {
  if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
  if (epsilon >= fit.C) return 0;
  if (fit.alpha <= 0.0) return std::nullopt;
  // Guard against ceil() overshooting an exact integer by rounding noise.
  const double d = std::log(fit.C / epsilon) / fit.alpha;
  const double r = std::round(d);
  if (std::abs(d - r) < 1e-12 * std::max(1.0, d)) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::ceil(d));
}

namespace {

std::vector<Tensor> group_pixel_cotangents(std::span<const Tensor> latents, const Targets& targets,
                                           const DecoderParams& params, const LossSpec& loss) {
  std::vector<FrameGroupLatent> lat;
  for (std::size_t i = 0; i < latents.size(); ++i) lat.push_back({i, latents[i]});
  const auto frames = split_groups(decode_video(lat, params), params.config.frames_per_group());
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    out.push_back(loss.pixel_weight > 0.0 ? pixel_cotangent(frames[i], targets.frames.at(i), loss)
                                          : Tensor(frames[i].shape()));
  }
  return out;
}

double diff_norm(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

}  // namespace

GradErrorReport grad_error_sweep(std::span<const Tensor> latents, const Targets& targets,
                                 const DecoderParams& params, const LossSpec& loss,
                                 std::vector<std::size_t> d_list, const JacobianOptions& opts) {
  check_latents(latents, params);
  std::sort(d_list.begin(), d_list.end());
  d_list.erase(std::unique(d_list.begin(), d_list.end()), d_list.end());
  GradErrorReport report;
  const RunResult full = run_full_backprop(latents, targets, params, loss);
  for (const Tensor& g : group_pixel_cotangents(latents, targets, params, loss)) {
    report.seed_norm_sum += frobenius_norm(g);
  }
  if (latents.size() > 1) {
    report.fit = fit_locality(influence_table(latents, params, false, opts), FitKind::UpperEnvelope);
  }
  double full_sq = 0.0;
  for (const Tensor& g : full.grads.latent_grads) full_sq += dot(g, g);
  report.monotone = true;
  report.all_bounds_hold = true;
  for (std::size_t d : d_list) {
    TruncationPolicy policy;
    policy.d_trunc = d;
    const RunResult tr = run_truncated_backprop(latents, targets, params, loss, policy);
    GradErrorRow row;
    row.d_trunc = d;
    double sq = 0.0;
    for (std::size_t j = 0; j < latents.size(); ++j) {
      const double e = diff_norm(tr.grads.latent_grads[j], full.grads.latent_grads[j]);
      sq += e;
      row.max_latent_error = std::max(row.max_latent_error, std::sqrt(e));
    }
    row.abs_error = std::sqrt(sq);
    row.rel_error = full_sq > 0.0 ? row.abs_error / std::sqrt(full_sq) : 0.0;
    row.bound = report.fit.envelope(d) * report.seed_norm_sum;
    row.bound_holds = row.max_latent_error <= row.bound * (1.0 + 1e-9) + 1e-14;
    if (!report.rows.empty() && row.abs_error > report.rows.back().abs_error * (1.0 + 1e-12) + 1e-15) {
      report.monotone = false;
    }
    report.all_bounds_hold = report.all_bounds_hold && row.bound_holds;
    report.rows.push_back(row);
  }
  return report;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine similarity of vectors with different lengths");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  if (aa == 0.0 || bb == 0.0) return aa == bb ? 1.0 : 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

ParamGradComparison param_grad_compare(std::span<const Sample> dataset, const DecoderParams& params,
                                       const LossSpec& loss, std::vector<std::size_t> d_list,
                                       std::size_t threads) {
  if (dataset.empty()) throw Error("param_grad_compare needs at least one sample");
  std::sort(d_list.begin(), d_list.end());
  d_list.erase(std::unique(d_list.begin(), d_list.end()), d_list.end());
  const std::size_t P = params.parameter_count();
  const double inv = 1.0 / static_cast<double>(dataset.size());

  // Slot 0 is full backprop, slot k+1 is d_list[k]; summed in dataset order.
  std::vector<std::vector<std::vector<double>>> per_item(dataset.size());
  detail::parallel_for(dataset.size(), threads, [&](std::size_t n) {
    const Sample& s = dataset[n];
    per_item[n].push_back(run_full_backprop(s.latents, s.targets, params, loss).grads.param_grad);
    for (std::size_t d : d_list) {
      TruncationPolicy policy;
      policy.d_trunc = d;
      per_item[n].push_back(run_truncated_backprop(s.latents, s.targets, params, loss, policy).grads.param_grad);
    }
  });
  std::vector<std::vector<double>> mean(d_list.size() + 1, std::vector<double>(P, 0.0));
  for (const auto& item : per_item)
    for (std::size_t k = 0; k < item.size(); ++k)
      for (std::size_t p = 0; p < P; ++p) mean[k][p] += item[k][p] * inv;

  ParamGradComparison out;
  out.full_mean_grad = mean[0];
  double full_abs = 0.0;
  for (double v : mean[0]) full_abs += std::abs(v);
  for (std::size_t k = 0; k < d_list.size(); ++k) {
    double diff = 0.0;
    for (std::size_t p = 0; p < P; ++p) diff += std::abs(mean[k + 1][p] - mean[0][p]);
    out.rows.push_back({d_list[k], full_abs > 0.0 ? diff / full_abs : diff,
                        cosine_similarity(mean[k + 1], mean[0])});
  }
  return out;
}

SpatialProbe spatial_locality_probe(std::span<const Tensor> latents, const DecoderParams& params,
                                    const LatentBlock& block) {
  check_latents(latents, params);
  const DecoderConfig& cfg = params.config;
  const std::size_t H = latents.front().dim(2), W = latents.front().dim(3);
  if (block.h0 + block.height > H || block.w0 + block.width > W) {
    throw Error("latent block exceeds the " + std::to_string(H) + "x" + std::to_string(W) + " latent extent");
  }
  std::vector<FrameGroupLatent> orig, zeroed;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    orig.push_back({i, latents[i]});
    Tensor z = latents[i];
    for (std::size_t c = 0; c < z.dim(0); ++c)
      for (std::size_t t = 0; t < z.dim(1); ++t)
        for (std::size_t y = block.h0; y < block.h0 + block.height; ++y)
          for (std::size_t x = block.w0; x < block.w0 + block.width; ++x) z.at(c, t, y, x) = 0.0;
    zeroed.push_back({i, std::move(z)});
  }
  const Tensor a = decode_video(orig, params), b = decode_video(zeroed, params);
  SpatialProbe probe;
  probe.diff = Tensor(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) probe.diff[k] = std::abs(a[k] - b[k]);

  const std::size_t PH = a.dim(2), PW = a.dim(3);
  probe.may_depend.assign(PH * PW, false);
  if (!block.empty()) {
    const long bh0 = static_cast<long>(block.h0), bh1 = static_cast<long>(block.h0 + block.height) - 1;
    const long bw0 = static_cast<long>(block.w0), bw1 = static_cast<long>(block.w0 + block.width) - 1;
    for (std::size_t y = 0; y < PH; ++y) {
      const CellRange ry = latent_dependency(cfg, static_cast<long>(y), static_cast<long>(y));
      if (ry.hi < bh0 || ry.lo > bh1) continue;
      for (std::size_t x = 0; x < PW; ++x) {
        const CellRange rx = latent_dependency(cfg, static_cast<long>(x), static_cast<long>(x));
        probe.may_depend[y * PW + x] = !(rx.hi < bw0 || rx.lo > bw1);
      }
    }
  }
  for (std::size_t y = 0; y < PH; ++y)
    for (std::size_t x = 0; x < PW; ++x) {
      const bool inside = probe.may_depend[y * PW + x];
      if (!inside) ++probe.outside_pixels;
      for (std::size_t c = 0; c < a.dim(0); ++c)
        for (std::size_t t = 0; t < a.dim(1); ++t) {
          const double d = probe.diff.at(c, t, y, x);
          double& slot = inside ? probe.max_inside : probe.max_outside;
          slot = std::max(slot, d);
        }
    }
  probe.outside_identical = probe.max_outside == 0.0;
  return probe;
}

DecompositionReport verify_decomposition(std::span<const Tensor> latents, const Targets& targets,
                                         const DecoderParams& params, const LossSpec& loss,
                                         const JacobianOptions& opts) {
  check_latents(latents, params);
  const std::size_t T = latents.size();
  const RunResult full = run_full_backprop(latents, targets, params, loss);
  const std::vector<Tensor> seeds = group_pixel_cotangents(latents, targets, params, loss);

  std::vector<Tensor> recon;
  std::vector<double> rhs(T, 0.0);
  for (std::size_t j = 0; j < T; ++j) {
    Tensor direct(latents[j].shape());
    if (loss.latent_weight > 0.0) {
      const double c = 2.0 * loss.latent_weight / static_cast<double>(direct.size());
      for (std::size_t k = 0; k < direct.size(); ++k) direct[k] = c * (latents[j][k] - targets.latents.at(j)[k]);
    }
    rhs[j] = frobenius_norm(direct);
    recon.push_back(std::move(direct));
  }
  for (std::size_t i = 0; i < T; ++i) {
    const std::vector<Matrix> js = sink_jacobians(i, latents, params, opts);
    const Tensor& g = seeds[i];
    const double gn = frobenius_norm(g);
    for (std::size_t j = 0; j < T; ++j) {
      const Matrix& J = js[j];
      for (std::size_t r = 0; r < J.rows; ++r) {
        if (g[r] == 0.0) continue;
        for (std::size_t c = 0; c < J.cols; ++c) recon[j][c] += g[r] * J(r, c);
      }
      rhs[j] += gn * J.frobenius();
    }
  }
  DecompositionReport rep;
  rep.inequality_holds = true;
  rep.rhs = rhs;
  for (std::size_t j = 0; j < T; ++j) {
    rep.rel_error.push_back(relative_error(recon[j], full.grads.latent_grads[j]));
    rep.max_rel_error = std::max(rep.max_rel_error, rep.rel_error.back());
    rep.lhs.push_back(frobenius_norm(full.grads.latent_grads[j]));
    if (rep.lhs.back() > rep.rhs[j] * (1.0 + 1e-12) + 1e-15) rep.inequality_holds = false;
  }
  return rep;
}

}  // namespace chopgrad
