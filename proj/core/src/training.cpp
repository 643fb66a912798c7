#include "chopgrad/training.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "chopgrad/trace.hpp"

namespace chopgrad {

std::string to_string(TaskKind k) { return k == TaskKind::Denoise ? "denoise" : "blur_restore"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "denoise") return TaskKind::Denoise;
  if (s == "blur_restore") return TaskKind::BlurRestore;
  throw Error("unknown task kind '" + s + "'");
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

Tensor moving_shapes(const ToyTask& task, std::size_t channels, std::mt19937_64& rng) {
  Tensor v(Shape{channels, task.frames, task.height, task.width});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t k = 0; k < task.shapes; ++k) {
    const double size = std::max(2.0, std::round((0.2 + 0.15 * unit(rng)) * static_cast<double>(task.height)));
    double y = unit(rng) * (static_cast<double>(task.height) - size);
    double x = unit(rng) * (static_cast<double>(task.width) - size);
    double vy = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.5 + unit(rng));
    double vx = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.5 + unit(rng));
    std::vector<double> color(channels);
    for (double& c : color) c = 0.3 + 0.7 * unit(rng);
    for (std::size_t t = 0; t < task.frames; ++t) {
      const long y0 = std::lround(y), x0 = std::lround(x), s = std::lround(size);
      for (std::size_t c = 0; c < channels; ++c)
        for (long yy = std::max(0L, y0); yy < std::min<long>(static_cast<long>(task.height), y0 + s); ++yy)
          for (long xx = std::max(0L, x0); xx < std::min<long>(static_cast<long>(task.width), x0 + s); ++xx) {
            v.at(c, t, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) = color[c];
          }
      y += vy;
      x += vx;
      const double ymax = static_cast<double>(task.height) - size, xmax = static_cast<double>(task.width) - size;
      if (y < 0 || y > ymax) {
        vy = -vy;
        y = std::clamp(y, 0.0, ymax);
      }
      if (x < 0 || x > xmax) {
        vx = -vx;
        x = std::clamp(x, 0.0, xmax);
      }
    }
  }
  return v;
}

Tensor corrupt(const ToyTask& task, const Tensor& clean, std::mt19937_64& rng) {
  if (task.strength == 0.0) return clean;
  Tensor out(clean.shape());
  if (task.kind == TaskKind::Denoise) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t k = 0; k < clean.size(); ++k) out[k] = std::clamp(clean[k] + task.strength * n(rng), 0.0, 1.0);
    return out;
  }
  const long H = static_cast<long>(clean.dim(2)), W = static_cast<long>(clean.dim(3));
  for (std::size_t c = 0; c < clean.dim(0); ++c)
    for (std::size_t t = 0; t < clean.dim(1); ++t)
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
          double acc = 0.0;
          int n = 0;
          for (long dy = -1; dy <= 1; ++dy)
            for (long dx = -1; dx <= 1; ++dx) {
              const long yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
              acc += clean.at(c, t, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
              ++n;
            }
          const double blurred = acc / n;
          const auto uy = static_cast<std::size_t>(y), ux = static_cast<std::size_t>(x);
          out.at(c, t, uy, ux) = (1.0 - task.strength) * clean.at(c, t, uy, ux) + task.strength * blurred;
        }
  return out;
}

std::vector<Tensor> latent_values(const std::vector<FrameGroupLatent>& groups) {
  std::vector<Tensor> out;
  for (const auto& g : groups) out.push_back(g.data);
  return out;
}

}  // namespace

ToyDataset generate_dataset(const ToyTask& task, const DecoderConfig& config, std::uint64_t encoder_seed) {
  if (task.frames % config.frames_per_group() != 0) {
    throw Error("task frames " + std::to_string(task.frames) + " not divisible by " +
                std::to_string(config.frames_per_group()) + " frames per group");
  }
  if (task.strength < 0.0) throw Error("corruption strength must be non-negative");
  const ToyEncoder encoder(config, encoder_seed);
  const auto make = [&](std::uint64_t stream, std::size_t k) {
    std::mt19937_64 rng(mix_seed(task.seed, stream, k));
    ToyVideo v;
    v.clean = moving_shapes(task, config.pixel_channels, rng);
    v.corrupted = corrupt(task, v.clean, rng);
    v.clean_latents = latent_values(encoder.encode(v.clean));
    v.corrupted_latents = latent_values(encoder.encode(v.corrupted));
    return v;
  };
  ToyDataset d;
  for (std::size_t k = 0; k < task.train_size; ++k) d.train.push_back(make(0, k));
  for (std::size_t k = 0; k < task.val_size; ++k) d.val.push_back(make(1, k));
  return d;
}

ToyBackbone ToyBackbone::init(std::size_t channels, std::size_t hidden, std::uint64_t seed) {
  ToyBackbone b;
  b.channels = channels;
  b.hidden = hidden;
  b.w1 = Tensor(Shape{hidden, channels, 3, 3, 3});
  b.b1 = Tensor(Shape{hidden});
  b.w2 = Tensor(Shape{channels, hidden, 1, 1, 1});
  b.b2 = Tensor(Shape{channels});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(27.0 * static_cast<double>(channels)));
  for (double& v : b.w1.values()) v = n(rng);
  return b;
}

std::vector<const Tensor*> ToyBackbone::tensors() const { return {&w1, &b1, &w2, &b2}; }
std::vector<Tensor*> ToyBackbone::tensors() { return {&w1, &b1, &w2, &b2}; }

std::size_t ToyBackbone::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) n += t->size();
  return n;
}

std::vector<double> ToyBackbone::flatten() const {
  std::vector<double> out;
  for (const Tensor* t : tensors()) out.insert(out.end(), t->values().begin(), t->values().end());
  return out;
}

void ToyBackbone::unflatten(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw Error("backbone expects " + std::to_string(parameter_count()) + " parameters, got " +
                std::to_string(flat.size()));
  }
  std::size_t k = 0;
  for (Tensor* t : tensors())
    for (double& v : t->values()) v = flat[k++];
}

ToyBackbone ToyBackbone::bind(Tape& tape) const {
  ToyBackbone b = *this;
  for (Tensor* t : b.tensors()) *t = tape.leaf(t->constant());
  return b;
}

std::vector<double> ToyBackbone::gather(const GradientStore& grads) const {
  std::vector<double> out;
  for (const Tensor* t : tensors()) {
    const Tensor* g = t->node() ? grads.find(*t->node()) : nullptr;
    if (g) {
      out.insert(out.end(), g->values().begin(), g->values().end());
    } else {
      out.insert(out.end(), t->size(), 0.0);
    }
  }
  return out;
}

std::vector<Tensor> ToyBackbone::forward(const Recorder& rec, std::span<const Tensor> latents) const {
  if (latents.empty()) throw Error("backbone needs at least one latent group");
  std::vector<const Tensor*> parts;
  const Tensor& z0 = latents.front();
  if (z0.rank() != 4 || z0.dim(0) != channels) {
    throw ShapeError("backbone expects " + std::to_string(channels) + "-channel latents, got " + to_string(z0.shape()));
  }
  const Tensor pad(Shape{channels, 1, z0.dim(2), z0.dim(3)});
  parts.push_back(&pad);
  for (const Tensor& z : latents) parts.push_back(&z);
  parts.push_back(&pad);
  const Tensor padded = rec.concat_time(parts);
  const Tensor joint = rec.slice_time(padded, 1, padded.dim(1) - 2);
  const Tensor h = rec.leaky_relu(rec.conv3d(padded, w1, b1), 0.2);
  const Tensor y = rec.add(joint, rec.conv3d(h, w2, b2));
  std::vector<Tensor> out;
  std::size_t t = 0;
  for (const Tensor& z : latents) {
    out.push_back(rec.slice_time(y, t, z.dim(1)));
    t += z.dim(1);
  }
  return out;
}

std::vector<Tensor> ToyBackbone::forward(std::span<const Tensor> latents) const {
  std::vector<Tensor> in;
  for (const Tensor& z : latents) in.push_back(z.constant());
  return forward(Recorder(), in);
}

double psnr_from_mse(double mse) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

EvalMetrics evaluate(const ToyBackbone& backbone, const DecoderParams& decoder, std::span<const EvalSample> samples) {
  EvalMetrics m;
  for (const EvalSample& s : samples) {
    const std::vector<Tensor> z = backbone.forward(s.latents);
    std::vector<FrameGroupLatent> groups;
    for (std::size_t i = 0; i < z.size(); ++i) groups.push_back({i, z[i]});
    const Tensor frames = decode_video(groups, decoder);
    if (frames.shape() != s.target.shape()) {
      throw ShapeError("decoded " + to_string(frames.shape()) + " vs target " + to_string(s.target.shape()));
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < frames.size(); ++k) acc += (frames[k] - s.target[k]) * (frames[k] - s.target[k]);
    const double mse = acc / static_cast<double>(frames.size());
    m.mse.push_back(mse);
    m.psnr.push_back(psnr_from_mse(mse));
  }
  if (!samples.empty()) {
    for (std::size_t k = 0; k < m.mse.size(); ++k) {
      m.mean_mse += m.mse[k];
      m.mean_psnr += m.psnr[k];
    }
    m.mean_mse /= static_cast<double>(m.mse.size());
    m.mean_psnr /= static_cast<double>(m.psnr.size());
  }
  return m;
}

std::vector<EvalSample> validation_samples(const ToyDataset& data) {
  std::vector<EvalSample> out;
  for (const ToyVideo& v : data.val) out.push_back({v.corrupted_latents, v.clean});
  return out;
}

namespace {

double latent_mse_sum(std::span<const Tensor> z, std::span<const Tensor> target) {
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < z[i].size(); ++k) acc += (z[i][k] - target[i][k]) * (z[i][k] - target[i][k]);
    total += acc / static_cast<double>(z[i].size());
  }
  return total;
}

/// Summed per-group pixel loss of the current models on one video.
double pixel_loss_sum(const ToyBackbone& backbone, const DecoderParams& decoder, const ToyVideo& v, PixelLoss kind) {
  const std::vector<Tensor> z = backbone.forward(v.corrupted_latents);
  std::vector<FrameGroupLatent> groups;
  for (std::size_t i = 0; i < z.size(); ++i) groups.push_back({i, z[i]});
  const auto frames = split_groups(decode_video(groups, decoder), decoder.config.frames_per_group());
  const auto targets = split_groups(v.clean, decoder.config.frames_per_group());
  const LossSpec spec{kind, 1.0, 0.0};
  double total = 0.0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    total += group_loss(Recorder(), frames[i], z[i], targets[i], nullptr, spec, LossRegion::whole(z[i]), 1).item();
  }
  return total;
}

/// Gradient of latent_weight * sum_i MSE(z_i, target_i); the decoder is not run.
GradResult latent_only_grads(std::span<const Tensor> z, std::span<const Tensor> target, double latent_weight,
                             std::size_t param_count) {
  GradResult g;
  g.param_grad.assign(param_count, 0.0);
  for (std::size_t i = 0; i < z.size(); ++i) {
    Tensor d(z[i].shape());
    const double c = 2.0 * latent_weight / static_cast<double>(z[i].size());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = c * (z[i][k] - target[i][k]);
    g.latent_grads.push_back(std::move(d));
  }
  g.loss = latent_weight * latent_mse_sum(z, target);
  return g;
}

void sgd_update(std::vector<Tensor*> params, std::span<const double> grad, std::vector<double>& velocity, double lr,
                double momentum) {
  if (velocity.empty()) velocity.assign(grad.size(), 0.0);
  std::size_t k = 0;
  for (Tensor* t : params)
    for (double& v : t->values()) {
      velocity[k] = momentum * velocity[k] + grad[k];
      v -= lr * velocity[k];
      ++k;
    }
}

}  // namespace

std::vector<double> fit_decoder(const ToyDataset& data, DecoderParams& decoder, const DecoderFitConfig& config) {
  if (data.train.empty()) throw Error("training set is empty");
  const std::size_t G = decoder.config.frames_per_group();
  const LossSpec loss{PixelLoss::Mse, 1.0, 0.0};
  std::vector<double> velocity, history;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<double> grad(decoder.parameter_count(), 0.0);
    double total = 0.0;
    std::size_t groups = 0;
    for (const ToyVideo& v : data.train) {
      Targets targets;
      targets.frames = split_groups(v.clean, G);
      const RunResult run = run_full_backprop(v.clean_latents, targets, decoder, loss);
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += run.grads.param_grad[k];
      total += run.grads.loss;
      groups += v.clean_latents.size();
    }
    const double n = static_cast<double>(data.train.size());
    for (double& g : grad) g /= n;
    history.push_back(total / static_cast<double>(groups));
    if (!std::isfinite(total)) throw Error("decoder fit diverged at step " + std::to_string(step));
    sgd_update(decoder.tensors(), grad, velocity, config.learning_rate, config.momentum);
  }
  return history;
}

TrainReport train(const ToyDataset& data, ToyBackbone& backbone, DecoderParams& decoder, const TrainConfig& config) {
  if (data.train.empty()) throw Error("training set is empty");
  if (config.steps < 1) throw Error("training needs at least one step");
  Stopwatch wall;
  TrainReport report;
  const std::size_t G = decoder.config.frames_per_group();

  double pixel_weight = config.pixel_weight;
  if (pixel_weight > 0.0 && config.scale_match) {
    double lat0 = 0.0, pix0 = 0.0;
    for (const ToyVideo& v : data.train) {
      lat0 += latent_mse_sum(backbone.forward(v.corrupted_latents), v.clean_latents);
      pix0 += pixel_loss_sum(backbone, decoder, v, config.pixel);
    }
    if (pix0 > 0.0 && lat0 > 0.0) pixel_weight *= lat0 / (100.0 * pix0);
  }
  report.effective_pixel_weight = pixel_weight;
  const LossSpec loss{config.pixel, pixel_weight, config.latent_weight};
  loss.validate();

  std::vector<std::size_t> order(data.train.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::mt19937_64 rng(config.seed);
  std::vector<double> backbone_velocity, decoder_velocity;

  for (std::size_t step = 0; step < config.steps; ++step) {
    if (step % order.size() == 0) std::shuffle(order.begin(), order.end(), rng);
    const ToyVideo& v = data.train[order[step % order.size()]];

    Tape tape;
    const SegmentId seg = tape.open_segment();
    const ToyBackbone bound = backbone.bind(tape);
    std::vector<Tensor> inputs;
    for (const Tensor& z : v.corrupted_latents) inputs.push_back(z.constant());
    const std::vector<Tensor> out = bound.forward(Recorder(tape, seg), inputs);
    report.backbone_bytes = std::max(report.backbone_bytes, tape.live_activation_bytes());

    std::vector<Tensor> zhat;
    for (const Tensor& z : out) zhat.push_back(z.constant());
    Targets targets;
    if (loss.pixel_weight > 0.0) targets.frames = split_groups(v.clean, G);
    targets.latents = v.clean_latents;
    RunResult run;
    if (loss.pixel_weight > 0.0) {
      run = config.full_backprop ? run_full_backprop(zhat, targets, decoder, loss)
                                 : run_chopgrad(zhat, targets, decoder, loss, config.policy);
    } else {
      run.grads = latent_only_grads(zhat, v.clean_latents, loss.latent_weight, decoder.parameter_count());
    }
    report.peak_decoder_bytes = std::max(report.peak_decoder_bytes, run.trace.peak_bytes);

    TrainStep rec;
    rec.step = step;
    rec.total_loss = run.grads.loss;
    rec.latent_loss = latent_mse_sum(zhat, v.clean_latents);
    if (loss.pixel_weight > 0.0) {
      rec.pixel_loss = (rec.total_loss - loss.latent_weight * rec.latent_loss) / loss.pixel_weight;
    }
    report.steps.push_back(rec);
    if (!std::isfinite(rec.total_loss)) {
      report.diverged = true;
      break;
    }

    GradientStore seeds;
    for (std::size_t i = 0; i < out.size(); ++i) seeds.set(*out[i].node(), run.grads.latent_grads[i]);
    const std::vector<double> g = bound.gather(tape.backward(seg, seeds));
    sgd_update(backbone.tensors(), g, backbone_velocity, config.learning_rate, config.momentum);
    if (config.train_decoder) {
      sgd_update(decoder.tensors(), run.grads.param_grad, decoder_velocity, config.learning_rate, config.momentum);
    }
  }
  report.validation = evaluate(backbone, decoder, validation_samples(data));
  report.wall_ms = wall.elapsed_ms();
  return report;
}

}  // namespace chopgrad
