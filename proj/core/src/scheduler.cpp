#include "chopgrad/scheduler.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <sstream>

namespace chopgrad {

std::string to_string(EvictionMode m) { return m == EvictionMode::Eager ? "eager" : "deferred"; }

EvictionMode eviction_mode_from_string(const std::string& s) {
  if (s == "eager") return EvictionMode::Eager;
  if (s == "deferred") return EvictionMode::Deferred;
  throw Error("unknown eviction mode '" + s + "'");
}

std::string to_string(HaloMode m) { return m == HaloMode::Full ? "full" : "none"; }

HaloMode halo_mode_from_string(const std::string& s) {
  if (s == "full") return HaloMode::Full;
  if (s == "none") return HaloMode::None;
  throw Error("unknown halo mode '" + s + "'");
}

void TruncationPolicy::validate() const {
  if (stride < 1) throw Error("eviction stride must be >= 1");
  if (chunk_rows < 1 || chunk_cols < 1) throw Error("chunk grid must be at least 1x1");
}

std::size_t TruncationPolicy::effective_depth(std::size_t groups) const {
  return groups == 0 ? 0 : std::min(d_trunc, groups - 1);
}

std::string TruncationPolicy::describe() const {
  std::ostringstream os;
  os << "d_trunc=" << d_trunc << " mode=" << to_string(mode) << " stride=" << stride
     << " chunks=" << chunk_rows << 'x' << chunk_cols << " halo=" << to_string(halo);
  return os.str();
}

std::vector<Tensor> latent_data(std::span<const FrameGroupLatent> latents) {
  std::vector<Tensor> out;
  out.reserve(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i) {
    if (latents[i].group_index != i) throw Error("latent groups must be consecutive from 0");
    out.push_back(latents[i].data);
  }
  return out;
}

namespace {

struct Problem {
  std::span<const Tensor> latents;
  const Targets* targets = nullptr;
  const DecoderParams* params = nullptr;
  LossSpec loss;
  LossRegion region;
};

void check_problem(const Problem& p) {
  p.params->config.validate();
  p.loss.validate();
  if (p.latents.empty()) throw Error("no latent groups");
  if (p.loss.pixel_weight > 0.0 && p.targets->frames.size() != p.latents.size()) {
    throw Error("expected " + std::to_string(p.latents.size()) + " target frame groups, got " +
                std::to_string(p.targets->frames.size()));
  }
  if (p.loss.latent_weight > 0.0 && p.targets->latents.size() != p.latents.size()) {
    throw Error("expected " + std::to_string(p.latents.size()) + " target latents, got " +
                std::to_string(p.targets->latents.size()));
  }
  const Shape& s0 = p.latents.front().shape();
  for (const Tensor& z : p.latents) {
    if (z.shape() != s0) throw ShapeError("latent groups have inconsistent shapes");
  }
}

struct Slot {
  std::size_t group = 0;
  SegmentId seg = 0;
  NodeId latent = 0;
  NodeId loss = 0;
  std::vector<NodeId> cache_in;   // detached leaves; empty for the first group
  std::vector<NodeId> cache_out;  // trailing-slice nodes inside `seg`
};

/// Shared bookkeeping for every schedule: one tape, bound parameters and the
/// accumulated result.
class Engine {
 public:
  explicit Engine(const Problem& p) : p_(p), bound_(p.params->bind(tape_)) {
    check_problem(p);
    const Tensor& z0 = p.latents.front();
    result_.latent_grads.assign(p.latents.size(), Tensor(z0.shape()));
    result_.param_grad.assign(bound_.parameter_count(), 0.0);
    zero_cache_ = CacheState::zeros(p.params->config, z0.dim(2), z0.dim(3));
  }

  Tape& tape() { return tape_; }
  GradResult& result() { return result_; }
  MemoryTimeTrace& trace() { return trace_; }
  std::size_t groups() const { return p_.latents.size(); }

  /// Decodes group i into `seg`. With `detach`, the incoming cache becomes
  /// fresh leaves; otherwise it is consumed as-is (same-segment chaining).
  Slot forward(std::size_t i, SegmentId seg, const CacheState& prev, bool detach,
               CacheState& out_cache) {
    Slot slot;
    slot.group = i;
    slot.seg = seg;
    CacheState in;
    if (i == 0) {
      in = zero_cache_;
    } else if (detach) {
      for (const Tensor& c : prev.layers) {
        in.layers.push_back(tape_.detach(c));
        slot.cache_in.push_back(*in.layers.back().node());
      }
      in.detached = true;
    } else {
      in = prev;
    }
    Tensor z = tape_.leaf(p_.latents[i].constant());
    slot.latent = *z.node();
    const Recorder rec(tape_, seg);
    DecodeStep step = decode_step(rec, z, in, bound_);
    const Tensor* zt = p_.loss.latent_weight > 0.0 ? &p_.targets->latents[i] : nullptr;
    static const Tensor kNoFrames;
    const Tensor& ft = p_.loss.pixel_weight > 0.0 ? p_.targets->frames[i] : kNoFrames;
    Tensor loss = group_loss(rec, step.frames, z, ft, zt, p_.loss, p_.region,
                             p_.params->config.output_scale());
    result_.loss += loss.item();
    slot.loss = *loss.node();
    for (const Tensor& c : step.cache.layers) slot.cache_out.push_back(*c.node());
    out_cache = std::move(step.cache);
    return slot;
  }

  void absorb(const Slot& slot, const GradientStore& g) {
    add_into(result_.latent_grads[slot.group], g.at(slot.latent));
    const std::vector<double> pg = bound_.gather(g);
    for (std::size_t k = 0; k < pg.size(); ++k) result_.param_grad[k] += pg[k];
  }

  GradientStore loss_seed(const Slot& slot) const {
    GradientStore seeds;
    seeds.set(slot.loss, Tensor::scalar(1.0));
    return seeds;
  }

  static GradientStore cache_seed(const Slot& slot, const std::vector<Tensor>& cot) {
    GradientStore seeds;
    for (std::size_t m = 0; m < cot.size(); ++m) seeds.set(slot.cache_out[m], cot[m]);
    return seeds;
  }

  static std::vector<Tensor> cache_cotangent(const Slot& slot, const GradientStore& g) {
    std::vector<Tensor> cot;
    for (NodeId id : slot.cache_in) cot.push_back(g.at(id));
    return cot;
  }

 private:
  const Problem& p_;
  Tape tape_;
  DecoderParams bound_;
  GradResult result_;
  MemoryTimeTrace trace_;
  CacheState zero_cache_;
};

RunResult full_schedule(const Problem& p) {
  Engine e(p);
  Tape& tape = e.tape();
  const SegmentId seg = tape.open_segment();
  std::vector<Slot> slots;
  CacheState cache;
  double fwd_total = 0.0;
  for (std::size_t i = 0; i < e.groups(); ++i) {
    Stopwatch fw;
    CacheState next;
    slots.push_back(e.forward(i, seg, cache, /*detach=*/false, next));
    cache = std::move(next);
    const double fwd = fw.elapsed_ms();
    fwd_total += fwd;
    e.trace().push_sample(tape, i, 0, fwd, 0.0);
  }
  Stopwatch bw;
  GradientStore seeds;
  for (const Slot& s : slots) seeds.set(s.loss, Tensor::scalar(1.0));
  const GradientStore g = tape.backward(seg, seeds);
  for (const Slot& s : slots) {
    add_into(e.result().latent_grads[s.group], g.at(s.latent));
  }
  // Parameters are shared by all groups; absorb their gradient once.
  Slot none = slots.front();
  const Tensor keep = e.result().latent_grads[none.group];
  e.absorb(none, g);
  e.result().latent_grads[none.group] = keep;
  e.result().backward_steps = e.groups();
  const double bwd = bw.elapsed_ms();
  e.trace().samples.back().backward_ms = bwd;
  e.trace().samples.back().backward_steps = e.groups();
  e.trace().forward_ms = fwd_total;
  e.trace().backward_ms = bwd;
  e.trace().policy = "full";
  tape.release(seg);
  return {std::move(e.result()), std::move(e.trace())};
}

RunResult eager_schedule(const Problem& p, const TruncationPolicy& policy) {
  Engine e(p);
  Tape& tape = e.tape();
  const std::size_t T = e.groups();
  const std::size_t D = policy.effective_depth(T);
  std::deque<Slot> live;
  CacheState cache;
  std::size_t steps = 0;
  double fwd_total = 0.0, bwd_total = 0.0;
  for (std::size_t i = 0; i < T; ++i) {
    Stopwatch fw;
    CacheState next;
    live.push_back(e.forward(i, tape.open_segment(), cache, /*detach=*/true, next));
    cache = std::move(next);
    const double fwd = fw.elapsed_ms();

    Stopwatch bw;
    const Slot& cur = live.back();
    GradientStore g = tape.backward(cur.seg, e.loss_seed(cur));
    ++steps;
    e.absorb(cur, g);
    std::vector<Tensor> pending = Engine::cache_cotangent(cur, g);
    for (std::size_t k = 1; k <= std::min(D, i); ++k) {
      const Slot& s = live[live.size() - 1 - k];
      g = tape.backward(s.seg, Engine::cache_seed(s, pending));
      ++steps;
      e.absorb(s, g);
      pending = Engine::cache_cotangent(s, g);
    }
    pending.clear();
    const double bwd = bw.elapsed_ms();
    fwd_total += fwd;
    bwd_total += bwd;
    e.trace().push_sample(tape, i, steps, fwd, bwd);

    if (i >= D) {
      tape.release(live.front().seg);
      live.pop_front();
    }
  }
  for (const Slot& s : live) tape.release(s.seg);
  e.result().backward_steps = steps;
  e.trace().forward_ms = fwd_total;
  e.trace().backward_ms = bwd_total;
  e.trace().policy = policy.describe();
  return {std::move(e.result()), std::move(e.trace())};
}

/// Cotangent travelling down the cache chain on behalf of losses that may
/// reach back to `floor`. `pos` is the group whose cache output it seeds next.
struct Stream {
  std::size_t floor;
  std::size_t pos;
  std::vector<Tensor> cot;
};

RunResult deferred_schedule(const Problem& p, const TruncationPolicy& policy) {
  Engine e(p);
  Tape& tape = e.tape();
  const std::size_t T = e.groups();
  const std::size_t D = policy.effective_depth(T);
  const std::size_t s = policy.stride;
  std::deque<Slot> live;
  std::vector<Stream> streams;
  CacheState cache;
  std::size_t steps = 0;
  double fwd_total = 0.0, bwd_total = 0.0;

  auto slot_of = [&](std::size_t group) -> const Slot& {
    return live[group - live.front().group];
  };

  // Carries every pending stream down to its floor, one traversal per segment.
  auto sweep = [&]() {
    if (streams.empty()) return;
    std::size_t top = 0, bottom = streams.front().floor;
    for (const Stream& st : streams) {
      top = std::max(top, st.pos);
      bottom = std::min(bottom, st.floor);
    }
    for (std::size_t g = top + 1; g-- > bottom;) {
      std::map<std::size_t, Stream> active;  // keyed by floor; equal floors merge
      std::vector<Stream> waiting;
      for (Stream& st : streams) {
        if (st.pos != g) {
          waiting.push_back(std::move(st));
          continue;
        }
        auto [it, inserted] = active.try_emplace(st.floor, std::move(st));
        if (!inserted) {
          for (std::size_t m = 0; m < it->second.cot.size(); ++m) add_into(it->second.cot[m], st.cot[m]);
        }
      }
      streams = std::move(waiting);
      if (active.empty()) continue;
      const Slot& slot = slot_of(g);
      std::vector<GradientStore> seeds;
      for (const auto& [floor, st] : active) seeds.push_back(Engine::cache_seed(slot, st.cot));
      const std::vector<GradientStore> grads = tape.backward_streams(slot.seg, seeds);
      ++steps;
      std::size_t k = 0;
      for (auto& [floor, st] : active) {
        e.absorb(slot, grads[k]);
        if (g > floor && g > 0) {
          streams.push_back({floor, g - 1, Engine::cache_cotangent(slot, grads[k])});
        }
        ++k;
      }
    }
  };

  for (std::size_t i = 0; i < T; ++i) {
    Stopwatch fw;
    CacheState next;
    live.push_back(e.forward(i, tape.open_segment(), cache, /*detach=*/true, next));
    cache = std::move(next);
    const double fwd = fw.elapsed_ms();

    Stopwatch bw;
    const Slot& cur = live.back();
    const GradientStore g = tape.backward(cur.seg, e.loss_seed(cur));
    ++steps;
    e.absorb(cur, g);
    if (i > 0 && D > 0) streams.push_back({i - std::min(i, D), i - 1, Engine::cache_cotangent(cur, g)});

    const bool evict = live.size() == D + s;
    if (evict) sweep();
    const double bwd = bw.elapsed_ms();
    fwd_total += fwd;
    bwd_total += bwd;
    e.trace().push_sample(tape, i, steps, fwd, bwd);
    if (evict) {
      for (std::size_t k = 0; k < s; ++k) {
        tape.release(live.front().seg);
        live.pop_front();
      }
    }
  }
  Stopwatch flush;
  sweep();
  bwd_total += flush.elapsed_ms();
  e.trace().observe(tape);
  for (const Slot& sl : live) tape.release(sl.seg);
  e.result().backward_steps = steps;
  e.trace().forward_ms = fwd_total;
  e.trace().backward_ms = bwd_total;
  e.trace().policy = policy.describe();
  return {std::move(e.result()), std::move(e.trace())};
}

RunResult schedule(const Problem& p, const TruncationPolicy& policy) {
  return policy.mode == EvictionMode::Eager ? eager_schedule(p, policy) : deferred_schedule(p, policy);
}

Problem make_problem(std::span<const Tensor> latents, const Targets& targets,
                     const DecoderParams& params, const LossSpec& loss) {
  Problem p;
  p.latents = latents;
  p.targets = &targets;
  p.params = &params;
  p.loss = loss;
  if (!latents.empty()) p.region = LossRegion::whole(latents.front());
  return p;
}

}  // namespace

RunResult run_full_backprop(std::span<const Tensor> latents, const Targets& targets,
                            const DecoderParams& params, const LossSpec& loss) {
  return full_schedule(make_problem(latents, targets, params, loss));
}

RunResult run_truncated_backprop(std::span<const Tensor> latents, const Targets& targets,
                                 const DecoderParams& params, const LossSpec& loss,
                                 const TruncationPolicy& policy) {
  policy.validate();
  if (policy.mode != EvictionMode::Eager) throw Error("run_truncated_backprop requires eager mode");
  return eager_schedule(make_problem(latents, targets, params, loss), policy);
}

RunResult run_deferred(std::span<const Tensor> latents, const Targets& targets,
                       const DecoderParams& params, const LossSpec& loss,
                       const TruncationPolicy& policy) {
  policy.validate();
  if (policy.mode != EvictionMode::Deferred) throw Error("run_deferred requires deferred mode");
  return deferred_schedule(make_problem(latents, targets, params, loss), policy);
}

RunResult spatial_chunk_backward(std::span<const Tensor> latents, const Targets& targets,
                                 const DecoderParams& params, const LossSpec& loss,
                                 const TruncationPolicy& policy) {
  policy.validate();
  const Problem whole = make_problem(latents, targets, params, loss);
  check_problem(whole);
  if (policy.chunk_rows == 1 && policy.chunk_cols == 1) return schedule(whole, policy);
  if (!loss.elementwise()) {
    throw Error("spatial chunking needs an elementwise pixel loss (mse or mae)");
  }
  const DecoderConfig& cfg = params.config;
  const Tensor& z0 = latents.front();
  const std::size_t H = z0.dim(2), W = z0.dim(3);
  if (H % policy.chunk_rows != 0 || W % policy.chunk_cols != 0) {
    throw Error("chunk grid " + std::to_string(policy.chunk_rows) + "x" +
                std::to_string(policy.chunk_cols) + " does not divide latent extent " +
                std::to_string(H) + "x" + std::to_string(W));
  }
  const std::size_t ch = H / policy.chunk_rows, cw = W / policy.chunk_cols;
  const std::size_t halo = policy.halo == HaloMode::Full ? receptive_halo(cfg) : 0;
  if (ch < halo || cw < halo) {
    throw Error("chunk " + std::to_string(ch) + "x" + std::to_string(cw) + " is smaller than halo " +
                std::to_string(halo));
  }
  const std::size_t scale = cfg.output_scale();
  const Recorder eval;

  RunResult total;
  total.grads.latent_grads.assign(latents.size(), Tensor(z0.shape()));
  total.grads.param_grad.assign(params.parameter_count(), 0.0);
  total.trace.policy = policy.describe();

  for (std::size_t r = 0; r < policy.chunk_rows; ++r) {
    for (std::size_t c = 0; c < policy.chunk_cols; ++c) {
      const std::size_t h0 = r * ch, w0 = c * cw;
      const std::size_t ph0 = h0 >= halo ? h0 - halo : 0, pw0 = w0 >= halo ? w0 - halo : 0;
      const std::size_t ph1 = std::min(H, h0 + ch + halo), pw1 = std::min(W, w0 + cw + halo);
      std::vector<Tensor> sub_latents;
      Targets sub_targets;
      for (std::size_t i = 0; i < latents.size(); ++i) {
        sub_latents.push_back(eval.crop_space(latents[i].constant(), ph0, pw0, ph1 - ph0, pw1 - pw0));
        if (loss.pixel_weight > 0.0) {
          sub_targets.frames.push_back(
              eval.crop_space(targets.frames[i].constant(), h0 * scale, w0 * scale, ch * scale, cw * scale));
        }
        if (loss.latent_weight > 0.0) {
          sub_targets.latents.push_back(eval.crop_space(targets.latents[i].constant(), h0, w0, ch, cw));
        }
      }
      Problem sub = make_problem(sub_latents, sub_targets, params, loss);
      sub.region = {h0 - ph0, w0 - pw0, ch, cw,
                    static_cast<double>(ch * cw) / static_cast<double>(H * W)};
      RunResult part = schedule(sub, policy);

      for (std::size_t i = 0; i < latents.size(); ++i) {
        const Tensor& g = part.grads.latent_grads[i];
        Tensor& dst = total.grads.latent_grads[i];
        for (std::size_t k = 0; k < g.dim(0); ++k)
          for (std::size_t t = 0; t < g.dim(1); ++t)
            for (std::size_t y = 0; y < g.dim(2); ++y)
              for (std::size_t x = 0; x < g.dim(3); ++x) dst.at(k, t, ph0 + y, pw0 + x) += g.at(k, t, y, x);
      }
      for (std::size_t k = 0; k < total.grads.param_grad.size(); ++k) {
        total.grads.param_grad[k] += part.grads.param_grad[k];
      }
      total.grads.loss += part.grads.loss;
      total.grads.backward_steps += part.grads.backward_steps;
      total.trace.forward_ms += part.trace.forward_ms;
      total.trace.backward_ms += part.trace.backward_ms;
      total.trace.merge_peak(part.trace);
      for (const StepSample& smp : part.trace.samples) total.trace.samples.push_back(smp);
    }
  }
  return total;
}

RunResult run_chopgrad(std::span<const Tensor> latents, const Targets& targets,
                       const DecoderParams& params, const LossSpec& loss,
                       const TruncationPolicy& policy) {
  policy.validate();
  if (policy.chunk_rows > 1 || policy.chunk_cols > 1) {
    return spatial_chunk_backward(latents, targets, params, loss, policy);
  }
  return schedule(make_problem(latents, targets, params, loss), policy);
}

}  // namespace chopgrad
