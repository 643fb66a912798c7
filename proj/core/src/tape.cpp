#include "chopgrad/tape.hpp"

#include <algorithm>
#include <string>
#include <unordered_map>

namespace chopgrad {

void GradientStore::accumulate(NodeId id, const Tensor& grad, double scale) {
  auto it = grads_.find(id);
  if (it == grads_.end()) {
    grads_.emplace(id, scaled(grad, scale));
  } else {
    add_into(it->second, grad, scale);
  }
}

void GradientStore::set(NodeId id, Tensor grad) {
  grad.set_node(std::nullopt);
  grads_.insert_or_assign(id, std::move(grad));
}

const Tensor* GradientStore::find(NodeId id) const {
  auto it = grads_.find(id);
  return it == grads_.end() ? nullptr : &it->second;
}

const Tensor& GradientStore::at(NodeId id) const {
  const Tensor* t = find(id);
  if (!t) throw Error("no gradient stored for node " + std::to_string(id));
  return *t;
}

SegmentId Tape::open_segment() {
  segments_.emplace_back();
  live_segments_.fetch_add(1);
  return static_cast<SegmentId>(segments_.size() - 1);
}

NodeId Tape::new_node(const Shape& shape, std::int64_t owner) {
  node_shapes_.push_back(shape);
  node_owner_.push_back(owner);
  node_record_.push_back(0);
  return static_cast<NodeId>(node_shapes_.size());
}

Tensor Tape::leaf(Tensor t) {
  t.set_node(new_node(t.shape(), kLeafOwner));
  return t;
}

Tensor Tape::detach(const Tensor& t) { return leaf(t.constant()); }

const Tape::Segment& Tape::segment(SegmentId seg) const {
  if (seg >= segments_.size()) throw Error("unknown segment " + std::to_string(seg));
  return segments_[seg];
}

Tape::Segment& Tape::segment(SegmentId seg) {
  if (seg >= segments_.size()) throw Error("unknown segment " + std::to_string(seg));
  return segments_[seg];
}

Tensor Tape::record(SegmentId seg, OpKind kind, std::span<const Tensor* const> inputs,
                    const OpAttrs& attrs) {
  Segment& s = segment(seg);
  if (s.released) {
    throw ReleasedSegmentError("record into released segment " + std::to_string(seg));
  }
  for (const Tensor* in : inputs) {
    if (!in->node()) continue;
    const NodeId id = *in->node();
    if (id == 0 || id > node_owner_.size()) throw Error("input carries unknown node id");
    const std::int64_t owner = node_owner_[id - 1];
    if (owner != kLeafOwner && owner != static_cast<std::int64_t>(seg)) {
      throw Error("input node " + std::to_string(id) + " belongs to segment " +
                  std::to_string(owner) + ", not " + std::to_string(seg) + "; detach it first");
    }
  }

  OpForward fwd = op_forward(kind, inputs, attrs);

  Record rec{kind, attrs, {}, {}, 0, std::move(fwd.saved)};
  rec.inputs.reserve(inputs.size());
  rec.input_shapes.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    rec.inputs.push_back(in->node());
    rec.input_shapes.push_back(in->shape());
    if (in->node() && node_owner_[*in->node() - 1] == kLeafOwner) {
      auto it = std::lower_bound(s.leaves.begin(), s.leaves.end(), *in->node());
      if (it == s.leaves.end() || *it != *in->node()) s.leaves.insert(it, *in->node());
    }
  }
  std::size_t bytes = 0;
  for (const Tensor& t : rec.saved) bytes += t.bytes();

  const NodeId out = new_node(fwd.output.shape(), static_cast<std::int64_t>(seg));
  node_record_[out - 1] = s.records.size();
  rec.output = out;
  s.records.push_back(std::move(rec));
  s.bytes += bytes;
  live_bytes_.fetch_add(bytes);

  fwd.output.set_node(out);
  return std::move(fwd.output);
}

GradientStore Tape::backward(SegmentId seg, const GradientStore& seeds) const {
  return std::move(run_backward(seg, std::span<const GradientStore>(&seeds, 1)).front());
}

std::vector<GradientStore> Tape::backward_streams(SegmentId seg,
                                                  std::span<const GradientStore> seeds) const {
  return run_backward(seg, seeds);
}

std::vector<GradientStore> Tape::run_backward(SegmentId seg,
                                              std::span<const GradientStore> seeds) const {
  const Segment& s = segment(seg);
  if (s.released) {
    throw ReleasedSegmentError("backward through released segment " + std::to_string(seg));
  }
  using CotMap = std::unordered_map<NodeId, Tensor>;
  std::vector<CotMap> cots(seeds.size());
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    for (const auto& [id, g] : seeds[k]) {
      if (producer(id) != std::optional<SegmentId>(seg)) {
        throw Error("seed node " + std::to_string(id) + " is not produced by segment " +
                    std::to_string(seg));
      }
      if (g.shape() != node_shape(id)) {
        throw ShapeError("seed for node " + std::to_string(id) + " has shape " +
                         to_string(g.shape()) + ", node has " + to_string(node_shape(id)));
      }
      cots[k].emplace(id, g.constant());
    }
  }

  std::vector<Tensor*> grads;
  for (auto rit = s.records.rbegin(); rit != s.records.rend(); ++rit) {
    const Record& rec = *rit;
    for (CotMap& cot : cots) {
      auto out_it = cot.find(rec.output);
      if (out_it == cot.end()) continue;
      grads.assign(rec.inputs.size(), nullptr);
      for (std::size_t i = 0; i < rec.inputs.size(); ++i) {
        if (!rec.inputs[i]) continue;
        auto [it, inserted] = cot.try_emplace(*rec.inputs[i]);
        if (inserted) it->second = Tensor::zeros(rec.input_shapes[i]);
        grads[i] = &it->second;
      }
      op_vjp(rec.kind, rec.attrs, rec.input_shapes, rec.saved, out_it->second, grads);
      cot.erase(rec.output);
    }
  }

  std::vector<GradientStore> result(seeds.size());
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    for (NodeId leaf_id : s.leaves) {
      auto it = cots[k].find(leaf_id);
      if (it != cots[k].end()) {
        result[k].set(leaf_id, std::move(it->second));
      } else {
        result[k].set(leaf_id, Tensor::zeros(node_shape(leaf_id)));
      }
    }
  }
  return result;
}

void Tape::release(SegmentId seg) {
  Segment& s = segment(seg);
  if (s.released) return;
  live_bytes_.fetch_sub(s.bytes);
  live_segments_.fetch_sub(1);
  std::vector<Record>().swap(s.records);
  s.released = true;
}

bool Tape::released(SegmentId seg) const { return segment(seg).released; }

bool Tape::is_leaf(NodeId id) const {
  return id >= 1 && id <= node_owner_.size() && node_owner_[id - 1] == kLeafOwner;
}

std::optional<SegmentId> Tape::producer(NodeId id) const {
  if (id == 0 || id > node_owner_.size() || node_owner_[id - 1] == kLeafOwner) return std::nullopt;
  return static_cast<SegmentId>(node_owner_[id - 1]);
}

const Shape& Tape::node_shape(NodeId id) const {
  if (id == 0 || id > node_shapes_.size()) throw Error("unknown node " + std::to_string(id));
  return node_shapes_[id - 1];
}

std::size_t Tape::segment_bytes(SegmentId seg) const { return segment(seg).bytes; }

std::size_t Tape::segment_records(SegmentId seg) const { return segment(seg).records.size(); }

std::span<const NodeId> Tape::segment_leaves(SegmentId seg) const { return segment(seg).leaves; }

Tensor Recorder::apply(OpKind kind, std::span<const Tensor* const> inputs,
                       const OpAttrs& attrs) const {
  if (tape_) return tape_->record(seg_, kind, inputs, attrs);
  return std::move(op_forward(kind, inputs, attrs).output);
}

Tensor Recorder::conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias) const {
  const Tensor* in[] = {&x, &kernel, &bias};
  return apply(OpKind::Conv3d, in);
}

Tensor Recorder::upsample2x(const Tensor& x) const {
  const Tensor* in[] = {&x};
  return apply(OpKind::Upsample2x, in);
}

Tensor Recorder::temporal_expand(const Tensor& x, const Tensor& weight, const Tensor& bias) const {
  const Tensor* in[] = {&x, &weight, &bias};
  return apply(OpKind::TemporalExpand, in);
}

Tensor Recorder::concat_time(std::span<const Tensor* const> parts) const {
  return apply(OpKind::ConcatTime, parts);
}

Tensor Recorder::concat_time(const Tensor& a, const Tensor& b) const {
  const Tensor* in[] = {&a, &b};
  return apply(OpKind::ConcatTime, in);
}

Tensor Recorder::slice_time(const Tensor& x, std::size_t begin, std::size_t length) const {
  OpAttrs a;
  a.begin = begin;
  a.length = length;
  const Tensor* in[] = {&x};
  return apply(OpKind::SliceTime, in, a);
}

Tensor Recorder::crop_space(const Tensor& x, std::size_t h0, std::size_t w0, std::size_t height,
                            std::size_t width) const {
  OpAttrs a;
  a.h0 = h0;
  a.w0 = w0;
  a.height = height;
  a.width = width;
  const Tensor* in[] = {&x};
  return apply(OpKind::CropSpace, in, a);
}

Tensor Recorder::add(const Tensor& a, const Tensor& b) const {
  const Tensor* in[] = {&a, &b};
  return apply(OpKind::Add, in);
}

Tensor Recorder::mul(const Tensor& a, const Tensor& b) const {
  const Tensor* in[] = {&a, &b};
  return apply(OpKind::Mul, in);
}

Tensor Recorder::scale(const Tensor& x, double factor) const {
  OpAttrs a;
  a.scalar = factor;
  const Tensor* in[] = {&x};
  return apply(OpKind::Scale, in, a);
}

Tensor Recorder::leaky_relu(const Tensor& x, double slope) const {
  OpAttrs a;
  a.scalar = slope;
  const Tensor* in[] = {&x};
  return apply(OpKind::LeakyRelu, in, a);
}

Tensor Recorder::spatial_diff(const Tensor& x, std::size_t axis, std::size_t step) const {
  OpAttrs a;
  a.axis = axis;
  a.step = step;
  const Tensor* in[] = {&x};
  return apply(OpKind::SpatialDiff, in, a);
}

Tensor Recorder::sum(const Tensor& x) const {
  const Tensor* in[] = {&x};
  return apply(OpKind::Sum, in);
}

Tensor Recorder::mse(const Tensor& pred, const Tensor& target) const {
  const Tensor* in[] = {&pred, &target};
  return apply(OpKind::Mse, in);
}

Tensor Recorder::mae(const Tensor& pred, const Tensor& target) const {
  const Tensor* in[] = {&pred, &target};
  return apply(OpKind::Mae, in);
}

}  // namespace chopgrad
