#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "chopgrad/ops.hpp"
#include "chopgrad/tensor.hpp"

namespace chopgrad {

using SegmentId = std::uint32_t;

class ReleasedSegmentError : public Error {
 public:
  using Error::Error;
};

/// Map from node id to gradient. Iteration order is node-id order, so any
/// reduction over a store is deterministic.
class GradientStore {
 public:
  void accumulate(NodeId id, const Tensor& grad, double scale = 1.0);
  void set(NodeId id, Tensor grad);
  bool contains(NodeId id) const { return grads_.count(id) != 0; }
  const Tensor* find(NodeId id) const;
  const Tensor& at(NodeId id) const;
  std::size_t size() const { return grads_.size(); }
  bool empty() const { return grads_.empty(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::map<NodeId, Tensor> grads_;
};

/// Reverse-mode tape split into independently releasable segments.
///
/// Nodes are either leaves (latents, parameters, detached caches) or outputs of
/// a record in exactly one segment. A segment may only consume leaves and its
/// own outputs, so backward over a segment never leaves it. Saved activations
/// are accounted per segment; the tape-wide live counter is the sum over
/// unreleased segments.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  SegmentId open_segment();

  /// Registers `t` as a fresh leaf and returns it with the node id attached.
  Tensor leaf(Tensor t);
  /// Leaf holding the same values as `t`; gradients stop here.
  Tensor detach(const Tensor& t);

  Tensor record(SegmentId seg, OpKind kind, std::span<const Tensor* const> inputs,
                const OpAttrs& attrs = {});

  /// Cotangents at every leaf the segment consumed (zero where unreached).
  GradientStore backward(SegmentId seg, const GradientStore& seeds) const;

  /// Several independent seed sets in one reverse traversal of the segment.
  std::vector<GradientStore> backward_streams(SegmentId seg,
                                              std::span<const GradientStore> seeds) const;

  void release(SegmentId seg);

  bool released(SegmentId seg) const;
  bool is_leaf(NodeId id) const;
  std::optional<SegmentId> producer(NodeId id) const;
  const Shape& node_shape(NodeId id) const;
  std::size_t segment_bytes(SegmentId seg) const;
  std::size_t segment_records(SegmentId seg) const;
  std::span<const NodeId> segment_leaves(SegmentId seg) const;

  std::size_t live_activation_bytes() const { return live_bytes_.load(); }
  std::size_t live_segments() const { return live_segments_.load(); }
  std::size_t segment_count() const { return segments_.size(); }

 private:
  struct Record {
    OpKind kind;
    OpAttrs attrs;
    std::vector<std::optional<NodeId>> inputs;
    std::vector<Shape> input_shapes;
    NodeId output;
    std::vector<Tensor> saved;
  };

  struct Segment {
    std::vector<Record> records;
    std::vector<NodeId> leaves;  // sorted, unique
    std::size_t bytes = 0;
    bool released = false;
  };

  static constexpr std::int64_t kLeafOwner = -1;

  NodeId new_node(const Shape& shape, std::int64_t owner);
  const Segment& segment(SegmentId seg) const;
  Segment& segment(SegmentId seg);
  std::vector<GradientStore> run_backward(SegmentId seg,
                                          std::span<const GradientStore> seeds) const;

  std::vector<Segment> segments_;
  std::vector<Shape> node_shapes_;       // indexed by id - 1
  std::vector<std::int64_t> node_owner_;  // segment id or kLeafOwner
  std::vector<std::size_t> node_record_;  // record index within owner
  std::atomic<std::size_t> live_bytes_{0};
  std::atomic<std::size_t> live_segments_{0};
};

/// Records ops into one segment of a tape, or evaluates them without
/// recording when constructed without a tape.
class Recorder {
 public:
  Recorder() = default;
  Recorder(Tape& tape, SegmentId seg) : tape_(&tape), seg_(seg) {}

  bool recording() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  SegmentId segment() const { return seg_; }

  Tensor apply(OpKind kind, std::span<const Tensor* const> inputs, const OpAttrs& attrs = {}) const;

  Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias) const;
  Tensor upsample2x(const Tensor& x) const;
  Tensor temporal_expand(const Tensor& x, const Tensor& weight, const Tensor& bias) const;
  Tensor concat_time(std::span<const Tensor* const> parts) const;
  Tensor concat_time(const Tensor& a, const Tensor& b) const;
  Tensor slice_time(const Tensor& x, std::size_t begin, std::size_t length) const;
  Tensor crop_space(const Tensor& x, std::size_t h0, std::size_t w0, std::size_t height,
                    std::size_t width) const;
  Tensor add(const Tensor& a, const Tensor& b) const;
  Tensor mul(const Tensor& a, const Tensor& b) const;
  Tensor scale(const Tensor& x, double factor) const;
  Tensor leaky_relu(const Tensor& x, double slope) const;
  Tensor spatial_diff(const Tensor& x, std::size_t axis, std::size_t step) const;
  Tensor sum(const Tensor& x) const;
  Tensor mse(const Tensor& pred, const Tensor& target) const;
  Tensor mae(const Tensor& pred, const Tensor& target) const;

 private:
  Tape* tape_ = nullptr;
  SegmentId seg_ = 0;
};

}  // namespace chopgrad
