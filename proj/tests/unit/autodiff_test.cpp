#include <gtest/gtest.h>

#include <functional>

#include "chopgrad/finite_difference.hpp"
#include "chopgrad/tape.hpp"
#include "fixtures.hpp"

namespace chopgrad {
namespace {

using testing::random_tensor;

/// Builds op(inputs) with every input a leaf, reduces it against a fixed
/// random cotangent and returns the scalar.
using OpBuilder = std::function<Tensor(const Recorder&, const std::vector<Tensor>&)>;

struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  OpBuilder build;
  bool positive_away_from_kinks = false;
};

Tensor reduce(const Recorder& rec, const Tensor& y, const Tensor& w) {
  if (y.size() == 1) return rec.scale(y, w[0]);
  return rec.sum(rec.mul(y, w));
}

std::vector<OpCase> op_cases() {
  const Shape x{2, 3, 4, 4};
  return {
      {"conv3d", {x, {3, 2, 2, 3, 3}, {3}},
       [](const Recorder& r, const std::vector<Tensor>& in) { return r.conv3d(in[0], in[1], in[2]); }},
      {"conv3d_1x1", {x, {2, 2, 3, 1, 1}, {2}},
       [](const Recorder& r, const std::vector<Tensor>& in) { return r.conv3d(in[0], in[1], in[2]); }},
      {"upsample2x", {x}, [](const Recorder& r, const std::vector<Tensor>& in) { return r.upsample2x(in[0]); }},
      {"temporal_expand", {{3, 2, 4, 4}, {4, 2, 3}, {4, 2}},
       [](const Recorder& r, const std::vector<Tensor>& in) { return r.temporal_expand(in[0], in[1], in[2]); }},
      {"concat_time", {x, {2, 1, 4, 4}},
       [](const Recorder& r, const std::vector<Tensor>& in) { return r.concat_time(in[0], in[1]); }},
      {"slice_time", {x}, [](const Recorder& r, const std::vector<Tensor>& in) { return r.slice_time(in[0], 1, 2); }},
      {"crop_space", {x},
       [](const Recorder& r, const std::vector<Tensor>& in) { return r.crop_space(in[0], 1, 0, 2, 3); }},
      {"add", {x, x}, [](const Recorder& r, const std::vector<Tensor>& in) { return r.add(in[0], in[1]); }},
      {"mul", {x, x}, [](const Recorder& r, const std::vector<Tensor>& in) { return r.mul(in[0], in[1]); }},
      {"scale", {x}, [](const Recorder& r, const std::vector<Tensor>& in) { return r.scale(in[0], -1.7); }},
      {"leaky_relu", {x}, [](const Recorder& r, const std::vector<Tensor>& in) { return r.leaky_relu(in[0], 0.2); }},
      {"spatial_diff_h", {x},
       [](const Recorder& r, const std::vector<Tensor>& in) { return r.spatial_diff(in[0], 2, 1); }},
      {"spatial_diff_w2", {x},
       [](const Recorder& r, const std::vector<Tensor>& in) { return r.spatial_diff(in[0], 3, 2); }},
      {"sum", {x}, [](const Recorder& r, const std::vector<Tensor>& in) { return r.sum(in[0]); }},
      {"mse", {x, x}, [](const Recorder& r, const std::vector<Tensor>& in) { return r.mse(in[0], in[1]); }},
      {"mae", {x, x}, [](const Recorder& r, const std::vector<Tensor>& in) { return r.mae(in[0], in[1]); }},
  };
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesFiniteDifferencesOnTenSeeds) {
  const OpCase c = op_cases()[GetParam()];
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed * 31 + GetParam());
    std::vector<Tensor> inputs;
    for (const Shape& s : c.shapes) inputs.push_back(random_tensor(s, rng));
    const Tensor probe = c.build(Recorder(), inputs);
    const Tensor w = random_tensor(probe.shape(), rng);

    Tape tape;
    const SegmentId seg = tape.open_segment();
    std::vector<Tensor> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
    const Tensor out = reduce(Recorder(tape, seg), c.build(Recorder(tape, seg), leaves), w);
    GradientStore seeds;
    seeds.set(*out.node(), Tensor::scalar(1.0));
    const GradientStore g = tape.backward(seg, seeds);

    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const auto f = [&](const Tensor& xk) {
        std::vector<Tensor> in = inputs;
        in[k] = xk;
        return reduce(Recorder(), c.build(Recorder(), in), w);
      };
      const Tensor fd = finite_difference_grad(f, inputs[k], 1e-5);
      EXPECT_LT(relative_error(g.at(*leaves[k].node()), fd), 1e-4)
          << c.name << " input " << k << " seed " << seed;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, op_cases().size()),
                         [](const auto& info) { return op_cases()[info.param].name; });

TEST(Ops, AddExample) {
  const Recorder eval;
  const Tensor y = eval.add(Tensor({2}, {1, 2}), Tensor({2}, {3, 4}));
  EXPECT_EQ(y.storage(), (std::vector<double>{4, 6}));
}

TEST(Ops, ConcatTimeShapeAndPlacement) {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2, 3, 3, 3}, rng);
  const Tensor y = Recorder().concat_time(a, b);
  EXPECT_EQ(y.shape(), (Shape{2, 5, 3, 3}));
  EXPECT_EQ(y.at(1, 1, 2, 0), a.at(1, 1, 2, 0));
  EXPECT_EQ(y.at(1, 2, 2, 0), b.at(1, 0, 2, 0));
}

TEST(Ops, ZeroKernelConvIsZero) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({2, 3, 5, 5}, rng);
  const Tensor y = Recorder().conv3d(x, Tensor({4, 2, 2, 3, 3}), Tensor({4}));
  EXPECT_EQ(y.shape(), (Shape{4, 2, 5, 5}));
  EXPECT_EQ(max_abs(y), 0.0);
}

TEST(Ops, ShapeMismatchThrows) {
  EXPECT_THROW(Recorder().add(Tensor({2}), Tensor({3})), ShapeError);
  EXPECT_THROW(Recorder().conv3d(Tensor({2, 3, 5, 5}), Tensor({4, 3, 2, 3, 3}), Tensor({4})), ShapeError);
  EXPECT_THROW(Recorder().slice_time(Tensor({1, 2, 1, 1}), 1, 2), ShapeError);
}

TEST(Tape, LinearSeedScaling) {
  Tape tape;
  const SegmentId seg = tape.open_segment();
  const Recorder rec(tape, seg);
  std::mt19937_64 rng(3);
  const Tensor x = tape.leaf(random_tensor({2, 2, 4, 4}, rng));
  const Tensor k = tape.leaf(random_tensor({2, 2, 2, 3, 3}, rng));
  const Tensor y = rec.leaky_relu(rec.conv3d(x, k, Tensor({2})), 0.2);
  const Tensor g = random_tensor(y.shape(), rng);
  GradientStore s1, s2;
  s1.set(*y.node(), g);
  s2.set(*y.node(), scaled(g, -2.5));
  const GradientStore a = tape.backward(seg, s1), b = tape.backward(seg, s2);
  for (NodeId id : {*x.node(), *k.node()}) {
    EXPECT_LT(max_abs_diff(scaled(a.at(id), -2.5), b.at(id)), 1e-12);
  }
}

TEST(Tape, ThreeTimesX) {
  Tape tape;
  const SegmentId seg = tape.open_segment();
  const Tensor x = tape.leaf(Tensor::scalar(2.0));
  const Tensor y = Recorder(tape, seg).scale(x, 3.0);
  GradientStore seeds;
  seeds.set(*y.node(), Tensor::scalar(1.0));
  EXPECT_DOUBLE_EQ(tape.backward(seg, seeds).at(*x.node()).item(), 3.0);
}

TEST(Tape, ConcatRoutesWithoutCrossTalk) {
  Tape tape;
  const SegmentId seg = tape.open_segment();
  const Tensor a = tape.leaf(Tensor({1, 2, 1, 1}, 1.0)), b = tape.leaf(Tensor({1, 1, 1, 1}, 1.0));
  const Tensor y = Recorder(tape, seg).concat_time(a, b);
  GradientStore seeds;
  seeds.set(*y.node(), Tensor({1, 3, 1, 1}, {10, 20, 30}));
  const GradientStore g = tape.backward(seg, seeds);
  EXPECT_EQ(g.at(*a.node()).storage(), (std::vector<double>{10, 20}));
  EXPECT_EQ(g.at(*b.node()).storage(), (std::vector<double>{30}));
}

TEST(Tape, DetachStopsGradient) {
  Tape tape;
  const SegmentId s0 = tape.open_segment(), s1 = tape.open_segment();
  const Tensor x = tape.leaf(Tensor({3}, 1.5));
  const Tensor y = Recorder(tape, s0).scale(x, 2.0);
  const Tensor d = tape.detach(y);
  EXPECT_EQ(d.storage(), y.storage());
  EXPECT_TRUE(tape.is_leaf(*d.node()));
  EXPECT_TRUE(tape.is_leaf(*tape.detach(x).node()));
  const Tensor z = Recorder(tape, s1).sum(d);
  GradientStore seeds;
  seeds.set(*z.node(), Tensor::scalar(1.0));
  const GradientStore g = tape.backward(s1, seeds);
  EXPECT_EQ(g.at(*d.node()).storage(), (std::vector<double>{1, 1, 1}));
  EXPECT_FALSE(g.contains(*x.node()));
}

TEST(Tape, CrossSegmentUseRequiresDetach) {
  Tape tape;
  const SegmentId s0 = tape.open_segment(), s1 = tape.open_segment();
  const Tensor x = tape.leaf(Tensor({3}, 1.0));
  const Tensor y = Recorder(tape, s0).scale(x, 2.0);
  EXPECT_THROW(Recorder(tape, s1).sum(y), Error);
}

TEST(Tape, ReleaseAccountingIsExact) {
  Tape tape;
  std::mt19937_64 rng(4);
  std::vector<SegmentId> segs;
  std::vector<std::size_t> sizes;
  for (int i = 0; i < 3; ++i) {
    const SegmentId seg = tape.open_segment();
    const Recorder rec(tape, seg);
    const Tensor x = tape.leaf(random_tensor({2, 2, 3, 3}, rng));
    rec.mse(rec.leaky_relu(rec.mul(x, x), 0.2), Tensor({2, 2, 3, 3}));
    segs.push_back(seg);
    sizes.push_back(tape.segment_bytes(seg));
    EXPECT_GT(sizes.back(), 0u);
  }
  EXPECT_EQ(tape.live_activation_bytes(), sizes[0] + sizes[1] + sizes[2]);
  tape.release(segs[1]);
  EXPECT_EQ(tape.live_activation_bytes(), sizes[0] + sizes[2]);
  EXPECT_EQ(tape.live_segments(), 2u);
  tape.release(segs[1]);
  EXPECT_EQ(tape.live_activation_bytes(), sizes[0] + sizes[2]);
  EXPECT_THROW(tape.backward(segs[1], GradientStore{}), ReleasedSegmentError);
  tape.release(segs[0]);
  tape.release(segs[2]);
  EXPECT_EQ(tape.live_activation_bytes(), 0u);
  EXPECT_EQ(tape.live_segments(), 0u);
}

TEST(Tape, SeedShapeMismatchThrows) {
  Tape tape;
  const SegmentId seg = tape.open_segment();
  const Tensor x = tape.leaf(Tensor({3}, 1.0));
  const Tensor y = Recorder(tape, seg).scale(x, 2.0);
  GradientStore seeds;
  seeds.set(*y.node(), Tensor({4}));
  EXPECT_THROW(tape.backward(seg, seeds), ShapeError);
}

TEST(Tape, StreamsEqualSeparateBackwards) {
  Tape tape;
  const SegmentId seg = tape.open_segment();
  const Recorder rec(tape, seg);
  std::mt19937_64 rng(5);
  const Tensor x = tape.leaf(random_tensor({2, 2, 4, 4}, rng));
  const Tensor y = rec.upsample2x(rec.leaky_relu(x, 0.2));
  std::vector<GradientStore> seeds(3);
  for (auto& s : seeds) s.set(*y.node(), random_tensor(y.shape(), rng));
  const auto batched = tape.backward_streams(seg, seeds);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(batched[k].at(*x.node()).storage(), tape.backward(seg, seeds[k]).at(*x.node()).storage());
  }
}

TEST(GradientStore, AccumulationIsAdditive) {
  GradientStore g;
  g.accumulate(7, Tensor({2}, {1.0, -2.0}));
  g.accumulate(7, Tensor({2}, {1.0, -2.0}));
  EXPECT_EQ(g.at(7).storage(), (std::vector<double>{2.0, -4.0}));
}

TEST(FiniteDifference, AnalyticCases) {
  const auto sq = [](const Tensor& x) { return Tensor::scalar(x[0] * x[0]); };
  EXPECT_NEAR(finite_difference_grad(sq, Tensor::scalar(3.0), 1e-5)[0], 6.0, 1e-8);
  const auto total = [](const Tensor& x) { return Tensor::scalar(sum(x)); };
  const Tensor g = finite_difference_grad(total, Tensor({4}, {1, -2, 3, 0.5}));
  for (double v : g.values()) EXPECT_NEAR(v, 1.0, 1e-9);
  EXPECT_THROW(finite_difference_grad(total, Tensor({2}), 0.0), Error);
  EXPECT_THROW(finite_difference_grad([](const Tensor& x) { return x; }, Tensor({2})), Error);
}

TEST(Determinism, RepeatedBackwardIsBitIdentical) {
  const auto run = [] {
    Tape tape;
    const SegmentId seg = tape.open_segment();
    const Recorder rec(tape, seg);
    std::mt19937_64 rng(9);
    const Tensor x = tape.leaf(random_tensor({2, 3, 4, 4}, rng));
    const Tensor k = tape.leaf(random_tensor({2, 2, 2, 3, 3}, rng));
    const Tensor loss = rec.mse(rec.conv3d(x, k, Tensor({2})), Tensor({2, 2, 4, 4}));
    GradientStore seeds;
    seeds.set(*loss.node(), Tensor::scalar(1.0));
    return tape.backward(seg, seeds).at(*k.node()).storage();
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace chopgrad
