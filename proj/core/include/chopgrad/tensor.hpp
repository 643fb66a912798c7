#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace chopgrad {

using NodeId = std::uint64_t;
using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles. Video-like tensors use the
/// (channels, time, height, width) layout throughout the library.
///
/// A tensor produced by a recorded op carries the id of its tape node; a
/// tensor without one is a constant as far as backward is concerned.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_.size(); }
  std::size_t bytes() const { return values_.size() * sizeof(double); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  // (c, t, h, w) accessors for rank-4 tensors.
  double& at(std::size_t c, std::size_t t, std::size_t h, std::size_t w) {
    return values_[index4(c, t, h, w)];
  }
  double at(std::size_t c, std::size_t t, std::size_t h, std::size_t w) const {
    return values_[index4(c, t, h, w)];
  }

  std::optional<NodeId> node() const { return node_; }
  bool requires_grad() const { return node_.has_value(); }
  void set_node(std::optional<NodeId> id) { node_ = id; }

  /// Same values, no tape identity.
  Tensor constant() const;

  double item() const;

 private:
  std::size_t index4(std::size_t c, std::size_t t, std::size_t h, std::size_t w) const {
    return ((c * shape_[1] + t) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  std::vector<double> values_;
  std::optional<NodeId> node_;
};

// Elementwise helpers on constants. They never touch tape identity.
void add_into(Tensor& dst, const Tensor& src, double scale = 1.0);
Tensor scaled(const Tensor& t, double scale);
double sum(const Tensor& t);
double frobenius_norm(const Tensor& t);
double dot(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

void require_rank4(const Tensor& t, const char* what);

}  // namespace chopgrad
