#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace vndiff {

// Dense row-major extents. Activations use rank 4, [C, D, H, W] with W
// fastest; weights and vectors use whatever rank suits them.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) : dims_(dims) {}
  explicit Shape(std::vector<int> dims) : dims_(std::move(dims)) {}

  int rank() const { return static_cast<int>(dims_.size()); }
  int operator[](int i) const { return dims_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& dims() const { return dims_; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : dims_) n *= static_cast<std::size_t>(d);
    return n;
  }

  // For rank-4 activations.
  int channels() const { return dims_.at(0); }
  std::size_t spatial_size() const { return numel() / static_cast<std::size_t>(channels()); }

  bool operator==(const Shape&) const = default;
  std::string str() const;

 private:
  std::vector<int> dims_;
};

template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)), data_(shape_.numel(), fill) {}
  Tensor(Shape shape, std::vector<Real> data);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  // Element access for rank-4 activations.
  Real& at(int c, int z, int y, int x) { return data_[index(c, z, y, x)]; }
  Real at(int c, int z, int y, int x) const { return data_[index(c, z, y, x)]; }

  void fill(Real v);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(Real s);

  // Same data, new extents; numel must agree.
  Tensor reshaped(Shape shape) const;

  template <typename To>
  Tensor<To> cast() const {
    std::vector<To> out(data_.begin(), data_.end());
    return Tensor<To>(shape_, std::move(out));
  }

 private:
  std::size_t index(int c, int z, int y, int x) const {
    return ((static_cast<std::size_t>(c) * shape_[1] + z) * shape_[2] + y) * shape_[3] + x;
  }

  Shape shape_;
  std::vector<Real> data_;
};

void require_same_shape(const Shape& a, const Shape& b, const char* what);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace vndiff
