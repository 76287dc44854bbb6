#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajmae {

using Shape = std::vector<std::size_t>;

/// Raised on any shape or argument contract violation of a tensor op.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Dense row-major array of doubles. A rank-0 shape holds a single scalar.
class Tensor {
 public:
  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  /// Size of the last axis (1 for scalars).
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all leading axes.
  std::size_t rows() const noexcept { return shape_.empty() ? 1 : (cols() == 0 ? 0 : size() / cols()); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double item() const;

  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  void reshape(Shape s);
  bool all_finite() const noexcept;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace trajmae
