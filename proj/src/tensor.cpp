#include "trajmae/tensor.hpp"

#include <cmath>
#include <sstream>

namespace trajmae {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("Tensor: shape " + shape_str(shape_) + " does not hold " + std::to_string(data_.size()) +
                     " values");
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  return data_[0];
}

void Tensor::reshape(Shape s) {
  if (shape_numel(s) != data_.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(s));
  }
  shape_ = std::move(s);
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace trajmae
