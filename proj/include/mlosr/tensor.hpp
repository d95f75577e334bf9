#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mlosr/error.hpp"

namespace mlosr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
///
/// A Tensor is a plain value. Gradient bookkeeping lives on the Tape, which
/// owns one Tensor per recorded node plus its gradient buffer.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_volume(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool is_scalar() const noexcept { return data_.size() == 1 && shape_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  /// Reinterprets the buffer with a new shape of equal volume.
  Tensor reshaped(Shape shape) const {
    if (shape_volume(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  /// Copies rows [begin, end) along the leading dimension.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || end > shape_[0] || begin > end) {
      throw DimensionError("row slice out of range for " + shape_string(shape_));
    }
    const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                   data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
  }

  /// Gathers the given rows along the leading dimension.
  Tensor gather_rows(std::span<const std::size_t> rows) const {
    if (shape_.empty()) throw DimensionError("gather_rows on scalar");
    const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = rows.size();
    std::vector<double> out;
    out.reserve(rows.size() * stride);
    for (std::size_t r : rows) {
      if (r >= shape_[0]) throw DimensionError("row index out of range in gather_rows");
      auto first = data_.begin() + static_cast<std::ptrdiff_t>(r * stride);
      out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(stride));
    }
    return Tensor(std::move(s), std::move(out));
  }

  bool operator==(const Tensor&) const = default;

private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace mlosr
