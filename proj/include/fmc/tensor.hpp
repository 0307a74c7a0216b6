#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmc {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes violate an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN/Inf shows up where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Feature maps use the [C,D,H,W] layout, flattened sequences use [L,C].
/// A default-constructed tensor is the scalar 0 with shape {1}.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() & { return data_; }
  std::span<const double> data() const& { return data_; }
  std::span<const double> data() && = delete;
  std::vector<double>& storage() { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
  }
  double at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool all_finite() const;
  /// Throws NumericError naming `context` and the first bad index.
  void ensure_finite(const std::string& context) const;

  Tensor reshaped(Shape shape) const;

  void fill(double v);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

/// Spatial voxel count of a [C,D,H,W] tensor.
inline std::size_t voxels(const Tensor& t) { return t.dim(1) * t.dim(2) * t.dim(3); }

void require_rank(const Tensor& t, std::size_t rank, const char* what);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

double max_abs_diff(const Tensor& a, const Tensor& b);
double squared_norm(const Tensor& t);

}  // namespace fmc
