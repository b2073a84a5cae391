#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace loraloop::num {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes do not conform to an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a value leaves the finite reals (NaN/Inf) or an operation is
/// numerically undefined (e.g. cosine of a zero vector).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Rank 0 is a scalar. Every operation in this library views tensors as
/// matrices: rank 0 is 1x1, rank 1 ([n]) is 1xn, rank 2 is rows x cols.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor identity(std::size_t n);

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] std::size_t rows() const noexcept;
  [[nodiscard]] std::size_t cols() const noexcept;

  [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
  [[nodiscard]] std::span<double> values() noexcept { return values_; }
  [[nodiscard]] const std::vector<double>& data() const noexcept { return values_; }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  [[nodiscard]] double item() const;

  [[nodiscard]] bool has_grad() const noexcept { return !grad_.empty(); }
  [[nodiscard]] std::span<const double> grad() const noexcept { return grad_; }
  [[nodiscard]] std::span<double> grad() noexcept { return grad_; }
  /// Allocates the gradient buffer (if absent) and fills it with zeros.
  void zero_grad();
  void clear_grad() noexcept { grad_.clear(); }

  /// Copy of rows [begin, end) of a rank-2 tensor.
  [[nodiscard]] Tensor slice_rows(std::size_t begin, std::size_t end) const;
  [[nodiscard]] Tensor gather_rows(std::span<const std::size_t> rows) const;
  [[nodiscard]] Tensor reshaped(Shape shape) const;

  [[nodiscard]] bool all_finite() const noexcept;
  /// Throws NumericError naming `what` when any value is NaN or infinite.
  void require_finite(const std::string& what) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<double> values_;
  std::vector<double> grad_;
};

/// Stacks equally sized rank-1 or 1xN rows into a rank-2 tensor.
Tensor stack_rows(std::span<const Tensor> rows);
/// Joins row blocks that share a column count.
Tensor concat_rows(std::span<const Tensor> blocks);

}  // namespace loraloop::num
