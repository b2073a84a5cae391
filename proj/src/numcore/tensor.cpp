#include "loraloop/numcore/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace loraloop::num {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor() : values_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
  }
  values_.assign(shape_size(shape_), fill);
  require_finite("tensor fill");
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
  }
  if (shape_size(shape_) != values_.size()) {
    throw ShapeError("shape " + shape_string(shape_) + " needs " +
                     std::to_string(shape_size(shape_)) + " values, got " +
                     std::to_string(values_.size()));
  }
  require_finite("tensor values");
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const noexcept {
  if (shape_.empty()) return 1;
  return shape_.back();
}

double Tensor::item() const {
  if (values_.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + shape_string(shape_));
  }
  return values_[0];
}

void Tensor::zero_grad() { grad_.assign(values_.size(), 0.0); }

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (rank() != 2 || begin >= end || end > shape_[0]) {
    throw ShapeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_string(shape_));
  }
  const auto c = cols();
  std::vector<double> out(values_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          values_.begin() + static_cast<std::ptrdiff_t>(end * c));
  return Tensor(Shape{end - begin, c}, std::move(out));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
  if (rank() != 2 || rows.empty()) {
    throw ShapeError("gather_rows needs a rank-2 tensor and at least one index, got " +
                     shape_string(shape_));
  }
  const auto c = cols();
  std::vector<double> out;
  out.reserve(rows.size() * c);
  for (auto r : rows) {
    if (r >= shape_[0]) throw ShapeError("gather_rows index " + std::to_string(r) + " out of range");
    const auto* src = values_.data() + r * c;
    out.insert(out.end(), src, src + c);
  }
  return Tensor(Shape{rows.size(), c}, std::move(out));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), values_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::require_finite(const std::string& what) const {
  if (!all_finite()) throw NumericError(what + ": non-finite value in tensor " + shape_string(shape_));
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw ShapeError("stack_rows needs at least one row");
  const auto width = rows.front().size();
  std::vector<double> out;
  out.reserve(rows.size() * width);
  for (const auto& r : rows) {
    if (r.size() != width) {
      throw ShapeError("stack_rows: row of " + std::to_string(r.size()) + " values, expected " +
                       std::to_string(width));
    }
    out.insert(out.end(), r.values().begin(), r.values().end());
  }
  return Tensor(Shape{rows.size(), width}, std::move(out));
}

Tensor concat_rows(std::span<const Tensor> blocks) {
  if (blocks.empty()) throw ShapeError("concat_rows needs at least one block");
  const auto cols = blocks.front().cols();
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& b : blocks) {
    if (b.cols() != cols) {
      throw ShapeError("concat_rows: block " + shape_string(b.shape()) + " has " + std::to_string(b.cols()) +
                       " columns, expected " + std::to_string(cols));
    }
    rows += b.rows();
    out.insert(out.end(), b.values().begin(), b.values().end());
  }
  return Tensor(Shape{rows, cols}, std::move(out));
}

}  // namespace loraloop::num
