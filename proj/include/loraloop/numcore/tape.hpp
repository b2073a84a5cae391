#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "loraloop/numcore/tensor.hpp"

namespace loraloop::num {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid until the tape
/// is cleared.
class Var {
 public:
  Var() = default;

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] Tape& tape() const;
  [[nodiscard]] std::size_t id() const noexcept { return id_; }
  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using BackwardFn = std::function<void(Tape&, std::size_t self)>;

/// Reverse-mode tape. Nodes are appended in evaluation order; backward()
/// replays them in reverse, accumulates gradients into every parameter bound
/// with param(), and clears the tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Binds a trainable tensor. Its gradient buffer receives dLoss/dParam on
  /// backward(); the tensor must stay alive and unmodified until then.
  Var param(Tensor& p);
  /// Records an owned constant (no gradient flows into it).
  Var constant(Tensor value);
  /// Records a borrowed constant without copying it.
  Var constant_ref(const Tensor& value);

  /// Requires a single-element `loss`. Populates the gradient of every
  /// parameter bound on this tape (zero when unreachable), then clears.
  void backward(Var loss);
  void clear();
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  // Interface for operation implementations.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn fn);
  [[nodiscard]] const Tensor& value(std::size_t id) const;
  [[nodiscard]] bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  /// Gradient buffer of node `id`, allocated as zeros on first access.
  std::span<double> grad(std::size_t id);
  [[nodiscard]] bool owns(const Var& v) const noexcept { return v.tape_ == this; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor* param = nullptr;
    bool needs_grad = false;
    std::vector<double> grad;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops broadcast a scalar, a row (1xC or [C])
// or a column (Rx1) operand against the other operand.

Var matmul(Var a, Var b);
/// x · wᵀ for x [B, in] and w [out, in].
Var linear(Var x, Var w);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var neg(Var a);
Var relu(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var softmax(Var a);
Var log_softmax(Var a);
Var sum(Var a);
Var mean(Var a);
/// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns).
Var concat(std::span<const Var> parts, std::size_t axis);
Var transpose(Var a);
/// Divides every row by its L2 norm; a zero row is a NumericError.
Var normalize_rows(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

enum class OpKind { matmul, add, mul, relu, tanh, softmax, mean, sum, concat };

/// Dispatches one of the core operations by kind. `concat` joins along
/// columns; unary and reduction kinds take exactly one input.
Var forward_op(OpKind kind, std::span<const Var> inputs);

/// Mean cross-entropy of row-wise logits against integer labels.
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

}  // namespace loraloop::num
