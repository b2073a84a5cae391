#include "loraloop/numcore/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kernels.hpp"

namespace loraloop::num {

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return tape_->value(id_);
}

Tape& Var::tape() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return *tape_;
}

Var Tape::param(Tensor& p) {
  Node node;
  node.borrowed = &p;
  node.param = &p;
  node.needs_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant_ref(const Tensor& value) {
  Node node;
  node.borrowed = &value;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t id) const {
  const auto& n = nodes_.at(id);
  return n.borrowed ? *n.borrowed : n.owned;
}

std::span<double> Tape::grad(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
  return n.grad;
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn fn) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite output of shape " +
                       shape_string(value.shape()));
  }
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.tape_ != this) throw std::logic_error(std::string(op) + ": operand from another tape");
    needs = needs || nodes_[in.id_].needs_grad;
  }
  Node node;
  node.owned = std::move(value);
  node.needs_grad = needs;
  if (needs) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw std::logic_error("backward: loss from another tape");
  const auto& lv = value(loss.id_);
  if (lv.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_string(lv.shape()));
  }
  if (!std::isfinite(lv[0])) throw NumericError("backward: loss is not finite");
  if (nodes_[loss.id_].needs_grad) {
    grad(loss.id_)[0] = 1.0;
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }
  for (auto& n : nodes_) {
    if (!n.param) continue;
    if (!n.param->has_grad()) n.param->zero_grad();
    if (n.grad.empty()) continue;
    auto dst = n.param->grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
  }
  clear();
}

void Tape::clear() { nodes_.clear(); }

namespace {

struct View {
  std::size_t rows, cols, rs, cs;
};

View view_of(const Tensor& t) {
  const auto r = t.rank() == 2 ? t.shape()[0] : 1;
  const auto c = t.rank() == 0 ? 1 : t.shape().back();
  return {r, c, r == 1 ? 0 : c, c == 1 ? std::size_t{0} : std::size_t{1}};
}

void require_matrix_like(std::string_view op, const Tensor& t) {
  if (t.rank() > 2) {
    throw ShapeError(std::string(op) + ": rank-" + std::to_string(t.rank()) +
                     " tensors are not supported, got " + shape_string(t.shape()));
  }
}

template <class F, class DA, class DB>
Var broadcast_binary(std::string_view op, Var a, Var b, F f, DA dfa, DB dfb) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix_like(op, av);
  require_matrix_like(op, bv);
  const auto va = view_of(av);
  const auto vb = view_of(bv);
  const auto rows = std::max(va.rows, vb.rows);
  const auto cols = std::max(va.cols, vb.cols);
  const bool ok = (va.rows == rows || va.rows == 1) && (vb.rows == rows || vb.rows == 1) &&
                  (va.cols == cols || va.cols == 1) && (vb.cols == cols || vb.cols == 1);
  if (!ok) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(av.shape()) + " and " +
                     shape_string(bv.shape()) + " do not broadcast");
  }
  Shape out_shape;
  if (va.rows == rows && va.cols == cols) {
    out_shape = av.shape();
  } else if (vb.rows == rows && vb.cols == cols) {
    out_shape = bv.shape();
  } else {
    out_shape = {rows, cols};
  }
  Tensor out(out_shape);
  auto o = out.values();
  const auto* pa = av.values().data();
  const auto* pb = bv.values().data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      o[i * cols + j] = f(pa[i * va.rs + j * va.cs], pb[i * vb.rs + j * vb.cs]);

  const auto ia = a.id();
  const auto ib = b.id();
  return a.tape().record(op, std::move(out), {a, b},
                         [=](Tape& tape, std::size_t self) {
                           const auto g = tape.grad(self);
                           const auto* xa = tape.value(ia).values().data();
                           const auto* xb = tape.value(ib).values().data();
                           if (tape.needs_grad(ia)) {
                             auto ga = tape.grad(ia);
                             for (std::size_t i = 0; i < rows; ++i)
                               for (std::size_t j = 0; j < cols; ++j) {
                                 const auto pa_i = i * va.rs + j * va.cs;
                                 const auto pb_i = i * vb.rs + j * vb.cs;
                                 ga[pa_i] += g[i * cols + j] * dfa(xa[pa_i], xb[pb_i]);
                               }
                           }
                           if (tape.needs_grad(ib)) {
                             auto gb = tape.grad(ib);
                             for (std::size_t i = 0; i < rows; ++i)
                               for (std::size_t j = 0; j < cols; ++j) {
                                 const auto pa_i = i * va.rs + j * va.cs;
                                 const auto pb_i = i * vb.rs + j * vb.cs;
                                 gb[pb_i] += g[i * cols + j] * dfb(xa[pa_i], xb[pb_i]);
                               }
                           }
                         });
}

/// Elementwise unary op whose derivative is expressed through input x and
/// output y.
template <class F, class D>
Var unary(std::string_view op, Var a, F f, D df) {
  const auto& av = a.value();
  Tensor out(av.shape());
  auto o = out.values();
  const auto in = av.values();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  const auto ia = a.id();
  return a.tape().record(op, std::move(out), {a}, [=](Tape& tape, std::size_t self) {
    const auto g = tape.grad(self);
    const auto x = tape.value(ia).values();
    const auto y = tape.value(self).values();
    auto ga = tape.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

std::size_t rows_of(const Tensor& t) { return t.rank() == 2 ? t.shape()[0] : 1; }
std::size_t cols_of(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

}  // namespace

Var matmul(Var a, Var b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    throw ShapeError("matmul: shapes " + shape_string(av.shape()) + " and " +
                     shape_string(bv.shape()) + " do not contract");
  }
  const auto m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  Tensor out(Shape{m, n});
  kernels::gemm_nn_acc(m, n, k, av.values().data(), bv.values().data(), out.values().data());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {a, b}, [=](Tape& tape, std::size_t self) {
    const auto g = tape.grad(self);
    if (tape.needs_grad(ia)) {
      // dA = G · Bᵀ
      const auto bt = kernels::transposed(k, n, tape.value(ib).values().data());
      kernels::gemm_nn_acc(m, k, n, g.data(), bt.data(), tape.grad(ia).data());
    }
    if (tape.needs_grad(ib)) {
      // dB = Aᵀ · G
      kernels::gemm_tn_acc(k, n, m, tape.value(ia).values().data(), g.data(),
                           tape.grad(ib).data());
    }
  });
}

Var linear(Var x, Var w) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1]) {
    throw ShapeError("linear: input " + shape_string(xv.shape()) + " does not match weight " +
                     shape_string(wv.shape()));
  }
  const auto m = xv.shape()[0], k = xv.shape()[1], n = wv.shape()[0];
  Tensor out(Shape{m, n});
  const auto wt = kernels::transposed(n, k, wv.values().data());
  kernels::gemm_nn_acc(m, n, k, xv.values().data(), wt.data(), out.values().data());
  const auto ix = x.id(), iw = w.id();
  return x.tape().record("linear", std::move(out), {x, w}, [=](Tape& tape, std::size_t self) {
    const auto g = tape.grad(self);
    if (tape.needs_grad(ix)) {
      // dX = G · W
      kernels::gemm_nn_acc(m, k, n, g.data(), tape.value(iw).values().data(),
                           tape.grad(ix).data());
    }
    if (tape.needs_grad(iw)) {
      // dW = Gᵀ · X
      kernels::gemm_tn_acc(n, k, m, g.data(), tape.value(ix).values().data(),
                           tape.grad(iw).data());
    }
  });
}

Var add(Var a, Var b) {
  return broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return broadcast_binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return broadcast_binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var scale(Var a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var relu(Var a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
  }
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var softmax(Var a) {
  const auto& av = a.value();
  require_matrix_like("softmax", av);
  const auto rows = rows_of(av), cols = cols_of(av);
  Tensor out(av.shape());
  auto o = out.values();
  const auto x = av.values();
  for (std::size_t i = 0; i < rows; ++i) {
    const auto* xr = x.data() + i * cols;
    auto* orow = o.data() + i * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += (orow[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) orow[j] /= z;
  }
  const auto ia = a.id();
  return a.tape().record("softmax", std::move(out), {a}, [=](Tape& tape, std::size_t self) {
    const auto g = tape.grad(self);
    const auto y = tape.value(self).values();
    auto ga = tape.grad(ia);
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[i * cols + j] * y[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        ga[i * cols + j] += y[i * cols + j] * (g[i * cols + j] - dot);
    }
  });
}

Var log_softmax(Var a) {
  const auto& av = a.value();
  require_matrix_like("log_softmax", av);
  const auto rows = rows_of(av), cols = cols_of(av);
  Tensor out(av.shape());
  auto o = out.values();
  const auto x = av.values();
  for (std::size_t i = 0; i < rows; ++i) {
    const auto* xr = x.data() + i * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(xr[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) o[i * cols + j] = xr[j] - lse;
  }
  const auto ia = a.id();
  return a.tape().record("log_softmax", std::move(out), {a}, [=](Tape& tape, std::size_t self) {
    const auto g = tape.grad(self);
    const auto y = tape.value(self).values();
    auto ga = tape.grad(ia);
    for (std::size_t i = 0; i < rows; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < cols; ++j) gs += g[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        ga[i * cols + j] += g[i * cols + j] - std::exp(y[i * cols + j]) * gs;
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const auto ia = a.id();
  return a.tape().record("sum", Tensor::scalar(s), {a}, [=](Tape& tape, std::size_t self) {
    const double g = tape.grad(self)[0];
    for (auto& v : tape.grad(ia)) v += g;
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const auto ia = a.id();
  return a.tape().record("mean", Tensor::scalar(s / n), {a}, [=](Tape& tape, std::size_t self) {
    const double g = tape.grad(self)[0] / n;
    for (auto& v : tape.grad(ia)) v += g;
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) {
    if (p.value().rank() != 2) {
      throw ShapeError("concat: inputs must be rank 2, got " + shape_string(p.value().shape()));
    }
  }
  const auto& first = parts.front().value();
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.value().shape();
    if (s[1 - axis] != first.shape()[1 - axis]) {
      throw ShapeError("concat: shapes " + shape_string(first.shape()) + " and " +
                       shape_string(s) + " differ off the concat axis");
    }
    extents.push_back(s[axis]);
    total += s[axis];
  }
  const std::size_t rows = axis == 0 ? total : first.shape()[0];
  const std::size_t cols = axis == 1 ? total : first.shape()[1];
  Tensor out(Shape{rows, cols});
  auto o = out.values();
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto x = parts[p].value().values();
    const auto e = extents[p];
    if (axis == 0) {
      std::copy(x.begin(), x.end(), o.begin() + static_cast<std::ptrdiff_t>(offset * cols));
    } else {
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < e; ++j) o[i * cols + offset + j] = x[i * e + j];
    }
    offset += e;
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts.front().tape().record(
      "concat", std::move(out), parts, [=](Tape& tape, std::size_t self) {
        const auto g = tape.grad(self);
        std::size_t off = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          const auto e = extents[p];
          if (tape.needs_grad(ids[p])) {
            auto gp = tape.grad(ids[p]);
            if (axis == 0) {
              for (std::size_t i = 0; i < e * cols; ++i) gp[i] += g[off * cols + i];
            } else {
              for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < e; ++j) gp[i * e + j] += g[i * cols + off + j];
            }
          }
          off += e;
        }
      });
}

Var transpose(Var a) {
  const auto& av = a.value();
  if (av.rank() != 2) throw ShapeError("transpose: needs rank 2, got " + shape_string(av.shape()));
  const auto r = av.shape()[0], c = av.shape()[1];
  Tensor out(Shape{c, r}, kernels::transposed(r, c, av.values().data()));
  const auto ia = a.id();
  return a.tape().record("transpose", std::move(out), {a}, [=](Tape& tape, std::size_t self) {
    const auto g = tape.grad(self);
    auto ga = tape.grad(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var normalize_rows(Var a) {
  const auto& av = a.value();
  require_matrix_like("normalize_rows", av);
  const auto rows = rows_of(av), cols = cols_of(av);
  Tensor out(av.shape());
  std::vector<double> norms(rows);
  const auto x = av.values();
  auto o = out.values();
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += x[i * cols + j] * x[i * cols + j];
    const double n = std::sqrt(s);
    if (!(n > 1e-300)) {
      throw NumericError("normalize_rows: zero-norm row " + std::to_string(i) +
                         " (cosine similarity undefined)");
    }
    norms[i] = n;
    for (std::size_t j = 0; j < cols; ++j) o[i * cols + j] = x[i * cols + j] / n;
  }
  const auto ia = a.id();
  return a.tape().record("normalize_rows", std::move(out), {a},
                         [=](Tape& tape, std::size_t self) {
                           const auto g = tape.grad(self);
                           const auto y = tape.value(self).values();
                           auto ga = tape.grad(ia);
                           for (std::size_t i = 0; i < rows; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < cols; ++j)
                               dot += g[i * cols + j] * y[i * cols + j];
                             for (std::size_t j = 0; j < cols; ++j)
                               ga[i * cols + j] +=
                                   (g[i * cols + j] - y[i * cols + j] * dot) / norms[i];
                           }
                         });
}

Var forward_op(OpKind kind, std::span<const Var> inputs) {
  auto need = [&](std::size_t n, const char* name) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(name) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2, "matmul"); return matmul(inputs[0], inputs[1]);
    case OpKind::add: need(2, "add"); return add(inputs[0], inputs[1]);
    case OpKind::mul: need(2, "mul"); return mul(inputs[0], inputs[1]);
    case OpKind::relu: need(1, "relu"); return relu(inputs[0]);
    case OpKind::tanh: need(1, "tanh"); return tanh(inputs[0]);
    case OpKind::softmax: need(1, "softmax"); return softmax(inputs[0]);
    case OpKind::mean: need(1, "mean"); return mean(inputs[0]);
    case OpKind::sum: need(1, "sum"); return sum(inputs[0]);
    case OpKind::concat: return concat(inputs, 1);
  }
  throw std::logic_error("forward_op: unknown kind");
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const auto& lv = logits.value();
  if (lv.rank() != 2 || lv.shape()[0] != labels.size() || labels.empty()) {
    throw ShapeError("cross_entropy: logits " + shape_string(lv.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const auto rows = lv.shape()[0], cols = lv.shape()[1];
  Tensor onehot(Shape{rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    if (labels[i] >= cols) {
      throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) + " >= " +
                       std::to_string(cols) + " classes");
    }
    onehot.at(i, labels[i]) = 1.0;
  }
  auto& tape = logits.tape();
  auto picked = mul(log_softmax(logits), tape.constant(std::move(onehot)));
  return scale(sum(picked), -1.0 / static_cast<double>(rows));
}

}  // namespace loraloop::num
