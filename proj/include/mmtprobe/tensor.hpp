#pragma once

// Dense fp64 tensors and a reverse-mode gradient tape.
//
// A Tape owns every value produced during one forward pass. Var is a cheap
// handle (tape pointer + node id) into it. Operations append nodes in
// execution order, so the node list is already topologically sorted and
// backward() is a single reverse sweep.
//
// Broadcasting is limited to two forms: identical shapes, and a single row
// (rank-1 tensor or a 1xN matrix) applied to every row of the left operand.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmtprobe/errors.hpp"
#include "mmtprobe/random.hpp"

namespace mmtprobe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
// Aligned so vectorized kernels peel loops the same way on every run; with
// plain vectors, results could differ in the last bit between runs.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_shape();
  }

  Tensor(Shape shape, const std::vector<double>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_shape();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           detail::shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty() && shape_.empty(); }

  // 2-D view: leading axis by everything else. Rank 0/1 tensors are one row.
  std::size_t rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept { return rows() ? data_.size() / rows() : 0; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  MatrixMap mat() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap mat() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor&) const = default;

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + detail::shape_str(shape_));
    }
  }

  Shape shape_;
  AlignedBuffer data_;
};

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Called with the node's own output value and its accumulated gradient.
  using BackwardFn = std::function<void(Tape&, const Tensor& out, const Tensor& grad_out)>;

  // With record_gradients=false no backward closures are kept (inference).
  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) { return push(Node{std::move(value), nullptr, {}, false, false, {}}); }

  // A leaf owning its value.
  Var leaf(Tensor value, bool trainable = true) {
    const bool g = trainable && recording_;
    return push(Node{std::move(value), nullptr, {}, g, g, {}});
  }

  // A leaf that references caller-owned storage; `external` must outlive the tape.
  Var bind(const Tensor& external, bool trainable = true) {
    const bool g = trainable && recording_;
    return push(Node{{}, &external, {}, g, g, {}});
  }

  const Tensor& value(const Var& v) const { return node(v).get(); }
  bool requires_grad(const Var& v) const { return node(v).requires_grad; }

  // Gradient of the last backward() w.r.t. `v`; empty tensor when none reached it.
  const Tensor& grad(const Var& v) const { return node(v).grad; }

  Tensor& grad_buffer(const Var& v) {
    Node& n = node(v);
    if (n.grad.size() == 0) n.grad = Tensor(n.get().shape());
    return n.grad;
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor();
  }

  // Appends an operation node. `fn` is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool g = false;
    for (const Var& in : inputs) {
      if (in.tape() != this) throw ContractError("operand belongs to a different tape");
      g = g || node(in).requires_grad;
    }
    g = g && recording_;
    return push(Node{std::move(value), nullptr, {}, g, false, g ? std::move(fn) : BackwardFn{}});
  }

  void backward(const Var& loss) {
    if (loss.tape() != this) throw ContractError("loss is not on this tape");
    if (value(loss).size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + detail::shape_str(value(loss).shape()));
    }
    for (auto& n : nodes_) {
      if (n.trainable_leaf && n.grad.size() == 0) n.grad = Tensor(n.get().shape());
    }
    grad_buffer(loss)[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, n.get(), n.grad);
    }
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external;
    Tensor grad;
    bool requires_grad;
    bool trainable_leaf;
    BackwardFn backward;

    const Tensor& get() const { return external ? *external : owned; }
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Node& node(const Var& v) {
    if (v.tape() != this || v.id() >= nodes_.size()) throw ContractError("variable not on this tape");
    return nodes_[v.id()];
  }
  const Node& node(const Var& v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) throw ContractError("variable not on this tape");
    return nodes_[v.id()];
  }

  bool recording_;
  std::deque<Node> nodes_;  // deque: references stay valid while appending
};

inline const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound variable");
  return tape_->value(*this);
}

namespace detail {

enum class Broadcast { exact, row };

inline Broadcast binary_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::exact;
  if (b.size() == a.cols() && (b.rank() == 1 || (b.rank() == 2 && b.rows() == 1)) && a.rank() >= 1) {
    return Broadcast::row;
  }
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

// (outer, extent, inner) decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.shape()[1] != B.shape()[0]) {
    throw DimensionError("matmul: cannot multiply " + detail::shape_str(A.shape()) + " by " +
                         detail::shape_str(B.shape()));
  }
  Tensor C(Shape{A.shape()[0], B.shape()[1]});
  C.mat().noalias() = A.mat() * B.mat();
  return a.tape()->record(std::move(C), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
    if (t.requires_grad(a)) t.grad_buffer(a).mat().noalias() += g.mat() * b.value().mat().transpose();
    if (t.requires_grad(b)) t.grad_buffer(b).mat().noalias() += a.value().mat().transpose() * g.mat();
  });
}

inline Var transpose(const Var& a) {
  const Tensor& A = a.value();
  if (A.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + detail::shape_str(A.shape()));
  Tensor T(Shape{A.shape()[1], A.shape()[0]});
  T.mat() = A.mat().transpose();
  return a.tape()->record(std::move(T), {a}, [a](Tape& t, const Tensor&, const Tensor& g) {
    t.grad_buffer(a).mat() += g.mat().transpose();
  });
}

inline Var reshape(const Var& a, Shape shape) {
  const Tensor& A = a.value();
  if (shape_size(shape) != A.size()) {
    throw DimensionError("reshape: " + detail::shape_str(A.shape()) + " to " + detail::shape_str(shape));
  }
  std::vector<double> data(A.data().begin(), A.data().end());
  return a.tape()->record(Tensor(std::move(shape), std::move(data)), {a}, [a](Tape& t, const Tensor&, const Tensor& g) {
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class Elementwise { add, sub, mul, scale, tanh, sigmoid };

inline Var add(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto mode = detail::binary_mode(A, B, "add");
  Tensor C = A;
  if (mode == detail::Broadcast::exact) {
    for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  } else {
    C.mat().rowwise() += ConstMatrixMap(B.data().data(), 1, B.size()).row(0);
  }
  return a.tape()->record(std::move(C), {a, b}, [a, b, mode](Tape& t, const Tensor&, const Tensor& g) {
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      if (mode == detail::Broadcast::exact) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      } else {
        MatrixMap(gb.data().data(), 1, gb.size()).row(0) += g.mat().colwise().sum();
      }
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto mode = detail::binary_mode(A, B, "sub");
  Tensor C = A;
  if (mode == detail::Broadcast::exact) {
    for (std::size_t i = 0; i < C.size(); ++i) C[i] -= B[i];
  } else {
    C.mat().rowwise() -= ConstMatrixMap(B.data().data(), 1, B.size()).row(0);
  }
  return a.tape()->record(std::move(C), {a, b}, [a, b, mode](Tape& t, const Tensor&, const Tensor& g) {
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      if (mode == detail::Broadcast::exact) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      } else {
        MatrixMap(gb.data().data(), 1, gb.size()).row(0) -= g.mat().colwise().sum();
      }
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto mode = detail::binary_mode(A, B, "mul");
  Tensor C = A;
  if (mode == detail::Broadcast::exact) {
    for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  } else {
    C.mat().array().rowwise() *= ConstMatrixMap(B.data().data(), 1, B.size()).row(0).array();
  }
  return a.tape()->record(std::move(C), {a, b}, [a, b, mode](Tape& t, const Tensor&, const Tensor& g) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a);
      if (mode == detail::Broadcast::exact) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
      } else {
        ga.mat().array() += g.mat().array().rowwise() * ConstMatrixMap(B.data().data(), 1, B.size()).row(0).array();
      }
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      if (mode == detail::Broadcast::exact) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
      } else {
        MatrixMap(gb.data().data(), 1, gb.size()).row(0) += (g.mat().array() * A.mat().array()).matrix().colwise().sum();
      }
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor C = a.value();
  for (double& v : C.data()) v *= s;
  return a.tape()->record(std::move(C), {a}, [a, s](Tape& t, const Tensor&, const Tensor& g) {
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var tanh(const Var& a) {
  Tensor Y = a.value();
  for (double& v : Y.data()) v = std::tanh(v);
  return a.tape()->record(std::move(Y), {a}, [a](Tape& t, const Tensor& Y, const Tensor& g) {
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - Y[i] * Y[i]);
  });
}

inline Var sigmoid(const Var& a) {
  Tensor Y = a.value();
  for (double& v : Y.data()) v = detail::sigmoid(v);
  return a.tape()->record(std::move(Y), {a}, [a](Tape& t, const Tensor& Y, const Tensor& g) {
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * Y[i] * (1.0 - Y[i]);
  });
}

// Dispatcher over the elementwise kinds; `factor` is only used by scale.
inline Var apply_elementwise(Elementwise kind, std::span<const Var> operands, double factor = 1.0) {
  const std::size_t need = (kind == Elementwise::add || kind == Elementwise::sub || kind == Elementwise::mul) ? 2 : 1;
  if (operands.size() != need) {
    throw ContractError("apply_elementwise: expected " + std::to_string(need) + " operands, got " +
                        std::to_string(operands.size()));
  }
  switch (kind) {
    case Elementwise::add: return add(operands[0], operands[1]);
    case Elementwise::sub: return sub(operands[0], operands[1]);
    case Elementwise::mul: return mul(operands[0], operands[1]);
    case Elementwise::scale: return scale(operands[0], factor);
    case Elementwise::tanh: return tanh(operands[0]);
    case Elementwise::sigmoid: return sigmoid(operands[0]);
  }
  throw ContractError("apply_elementwise: unknown kind");
}

inline Var sum(const Var& a) {
  const Tensor& A = a.value();
  double s = 0.0;
  for (double v : A.data()) s += v;
  return a.tape()->record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor&, const Tensor& g) {
    auto& ga = t.grad_buffer(a);
    for (double& v : ga.data()) v += g[0];
  });
}

// ---------------------------------------------------------------------------
// Normalizers

namespace detail {

inline Var softmax_impl(const Var& x, const Tensor* mask, std::size_t axis) {
  const Tensor& X = x.value();
  const auto s = split_axis(X.shape(), axis, "softmax");
  if (mask && mask->shape() != X.shape()) {
    throw DimensionError("softmax: mask shape " + shape_str(mask->shape()) + " differs from input " +
                         shape_str(X.shape()));
  }
  Tensor Y(X.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t i = 0; i < s.extent; ++i) {
        const std::size_t k = base + i * s.inner;
        if (mask && (*mask)[k] == 0.0) continue;
        mx = std::max(mx, X[k]);
        any = true;
      }
      if (!any) throw ContractError("softmax: every position of a slice is masked");
      double z = 0.0;
      for (std::size_t i = 0; i < s.extent; ++i) {
        const std::size_t k = base + i * s.inner;
        if (mask && (*mask)[k] == 0.0) continue;
        Y[k] = std::exp(X[k] - mx);
        z += Y[k];
      }
      for (std::size_t i = 0; i < s.extent; ++i) Y[base + i * s.inner] /= z;
    }
  }
  return x.tape()->record(std::move(Y), {x}, [x, s](Tape& t, const Tensor& Y, const Tensor& g) {
    auto& gx = t.grad_buffer(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < s.extent; ++i) dot += g[base + i * s.inner] * Y[base + i * s.inner];
        for (std::size_t i = 0; i < s.extent; ++i) {
          const std::size_t k = base + i * s.inner;
          gx[k] += Y[k] * (g[k] - dot);
        }
      }
    }
  });
}

}  // namespace detail

inline Var softmax(const Var& x, std::size_t axis) { return detail::softmax_impl(x, nullptr, axis); }

// Softmax over unmasked entries (mask value 0 excludes a position); excluded
// positions get weight exactly 0.
inline Var masked_softmax(const Var& x, const Tensor& mask, std::size_t axis) {
  return detail::softmax_impl(x, &mask, axis);
}

inline constexpr double kNormEpsilon = 1e-12;

inline Var l2_normalize(const Var& x, std::size_t axis) {
  const Tensor& X = x.value();
  const auto s = detail::split_axis(X.shape(), axis, "l2_normalize");
  Tensor Y(X.shape());
  std::vector<double> norms(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double sq = 0.0;
      for (std::size_t i = 0; i < s.extent; ++i) sq += X[base + i * s.inner] * X[base + i * s.inner];
      const double n = std::max(std::sqrt(sq), kNormEpsilon);
      norms[o * s.inner + in] = n;
      for (std::size_t i = 0; i < s.extent; ++i) Y[base + i * s.inner] = X[base + i * s.inner] / n;
    }
  }
  return x.tape()->record(std::move(Y), {x}, [x, s, norms = std::move(norms)](Tape& t, const Tensor& Y, const Tensor& g) {
    auto& gx = t.grad_buffer(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        const double n = norms[o * s.inner + in];
        if (n <= kNormEpsilon) {
          for (std::size_t i = 0; i < s.extent; ++i) gx[base + i * s.inner] += g[base + i * s.inner] / n;
          continue;
        }
        double dot = 0.0;
        for (std::size_t i = 0; i < s.extent; ++i) dot += g[base + i * s.inner] * Y[base + i * s.inner];
        for (std::size_t i = 0; i < s.extent; ++i) {
          const std::size_t k = base + i * s.inner;
          gx[k] += (g[k] - Y[k] * dot) / n;
        }
      }
    }
  });
}

// Plain-value variant used by the feature store.
inline void l2_normalize_inplace(std::span<double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double n = std::max(std::sqrt(sq), kNormEpsilon);
  for (double& x : v) x /= n;
}

// ---------------------------------------------------------------------------
// Structural

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: empty operand list");
  const Shape& first = parts[0].value().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + detail::shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<detail::AxisSplit> splits;
  for (const Var& p : parts) {
    const Shape& sh = p.value().shape();
    bool ok = sh.size() == first.size();
    for (std::size_t d = 0; ok && d < sh.size(); ++d) ok = d == axis || sh[d] == first[d];
    if (!ok) {
      throw DimensionError("concat: shape " + detail::shape_str(sh) + " incompatible with " +
                           detail::shape_str(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += sh[axis];
    splits.push_back(detail::split_axis(sh, axis, "concat"));
  }
  Tensor out(out_shape);
  const std::size_t outer = splits[0].outer, inner = splits[0].inner;
  const std::size_t row = out_shape[axis] * inner;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    offsets.push_back(offset);
    const Tensor& P = parts[p].value();
    const std::size_t chunk = splits[p].extent * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(P.data().begin() + o * chunk, chunk, out.data().begin() + o * row + offset);
    }
    offset += chunk;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  Tape* tape = parts[0].tape();
  return tape->record(std::move(out), std::span<const Var>(inputs),
                      [inputs, offsets, splits, outer, inner, row](Tape& t, const Tensor&, const Tensor& g) {
                        for (std::size_t p = 0; p < inputs.size(); ++p) {
                          if (!t.requires_grad(inputs[p])) continue;
                          auto& gp = t.grad_buffer(inputs[p]);
                          const std::size_t chunk = splits[p].extent * inner;
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[o * row + offsets[p] + i];
                          }
                        }
                      });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

// Contiguous range [start, start+length) along `axis`.
inline Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Tensor& X = x.value();
  const auto s = detail::split_axis(X.shape(), axis, "slice");
  if (length == 0 || start + length > s.extent) {
    throw IndexError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of extent " + std::to_string(s.extent));
  }
  Shape shape = X.shape();
  shape[axis] = length;
  Tensor out(shape);
  const std::size_t chunk = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(X.data().begin() + o * s.extent * s.inner + start * s.inner, chunk, out.data().begin() + o * chunk);
  }
  return x.tape()->record(std::move(out), {x}, [x, s, start, chunk](Tape& t, const Tensor&, const Tensor& g) {
    auto& gx = t.grad_buffer(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < chunk; ++i) gx[o * s.extent * s.inner + start * s.inner + i] += g[o * chunk + i];
    }
  });
}

// Row gather from a [V x d] table; backward scatter-adds, so repeated ids accumulate.
inline Var embedding_lookup(const Var& table, std::span<const int> ids) {
  const Tensor& T = table.value();
  if (T.rank() != 2) throw DimensionError("embedding_lookup: table must be a matrix, got " + detail::shape_str(T.shape()));
  const std::size_t V = T.shape()[0], d = T.shape()[1];
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id sequence");
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(V) + ")");
    }
    std::copy_n(T.data().begin() + ids[i] * d, d, out.data().begin() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape()->record(std::move(out), {table}, [table, idv = std::move(idv), d](Tape& t, const Tensor&, const Tensor& g) {
    auto& gt = t.grad_buffer(table);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += g[i * d + j];
    }
  });
}

inline Var gather_rows(const Var& x, std::span<const int> rows) { return embedding_lookup(x, rows); }

// Attention read-out over position-major values.
// weights: [P x B]; values: [P*B x D] where row p*B+b holds position p of item b.
// Returns [B x D] with out[b] = sum_p weights[p,b] * values[p*B+b].
inline Var positional_weighted_sum(const Var& weights, const Var& values) {
  const Tensor& W = weights.value();
  const Tensor& X = values.value();
  if (W.rank() != 2 || X.rank() != 2 || X.shape()[0] != W.shape()[0] * W.shape()[1]) {
    throw DimensionError("positional_weighted_sum: weights " + detail::shape_str(W.shape()) + " incompatible with values " +
                         detail::shape_str(X.shape()));
  }
  const std::size_t P = W.shape()[0], B = W.shape()[1], D = X.shape()[1];
  Tensor out(Shape{B, D});
  auto O = out.mat();
  const auto XM = X.mat();
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t b = 0; b < B; ++b) O.row(b) += W[p * B + b] * XM.row(p * B + b);
  }
  return weights.tape()->record(std::move(out), {weights, values}, [weights, values, P, B](Tape& t, const Tensor&, const Tensor& g) {
    const auto G = g.mat();
    if (t.requires_grad(weights)) {
      auto& gw = t.grad_buffer(weights);
      const auto XM = values.value().mat();
      for (std::size_t p = 0; p < P; ++p) {
        for (std::size_t b = 0; b < B; ++b) gw[p * B + b] += G.row(b).dot(XM.row(p * B + b));
      }
    }
    if (t.requires_grad(values)) {
      auto GX = t.grad_buffer(values).mat();
      const Tensor& W = weights.value();
      for (std::size_t p = 0; p < P; ++p) {
        for (std::size_t b = 0; b < B; ++b) GX.row(p * B + b) += W[p * B + b] * G.row(b);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Loss and regularization

// Mean of -log softmax(logits)[target] over positions whose mask is non-zero.
inline Var masked_cross_entropy(const Var& logits, std::span<const int> targets, std::span<const double> mask) {
  const Tensor& L = logits.value();
  if (L.rank() != 2 || L.shape()[0] != targets.size() || targets.size() != mask.size()) {
    throw DimensionError("masked_cross_entropy: logits " + detail::shape_str(L.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) + " mask entries");
  }
  const std::size_t N = L.shape()[0], V = L.shape()[1];
  double count = 0.0;
  for (double m : mask) count += m != 0.0 ? 1.0 : 0.0;
  if (count == 0.0) throw ContractError("masked_cross_entropy: degenerate batch, every position is masked");
  Tensor probs(Shape{N, V});
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    if (mask[i] == 0.0) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw IndexError("masked_cross_entropy: target " + std::to_string(targets[i]) + " outside [0, " + std::to_string(V) + ")");
    }
    const double* row = &L.data()[i * V];
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      probs[i * V + j] = std::exp(row[j] - mx);
      z += probs[i * V + j];
    }
    for (std::size_t j = 0; j < V; ++j) probs[i * V + j] /= z;
    total += (mx + std::log(z)) - row[targets[i]];
  }
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<double> mv(mask.begin(), mask.end());
  return logits.tape()->record(
      Tensor::scalar(total / count), {logits},
      [logits, probs = std::move(probs), tv = std::move(tv), mv = std::move(mv), count, V](Tape& t, const Tensor&, const Tensor& g) {
        auto& gl = t.grad_buffer(logits);
        const double s = g[0] / count;
        for (std::size_t i = 0; i < tv.size(); ++i) {
          if (mv[i] == 0.0) continue;
          for (std::size_t j = 0; j < V; ++j) gl[i * V + j] += s * probs[i * V + j];
          gl[i * V + tv[i]] -= s;
        }
      });
}

// Inverted dropout: survivors are scaled by 1/(1-p); inference returns `x` itself.
inline Var dropout(const Var& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const double keep = 1.0 / (1.0 - p);
  Tensor mask(x.value().shape());
  for (double& m : mask.data()) m = uniform01(rng) < p ? 0.0 : keep;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape()->record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, const Tensor&, const Tensor& g) {
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

using MultiScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

// Central differences on every coordinate of every tensor in `inputs`.
// Error per coordinate is |analytic - numeric| / max(1, |numeric|).
inline GradCheckReport finite_difference_check(const MultiScalarFn& f, std::span<Tensor* const> inputs, double h = 1e-5) {
  auto evaluate = [&](bool record, std::vector<Tensor>* grads) {
    Tape tape(record);
    std::vector<Var> vars;
    for (Tensor* in : inputs) vars.push_back(tape.bind(*in, true));
    Var out = f(tape, vars);
    if (out.value().size() != 1) throw ContractError("finite_difference_check: function is not scalar-valued");
    const double v = out.value()[0];
    if (grads) {
      tape.backward(out);
      for (const Var& var : vars) grads->push_back(tape.grad(var));
    }
    return v;
  };

  std::vector<Tensor> analytic;
  const double base = evaluate(true, &analytic);
  if (evaluate(false, nullptr) != base) throw ContractError("finite_difference_check: function is not deterministic");

  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor& x = *inputs[t];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double up = evaluate(false, nullptr);
      x[i] = orig - h;
      const double down = evaluate(false, nullptr);
      x[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[t].size() ? analytic[t][i] : 0.0;
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      ++report.coordinates;
      if (err > report.max_relative_error || std::isnan(err)) {
        report.max_relative_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        report.worst_tensor = t;
        report.worst_index = i;
      }
    }
  }
  return report;
}

inline double finite_difference_check(const std::function<Var(Tape&, const Var&)>& f, Tensor x, double h = 1e-5) {
  Tensor* ptr = &x;
  return finite_difference_check([&](Tape& t, std::span<const Var> v) { return f(t, v[0]); },
                                 std::span<Tensor* const>(&ptr, 1), h)
      .max_relative_error;
}

}  // namespace mmtprobe
