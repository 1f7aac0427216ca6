#pragma once

// Dense tensor storage plus reverse-mode automatic differentiation.
//
// A Tensor<T> is a cheap shared handle to a flat row-major buffer. Operations
// build fresh tensors; when a Tape<T> is active on the current thread and an
// input tracks gradients, each operation records a backward closure on the
// tape. Replaying the tape in reverse propagates gradients to every tracked
// leaf. A tape is single-use.
//
// T is float for training and double for gradient-check mode; finite
// differences are unreliable at 32-bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pscnet {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Extents of one tensor axis each; rank 0 (empty shape) is a scalar.
using Shape = std::vector<int>;

inline long long numel_of(const Shape& s) {
  long long n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline void validate_shape(const char* op, const Shape& s) {
  for (int e : s)
    if (e <= 0) throw Error(std::string(op) + ": non-positive extent in shape " + shape_str(s));
}

namespace detail {

template <typename T>
struct TensorStorage {
  std::vector<T> data;
  std::vector<T> grad;  // empty until an op needs to accumulate into it
  bool requires_grad = false;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape("Tensor", shape_);
    st_ = std::make_shared<detail::TensorStorage<T>>();
    st_->data.assign(static_cast<size_t>(numel_of(shape_)), T(0));
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    validate_shape("Tensor", shape_);
    if (static_cast<long long>(values.size()) != numel_of(shape_))
      throw Error("Tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape_));
    st_ = std::make_shared<detail::TensorStorage<T>>();
    st_->data = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.raw().begin(), t.raw().end(), v);
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  int numel() const { return st_ ? static_cast<int>(st_->data.size()) : 0; }

  std::vector<T>& raw() { return st_->data; }
  const std::vector<T>& raw() const { return st_->data; }
  T* data() { return st_->data.data(); }
  const T* data() const { return st_->data.data(); }

  T item() const {
    if (numel() != 1) throw Error("item: tensor has shape " + shape_str(shape_) + ", expected one element");
    return st_->data[0];
  }

  Tensor& set_requires_grad(bool on = true) {
    st_->requires_grad = on;
    return *this;
  }
  bool requires_grad() const { return st_ && st_->requires_grad; }

  bool grad_allocated() const { return st_ && !st_->grad.empty(); }
  void ensure_grad() const {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), T(0));
  }
  std::vector<T>& grad_raw() const {
    if (!grad_allocated()) throw Error("grad_raw: gradient buffer not allocated");
    return st_->grad;
  }
  // Gradient as a tensor of the same shape; zeros when nothing reached this leaf.
  Tensor grad() const {
    if (!grad_allocated()) return Tensor(shape_);
    return Tensor(shape_, st_->grad);
  }
  void zero_grad() {
    if (st_ && !st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
  }

  // Identity of the underlying buffer, used by tests for aliasing checks.
  const void* storage_id() const { return st_.get(); }

 private:
  Shape shape_;
  std::shared_ptr<detail::TensorStorage<T>> st_;
};

// Ordered record of executed operations. Confined to one logical thread;
// parallelism happens only across independent tapes.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  void record(const char* op, std::function<void()> fn) {
    if (consumed_) throw Error(std::string(op) + ": recording on a consumed tape");
    nodes_.push_back({op, std::move(fn)});
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    nodes_.clear();
    consumed_ = true;
  }

 private:
  struct Node {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Activates a fresh tape for the enclosing scope.
template <typename T>
class TapeScope {
 public:
  TapeScope() : prev_(Tape<T>::current()) { Tape<T>::current() = &tape_; }
  ~TapeScope() { Tape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape<T>& tape() { return tape_; }

 private:
  Tape<T> tape_;
  Tape<T>* prev_;
};

// Suspends recording for the enclosing scope (evaluation, finite-difference
// probes).
template <typename T>
class NoTapeScope {
 public:
  NoTapeScope() : prev_(Tape<T>::current()) { Tape<T>::current() = nullptr; }
  ~NoTapeScope() { Tape<T>::current() = prev_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Propagates d(loss)/d(leaf) into every gradient-tracked leaf reachable from
// loss on the active tape. The tape is consumed.
template <typename T>
inline void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape) throw Error("backward: no active computation tape");
  if (tape->consumed()) throw Error("backward: tape already consumed by a previous backward pass");
  if (loss.numel() != 1) throw Error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad() || !loss.grad_allocated())
    throw Error("backward: loss is not connected to any gradient-tracked input");
  loss.grad_raw()[0] = T(1);
  tape->run_backward();
}

namespace detail {

template <typename T>
inline void check_finite(const char* op, const Tensor<T>& t) {
  const auto& v = t.raw();
  for (size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      throw Error(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
}

// Common tail of every forward op: reject non-finite outputs, then register
// the backward rule when something upstream tracks gradients.
template <typename T>
inline void finalize_op(const char* op, std::initializer_list<Tensor<T>> inputs, Tensor<T>& out,
                        std::function<void()> backward_fn) {
  check_finite(op, out);
  Tape<T>* tape = Tape<T>::current();
  if (!tape) return;
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || in.requires_grad();
  if (!tracked) return;
  for (const auto& in : inputs)
    if (in.requires_grad()) in.ensure_grad();
  out.set_requires_grad(true);
  out.ensure_grad();
  tape->record(op, std::move(backward_fn));
}

// Row-major strides, zeroed on axes the shape broadcasts along once aligned
// (right-justified) to out_rank.
inline std::vector<long long> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<long long> strides(out.size(), 0);
  long long s = 1;
  for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
    size_t oi = out.size() - (in.size() - static_cast<size_t>(i));
    strides[oi] = (in[static_cast<size_t>(i)] == 1 && out[oi] != 1) ? 0 : s;
    s *= in[static_cast<size_t>(i)];
  }
  return strides;
}

// Walks the output index space of a broadcast pair, handing (out, a, b) flat
// offsets to fn in row-major order.
template <class F>
inline void broadcast_walk(const Shape& out, const Shape& a, const Shape& b, F&& fn) {
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const int rank = static_cast<int>(out.size());
  const long long n = numel_of(out);
  std::vector<int> idx(out.size(), 0);
  long long oa = 0, ob = 0;
  for (long long i = 0; i < n; ++i) {
    fn(i, oa, ob);
    for (int ax = rank - 1; ax >= 0; --ax) {
      ++idx[static_cast<size_t>(ax)];
      oa += sa[static_cast<size_t>(ax)];
      ob += sb[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < out[static_cast<size_t>(ax)]) break;
      oa -= sa[static_cast<size_t>(ax)] * out[static_cast<size_t>(ax)];
      ob -= sb[static_cast<size_t>(ax)] * out[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
}

}  // namespace detail

// Shape two operands broadcast to: ranks aligned by prepending size-1 axes,
// then per axis the extents must match or one side must be 1.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()), 1);
  for (size_t i = 0; i < out.size(); ++i) {
    int ea = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    int eb = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw Error(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace detail {

// out[...] = f(a[...], b[...]) under broadcasting; dfa/dfb give the two
// partial derivatives for the backward rule.
template <typename T, class F, class Dfa, class Dfb>
inline Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, Dfa dfa, Dfb dfb) {
  Shape os = broadcast_shape(op, a.shape(), b.shape());
  Tensor<T> out(os);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  broadcast_walk(os, a.shape(), b.shape(),
                 [&](long long i, long long ia, long long ib) { po[i] = f(pa[ia], pb[ib]); });
  Tensor<T> ac = a, bc = b, oc = out;
  finalize_op(op, {a, b}, out, [ac, bc, oc, os, dfa, dfb]() {
    const auto& g = oc.grad_raw();
    const T* pa2 = ac.data();
    const T* pb2 = bc.data();
    T* ga = ac.requires_grad() ? ac.grad_raw().data() : nullptr;
    T* gb = bc.requires_grad() ? bc.grad_raw().data() : nullptr;
    broadcast_walk(os, ac.shape(), bc.shape(), [&](long long i, long long ia, long long ib) {
      if (ga) ga[ia] += g[static_cast<size_t>(i)] * dfa(pa2[ia], pb2[ib]);
      if (gb) gb[ib] += g[static_cast<size_t>(i)] * dfb(pa2[ia], pb2[ib]);
    });
  });
  return out;
}

template <typename T, class F, class Df>
inline Tensor<T> unary_op(const char* op, const Tensor<T>& x, F f, Df df) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const int n = x.numel();
  for (int i = 0; i < n; ++i) po[i] = f(px[i]);
  Tensor<T> xc = x, oc = out;
  finalize_op(op, {x}, out, [xc, oc, df]() {
    if (!xc.requires_grad()) return;
    const auto& g = oc.grad_raw();
    const T* px2 = xc.data();
    const T* po2 = oc.data();
    T* gx = xc.grad_raw().data();
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(px2[i], po2[i]);
  });
  return out;
}

}  // namespace detail

template <typename T>
inline Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
inline Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
inline Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
inline Tensor<T> add(const Tensor<T>& a, T c) {
  return add(a, Tensor<T>::scalar(c));
}
template <typename T>
inline Tensor<T> mul(const Tensor<T>& a, T c) {
  return mul(a, Tensor<T>::scalar(c));
}

template <typename T>
inline Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
inline Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// Subgradient at 0 is 0, keeping l1-style losses deterministic.
template <typename T>
inline Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

namespace detail {

inline Shape reduced_shape(const Shape& in, const std::vector<int>& axes, bool keepdims) {
  std::vector<bool> drop(in.size(), false);
  for (int ax : axes) drop[static_cast<size_t>(ax)] = true;
  Shape out;
  for (size_t i = 0; i < in.size(); ++i) {
    if (drop[i]) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(in[i]);
    }
  }
  return out;
}

inline std::vector<int> checked_axes(const char* op, const Shape& in, const std::vector<int>& axes) {
  std::vector<int> ax = axes;
  std::sort(ax.begin(), ax.end());
  ax.erase(std::unique(ax.begin(), ax.end()), ax.end());
  for (int a : ax)
    if (a < 0 || a >= static_cast<int>(in.size()))
      throw Error(std::string(op) + ": axis " + std::to_string(a) + " invalid for shape " + shape_str(in));
  return ax;
}

// Flat offset into the reduced tensor for every input element, row-major.
// Accumulating through this mapping is the fixed sequential reduction order.
template <class F>
inline void reduce_walk(const Shape& in, const std::vector<int>& axes, bool keepdims, F&& fn) {
  Shape out = reduced_shape(in, axes, true);  // keepdims layout shares flat offsets
  (void)keepdims;
  const auto so = broadcast_strides(out, in);
  const int rank = static_cast<int>(in.size());
  const long long n = numel_of(in);
  std::vector<int> idx(in.size(), 0);
  long long oo = 0;
  for (long long i = 0; i < n; ++i) {
    fn(i, oo);
    for (int ax = rank - 1; ax >= 0; --ax) {
      ++idx[static_cast<size_t>(ax)];
      oo += so[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < in[static_cast<size_t>(ax)]) break;
      oo -= so[static_cast<size_t>(ax)] * in[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
}

}  // namespace detail

// Sum over the given axes. An empty axis set is an identity copy.
template <typename T>
inline Tensor<T> sum(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims = false) {
  auto ax = detail::checked_axes("sum", x.shape(), axes);
  if (ax.empty()) {
    Tensor<T> out(x.shape(), x.raw());
    Tensor<T> xc = x, oc = out;
    detail::finalize_op("sum", {x}, out, [xc, oc]() {
      if (!xc.requires_grad()) return;
      const auto& g = oc.grad_raw();
      auto& gx = xc.grad_raw();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    return out;
  }
  Tensor<T> out(detail::reduced_shape(x.shape(), ax, keepdims));
  const T* px = x.data();
  T* po = out.data();
  detail::reduce_walk(x.shape(), ax, keepdims, [&](long long i, long long oo) { po[oo] += px[i]; });
  Shape in_shape = x.shape();
  Tensor<T> xc = x, oc = out;
  detail::finalize_op("sum", {x}, out, [xc, oc, in_shape, ax]() {
    if (!xc.requires_grad()) return;
    const auto& g = oc.grad_raw();
    T* gx = xc.grad_raw().data();
    detail::reduce_walk(in_shape, ax, true, [&](long long i, long long oo) { gx[i] += g[static_cast<size_t>(oo)]; });
  });
  return out;
}

// Convenience: sum over every axis, producing a scalar.
template <typename T>
inline Tensor<T> sum_all(const Tensor<T>& x) {
  std::vector<int> axes(static_cast<size_t>(x.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  return sum(x, axes);  // rank 0 gives the empty axis set, an identity copy
}

// l2_norm(x) = sqrt(sum(x^2) + eps) over the given axes. The squared values
// accumulate in the same row-major order sum() uses. eps > 0 keeps the result
// strictly positive (and the gradient finite) at the zero vector.
template <typename T>
inline Tensor<T> l2_norm(const Tensor<T>& x, const std::vector<int>& axes, T eps, bool keepdims = false) {
  if (eps < T(0)) throw Error("l2_norm: epsilon must be nonnegative");
  auto ax = detail::checked_axes("l2_norm", x.shape(), axes);
  if (ax.empty()) {
    // Identity-copy semantics of the empty axis set applied to the norm of
    // single elements: sqrt(x^2 + eps) per element.
    return detail::unary_op<T>(
        "l2_norm", x, [eps](T v) { return std::sqrt(v * v + eps); },
        [eps](T v, T y) { return y > T(0) ? v / y : T(0); });
  }
  Shape os = detail::reduced_shape(x.shape(), ax, keepdims);
  Tensor<T> out(os);
  const T* px = x.data();
  T* po = out.data();
  detail::reduce_walk(x.shape(), ax, keepdims, [&](long long i, long long oo) { po[oo] += px[i] * px[i]; });
  for (int i = 0; i < out.numel(); ++i) po[i] = std::sqrt(po[i] + eps);
  Shape in_shape = x.shape();
  Tensor<T> xc = x, oc = out;
  detail::finalize_op("l2_norm", {x}, out, [xc, oc, in_shape, ax]() {
    if (!xc.requires_grad()) return;
    const auto& g = oc.grad_raw();
    const T* py = oc.data();
    const T* px2 = xc.data();
    T* gx = xc.grad_raw().data();
    detail::reduce_walk(in_shape, ax, true, [&](long long i, long long oo) {
      T y = py[oo];
      if (y > T(0)) gx[i] += g[static_cast<size_t>(oo)] * px2[i] / y;
    });
  });
  return out;
}

// Same data, new shape. Element count must match.
template <typename T>
inline Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  validate_shape("reshape", shape);
  if (numel_of(shape) != x.numel())
    throw Error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> out(std::move(shape), x.raw());
  Tensor<T> xc = x, oc = out;
  detail::finalize_op("reshape", {x}, out, [xc, oc]() {
    if (!xc.requires_grad()) return;
    const auto& g = oc.grad_raw();
    auto& gx = xc.grad_raw();
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

}  // namespace pscnet
