#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
// The graph is built dynamically per forward pass: every operation creates a
// node holding its output values, links to its parent nodes and a closure
// that accumulates gradients into them. backward() walks the nodes in
// reverse creation order (a valid topological order by construction), so two
// runs over the same graph produce bit-identical gradients.
//
// Finite inputs must yield finite outputs: every op validates its result and
// throws NumericError instead of letting NaN/Inf propagate silently.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fusenmt/common.hpp"

namespace fusenmt {

using Shape = std::vector<std::int64_t>;

// Additive mask sentinel standing in for -inf. Kept finite so stabilized
// softmax never computes inf - inf. Anything at or below kMaskThreshold is
// treated as hard-masked (probability exactly zero).
inline constexpr double kNegInf = -1e9;
inline constexpr double kMaskThreshold = -5e8;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline std::atomic<std::uint64_t> next_node_id{1};

inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size());
  std::int64_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[i] = acc;
    acc *= shape[i];
  }
  return strides;
}

// Strides for reading `in` while iterating an `out`-shaped index space;
// broadcast dimensions get stride 0. Ranks are right-aligned.
inline std::vector<std::int64_t> broadcast_strides(const Shape& in,
                                                   const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  auto in_strides = row_major_strides(in);
  for (std::size_t i = 0; i < in.size(); ++i) {
    std::size_t o = out.size() - in.size() + i;
    if (in[i] == out[o]) {
      strides[o] = in_strides[i];
    } else if (in[i] == 1) {
      strides[o] = 0;
    } else {
      throw ShapeError("broadcast mismatch: " + shape_str(in) + " vs " +
                       shape_str(out));
    }
  }
  return strides;
}

}  // namespace detail

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    std::int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

template <typename Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> values;
  std::vector<Real> grad;  // allocated on demand, same length as values
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t id = 0;
  std::string name;  // set for registered parameters
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), Real(0));
  }
};

template <typename Real>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<Real> values) {
    if (numel(shape) != static_cast<std::int64_t>(values.size())) {
      throw ShapeError("shape " + shape_str(shape) + " wants " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    for (auto d : shape) {
      if (d <= 0) throw ContractError("non-positive dimension in " + shape_str(shape));
    }
    node_ = std::make_shared<TensorNode<Real>>();
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->id = detail::next_node_id.fetch_add(1);
  }

  Tensor(Shape shape, Real fill)
      : Tensor(shape, std::vector<Real>(static_cast<std::size_t>(numel(shape)), fill)) {}

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Real(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Real(1)); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return numel(node_->shape); }
  std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::uint64_t id() const { return node_->id; }
  const std::string& name() const { return node_->name; }

  const std::vector<Real>& values() const { return node_->values; }
  std::vector<Real>& mutable_values() { return node_->values; }
  const std::vector<Real>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  Real value() const {
    if (size() != 1) {
      throw ContractError("value() on non-scalar tensor " + shape_str(shape()));
    }
    return node_->values[0];
  }

  Real at(std::initializer_list<std::int64_t> idx) const {
    auto strides = detail::row_major_strides(node_->shape);
    std::int64_t off = 0;
    std::size_t i = 0;
    for (auto v : idx) off += v * strides[i++];
    return node_->values[static_cast<std::size_t>(off)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  // Registers this leaf as a named trainable parameter.
  Tensor& mark_trainable(std::string name) {
    node_->requires_grad = true;
    node_->name = std::move(name);
    return *this;
  }

  void zero_grad() { node_->grad.clear(); }

  std::shared_ptr<TensorNode<Real>>& node() { return node_; }
  const std::shared_ptr<TensorNode<Real>>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<TensorNode<Real>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<TensorNode<Real>> node_;
};

// Gradients keyed by parameter node id. Holds exactly the trainable leaves
// that participated in the loss.
template <typename Real>
struct GradTable {
  std::unordered_map<std::uint64_t, Tensor<Real>> by_id;
  std::unordered_map<std::string, std::uint64_t> name_index;

  bool contains(const Tensor<Real>& param) const {
    return by_id.count(param.id()) > 0;
  }
  const Tensor<Real>& at(const Tensor<Real>& param) const {
    return by_id.at(param.id());
  }
};

namespace detail {

template <typename Real>
void check_finite(const std::vector<Real>& v, const char* op) {
  for (const Real x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

template <typename Real>
std::shared_ptr<TensorNode<Real>> make_op_node(
    Shape shape, std::vector<Real> values, const char* op,
    std::vector<std::shared_ptr<TensorNode<Real>>> parents,
    std::function<void(TensorNode<Real>&)> backward_fn) {
  check_finite(values, op);
  auto n = std::make_shared<TensorNode<Real>>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->id = next_node_id.fetch_add(1);
  n->is_leaf = false;
  bool needs = false;
  for (auto& p : parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

// Accumulates `dy` (shaped `out_shape`) into `acc` (shaped `target`),
// summing over broadcast dimensions.
template <typename Real>
void reduce_into(const std::vector<Real>& dy, const Shape& out_shape,
                 std::vector<Real>& acc, const Shape& target) {
  if (out_shape == target) {
    for (std::size_t i = 0; i < dy.size(); ++i) acc[i] += dy[i];
    return;
  }
  auto strides = broadcast_strides(target, out_shape);
  Shape idx(out_shape.size(), 0);
  std::int64_t off = 0;
  const std::int64_t n = numel(out_shape);
  for (std::int64_t e = 0; e < n; ++e) {
    acc[static_cast<std::size_t>(off)] += dy[static_cast<std::size_t>(e)];
    for (std::size_t d = out_shape.size(); d-- > 0;) {
      idx[d]++;
      off += strides[d];
      if (idx[d] < out_shape[d]) break;
      off -= strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

template <typename Real, typename Fwd, typename DfA, typename DfB>
Tensor<Real> binary_elementwise(const Tensor<Real>& a, const Tensor<Real>& b,
                                const char* op, Fwd fwd, DfA dfa, DfB dfb) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::int64_t n = numel(out_shape);
  std::vector<Real> out(static_cast<std::size_t>(n));
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (std::int64_t i = 0; i < n; ++i) {
      out[i] = fwd(av[i], bv[i]);
    }
  } else {
    auto as = broadcast_strides(a.shape(), out_shape);
    auto bs = broadcast_strides(b.shape(), out_shape);
    Shape idx(out_shape.size(), 0);
    std::int64_t ao = 0, bo = 0;
    for (std::int64_t e = 0; e < n; ++e) {
      out[static_cast<std::size_t>(e)] = fwd(av[static_cast<std::size_t>(ao)],
                                             bv[static_cast<std::size_t>(bo)]);
      for (std::size_t d = out_shape.size(); d-- > 0;) {
        idx[d]++;
        ao += as[d];
        bo += bs[d];
        if (idx[d] < out_shape[d]) break;
        ao -= as[d] * out_shape[d];
        bo -= bs[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  auto an = a.node();
  auto bn = b.node();
  auto node = make_op_node<Real>(
      out_shape, std::move(out), op, {an, bn},
      [an, bn, out_shape, dfa, dfb](TensorNode<Real>& self) {
        const std::int64_t n = numel(out_shape);
        auto eval_partial = [&](const std::shared_ptr<TensorNode<Real>>& target,
                                auto df) {
          if (!target->requires_grad) return;
          target->ensure_grad();
          std::vector<Real> dy(static_cast<std::size_t>(n));
          auto as = broadcast_strides(an->shape, out_shape);
          auto bs = broadcast_strides(bn->shape, out_shape);
          Shape idx(out_shape.size(), 0);
          std::int64_t ao = 0, bo = 0;
          for (std::int64_t e = 0; e < n; ++e) {
            dy[static_cast<std::size_t>(e)] =
                self.grad[static_cast<std::size_t>(e)] *
                df(an->values[static_cast<std::size_t>(ao)],
                   bn->values[static_cast<std::size_t>(bo)]);
            for (std::size_t d = out_shape.size(); d-- > 0;) {
              idx[d]++;
              ao += as[d];
              bo += bs[d];
              if (idx[d] < out_shape[d]) break;
              ao -= as[d] * out_shape[d];
              bo -= bs[d] * out_shape[d];
              idx[d] = 0;
            }
          }
          reduce_into(dy, out_shape, target->grad, target->shape);
        };
        eval_partial(an, dfa);
        eval_partial(bn, dfb);
      });
  return Tensor<Real>::from_node(std::move(node));
}

template <typename Real, typename Fwd, typename Df>
Tensor<Real> unary_elementwise(const Tensor<Real>& a, const char* op, Fwd fwd,
                               Df df) {
  std::vector<Real> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.values()[i]);
  auto an = a.node();
  auto node = make_op_node<Real>(
      a.shape(), std::move(out), op, {an}, [an, df](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.values.size(); ++i) {
          an->grad[i] += self.grad[i] * df(an->values[i], self.values[i]);
        }
      });
  return Tensor<Real>::from_node(std::move(node));
}

template <typename Real>
using EigenMat =
    Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_elementwise(
      a, b, "add", [](Real x, Real y) { return x + y; },
      [](Real, Real) { return Real(1); }, [](Real, Real) { return Real(1); });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_elementwise(
      a, b, "sub", [](Real x, Real y) { return x - y; },
      [](Real, Real) { return Real(1); }, [](Real, Real) { return Real(-1); });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_elementwise(
      a, b, "mul", [](Real x, Real y) { return x * y; },
      [](Real, Real y) { return y; }, [](Real x, Real) { return x; });
}

template <typename Real>
Tensor<Real> divide(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_elementwise(
      a, b, "div", [](Real x, Real y) { return x / y; },
      [](Real, Real y) { return Real(1) / y; },
      [](Real x, Real y) { return -x / (y * y); });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  return detail::unary_elementwise(
      a, "scale", [c](Real x) { return c * x; },
      [c](Real, Real) { return c; });
}

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real c) {
  return detail::unary_elementwise(
      a, "add_scalar", [c](Real x) { return x + c; },
      [](Real, Real) { return Real(1); });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  return detail::unary_elementwise(
      a, "sigmoid",
      [](Real x) {
        if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
        Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  return detail::unary_elementwise(
      a, "relu", [](Real x) { return x > 0 ? x : Real(0); },
      [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

template <typename Real>
Tensor<Real> sqrt(const Tensor<Real>& a) {
  return detail::unary_elementwise(
      a, "sqrt", [](Real x) { return std::sqrt(x); },
      [](Real, Real y) { return Real(0.5) / y; });
}

// Copies values into a fresh leaf: gradients stop here. Used to keep frozen
// BSLM representations out of the NMT parameter updates.
template <typename Real>
Tensor<Real> stop_gradient(const Tensor<Real>& a) {
  return Tensor<Real>(a.shape(), a.values());
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape new_shape) {
  if (numel(new_shape) != a.size()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " +
                     shape_str(new_shape) + " changes element count");
  }
  auto an = a.node();
  Shape old_shape = a.shape();
  auto node = detail::make_op_node<Real>(
      std::move(new_shape), a.values(), "reshape", {an},
      [an](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          an->grad[i] += self.grad[i];
        }
      });
  return Tensor<Real>::from_node(std::move(node));
}

template <typename Real>
Tensor<Real> permute(const Tensor<Real>& a, std::vector<std::size_t> axes) {
  if (axes.size() != a.rank()) {
    throw ContractError("permute axes rank mismatch");
  }
  Shape out_shape(a.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = a.shape()[axes[i]];
  auto in_strides = detail::row_major_strides(a.shape());
  std::vector<std::int64_t> gather(a.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) gather[i] = in_strides[axes[i]];

  const std::int64_t n = a.size();
  std::vector<Real> out(static_cast<std::size_t>(n));
  std::vector<std::int64_t> src_of(static_cast<std::size_t>(n));
  Shape idx(a.rank(), 0);
  std::int64_t off = 0;
  for (std::int64_t e = 0; e < n; ++e) {
    out[static_cast<std::size_t>(e)] = a.values()[static_cast<std::size_t>(off)];
    src_of[static_cast<std::size_t>(e)] = off;
    for (std::size_t d = a.rank(); d-- > 0;) {
      idx[d]++;
      off += gather[d];
      if (idx[d] < out_shape[d]) break;
      off -= gather[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  auto an = a.node();
  auto node = detail::make_op_node<Real>(
      std::move(out_shape), std::move(out), "permute", {an},
      [an, src_of = std::move(src_of)](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t e = 0; e < self.grad.size(); ++e) {
          an->grad[static_cast<std::size_t>(src_of[e])] += self.grad[e];
        }
      });
  return Tensor<Real>::from_node(std::move(node));
}

// Swap the last two axes; identity helper for building K^T in attention.
template <typename Real>
Tensor<Real> transpose_last2(const Tensor<Real>& a) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, std::move(axes));
}

// Contiguous range along one axis.
template <typename Real>
Tensor<Real> slice(const Tensor<Real>& a, std::size_t axis, std::int64_t start,
                   std::int64_t len) {
  if (axis >= a.rank() || start < 0 || len <= 0 ||
      start + len > a.shape()[axis]) {
    throw ContractError("slice out of range on axis " + std::to_string(axis) +
                        " of " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  const std::int64_t axis_dim = a.shape()[axis];
  std::vector<Real> out(static_cast<std::size_t>(outer * len * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    const Real* src = a.values().data() + (o * axis_dim + start) * inner;
    std::copy(src, src + len * inner, out.data() + o * len * inner);
  }
  auto an = a.node();
  auto node = detail::make_op_node<Real>(
      std::move(out_shape), std::move(out), "slice", {an},
      [an, axis, start, len, outer, inner, axis_dim](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          Real* dst = an->grad.data() + (o * axis_dim + start) * inner;
          const Real* g = self.grad.data() + o * len * inner;
          for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
        }
      });
  return Tensor<Real>::from_node(std::move(node));
}

// Matrix product with optional leading batch dimensions. Supports
// [..,p,q] x [..,q,r] with identical batch dims, and rank-2 weights on
// either side (shared across the batch).
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  using Mat = detail::EigenMat<Real>;
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2, got " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  const std::int64_t p = a.shape()[a.rank() - 2];
  const std::int64_t q = a.shape()[a.rank() - 1];
  const std::int64_t q2 = b.shape()[b.rank() - 2];
  const std::int64_t r = b.shape()[b.rank() - 1];
  if (q != q2) {
    throw ShapeError("matmul inner dimension mismatch: " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  if (!a_batch.empty() && !b_batch.empty() && a_batch != b_batch) {
    throw ShapeError("matmul batch dims differ: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  Shape batch = a_batch.empty() ? b_batch : a_batch;
  const std::int64_t nb = numel(batch);
  Shape out_shape = batch;
  out_shape.push_back(p);
  out_shape.push_back(r);

  const bool a_batched = !a_batch.empty();
  const bool b_batched = !b_batch.empty();
  std::vector<Real> out(static_cast<std::size_t>(nb * p * r));
  for (std::int64_t i = 0; i < nb; ++i) {
    Eigen::Map<const Mat> A(a.values().data() + (a_batched ? i * p * q : 0), p, q);
    Eigen::Map<const Mat> B(b.values().data() + (b_batched ? i * q * r : 0), q, r);
    Eigen::Map<Mat> C(out.data() + i * p * r, p, r);
    C.noalias() = A * B;
  }
  auto an = a.node();
  auto bn = b.node();
  auto node = detail::make_op_node<Real>(
      std::move(out_shape), std::move(out), "matmul", {an, bn},
      [an, bn, p, q, r, nb, a_batched, b_batched](TensorNode<Real>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::int64_t i = 0; i < nb; ++i) {
            Eigen::Map<const Mat> dC(self.grad.data() + i * p * r, p, r);
            Eigen::Map<const Mat> B(bn->values.data() + (b_batched ? i * q * r : 0), q, r);
            Eigen::Map<Mat> dA(an->grad.data() + (a_batched ? i * p * q : 0), p, q);
            dA.noalias() += dC * B.transpose();
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::int64_t i = 0; i < nb; ++i) {
            Eigen::Map<const Mat> dC(self.grad.data() + i * p * r, p, r);
            Eigen::Map<const Mat> A(an->values.data() + (a_batched ? i * p * q : 0), p, q);
            Eigen::Map<Mat> dB(bn->grad.data() + (b_batched ? i * q * r : 0), q, r);
            dB.noalias() += A.transpose() * dC;
          }
        }
      });
  return Tensor<Real>::from_node(std::move(node));
}

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
  Real s = 0;
  for (Real v : a.values()) s += v;
  auto an = a.node();
  auto node = detail::make_op_node<Real>(
      Shape{}, std::vector<Real>{s}, "sum_all", {an},
      [an](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const Real g = self.grad[0];
        for (auto& x : an->grad) x += g;
      });
  return Tensor<Real>::from_node(std::move(node));
}

template <typename Real>
Tensor<Real> sum_axis(const Tensor<Real>& a, std::size_t axis, bool keepdim) {
  if (axis >= a.rank()) throw ContractError("sum_axis: axis out of range");
  std::int64_t outer = 1, inner = 1;
  const std::int64_t axis_dim = a.shape()[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(a.shape()[i]);
    }
  }
  std::vector<Real> out(static_cast<std::size_t>(outer * inner), Real(0));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t k = 0; k < axis_dim; ++k) {
      const Real* src = a.values().data() + (o * axis_dim + k) * inner;
      Real* dst = out.data() + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  auto an = a.node();
  auto node = detail::make_op_node<Real>(
      std::move(out_shape), std::move(out), "sum_axis", {an},
      [an, outer, inner, axis_dim](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          const Real* g = self.grad.data() + o * inner;
          for (std::int64_t k = 0; k < axis_dim; ++k) {
            Real* dst = an->grad.data() + (o * axis_dim + k) * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += g[i];
          }
        }
      });
  return Tensor<Real>::from_node(std::move(node));
}

template <typename Real>
Tensor<Real> mean_axis(const Tensor<Real>& a, std::size_t axis, bool keepdim) {
  return scale(sum_axis(a, axis, keepdim),
               Real(1) / Real(a.shape()[axis]));
}

// Softmax over the last dimension with an optional additive mask
// broadcastable to `a`. Mask entries at or below kMaskThreshold hard-mask
// their position: it is excluded from the max/sum and gets probability
// exactly zero. Other mask values act as plain additive bias.
template <typename Real>
Tensor<Real> softmax_lastdim(const Tensor<Real>& a,
                             const Tensor<Real>* mask = nullptr) {
  const std::int64_t cols = a.shape().empty() ? 1 : a.shape()[a.rank() - 1];
  const std::int64_t rows = a.size() / cols;
  std::vector<std::int64_t> mstr;
  if (mask) {
    mstr = detail::broadcast_strides(mask->shape(), a.shape());
  }
  auto mask_offset = [&](std::int64_t row, std::int64_t col) -> std::int64_t {
    // walk the full index of element (row, col) through mask strides
    std::int64_t off = 0;
    std::int64_t rem = row * cols + col;
    for (std::size_t d = a.rank(); d-- > 0;) {
      std::int64_t dim = a.shape()[d];
      off += (rem % dim) * mstr[d];
      rem /= dim;
    }
    return off;
  };

  std::vector<Real> out(a.values().size());
  const auto& av = a.values();
  const Real threshold = Real(kMaskThreshold);
  for (std::int64_t rI = 0; rI < rows; ++rI) {
    Real mx = -std::numeric_limits<Real>::infinity();
    bool any = false;
    for (std::int64_t c = 0; c < cols; ++c) {
      Real m = mask ? mask->values()[static_cast<std::size_t>(mask_offset(rI, c))] : Real(0);
      if (m <= threshold) continue;
      any = true;
      Real v = av[static_cast<std::size_t>(rI * cols + c)] + m;
      mx = std::max(mx, v);
    }
    if (!any) {
      throw DegenerateDistributionError(
          "softmax slice " + std::to_string(rI) +
          " has every position masked (empty attention context)");
    }
    Real sum = 0;
    for (std::int64_t c = 0; c < cols; ++c) {
      Real m = mask ? mask->values()[static_cast<std::size_t>(mask_offset(rI, c))] : Real(0);
      std::size_t i = static_cast<std::size_t>(rI * cols + c);
      if (m <= threshold) {
        out[i] = Real(0);
      } else {
        out[i] = std::exp(av[i] + m - mx);
        sum += out[i];
      }
    }
    const Real inv = Real(1) / sum;
    for (std::int64_t c = 0; c < cols; ++c) {
      out[static_cast<std::size_t>(rI * cols + c)] *= inv;
    }
  }
  auto an = a.node();
  auto node = detail::make_op_node<Real>(
      a.shape(), std::move(out), "softmax_lastdim", {an},
      [an, rows, cols](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::int64_t rI = 0; rI < rows; ++rI) {
          const Real* s = self.values.data() + rI * cols;
          const Real* dy = self.grad.data() + rI * cols;
          Real dot = 0;
          for (std::int64_t c = 0; c < cols; ++c) dot += dy[c] * s[c];
          Real* dx = an->grad.data() + rI * cols;
          for (std::int64_t c = 0; c < cols; ++c) {
            dx[c] += s[c] * (dy[c] - dot);
          }
        }
      });
  return Tensor<Real>::from_node(std::move(node));
}

template <typename Real>
Tensor<Real> log_softmax_lastdim(const Tensor<Real>& a) {
  const std::int64_t cols = a.shape().empty() ? 1 : a.shape()[a.rank() - 1];
  const std::int64_t rows = a.size() / cols;
  std::vector<Real> out(a.values().size());
  const auto& av = a.values();
  for (std::int64_t rI = 0; rI < rows; ++rI) {
    const Real* x = av.data() + rI * cols;
    Real mx = x[0];
    for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    Real sum = 0;
    for (std::int64_t c = 0; c < cols; ++c) sum += std::exp(x[c] - mx);
    const Real lse = mx + std::log(sum);
    Real* y = out.data() + rI * cols;
    for (std::int64_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
  }
  auto an = a.node();
  auto node = detail::make_op_node<Real>(
      a.shape(), std::move(out), "log_softmax_lastdim", {an},
      [an, rows, cols](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::int64_t rI = 0; rI < rows; ++rI) {
          const Real* y = self.values.data() + rI * cols;
          const Real* dy = self.grad.data() + rI * cols;
          Real total = 0;
          for (std::int64_t c = 0; c < cols; ++c) total += dy[c];
          Real* dx = an->grad.data() + rI * cols;
          for (std::int64_t c = 0; c < cols; ++c) {
            dx[c] += dy[c] - std::exp(y[c]) * total;
          }
        }
      });
  return Tensor<Real>::from_node(std::move(node));
}

// Row gather from an embedding table. Differentiable w.r.t. the table.
template <typename Real>
Tensor<Real> embedding_rows(const Tensor<Real>& table,
                            const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  const std::int64_t v = table.shape()[0];
  const std::int64_t d = table.shape()[1];
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw VocabError("token id " + std::to_string(id) +
                       " outside vocabulary of size " + std::to_string(v));
    }
  }
  std::vector<Real> out(ids.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Real* src = table.values().data() + static_cast<std::int64_t>(ids[i]) * d;
    std::copy(src, src + d, out.data() + i * static_cast<std::size_t>(d));
  }
  auto tn = table.node();
  auto node = detail::make_op_node<Real>(
      Shape{static_cast<std::int64_t>(ids.size()), d}, std::move(out),
      "embedding_rows", {tn}, [tn, ids, d](TensorNode<Real>& self) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          Real* dst = tn->grad.data() + static_cast<std::int64_t>(ids[i]) * d;
          const Real* g = self.grad.data() + i * static_cast<std::size_t>(d);
          for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
        }
      });
  return Tensor<Real>::from_node(std::move(node));
}

// Inverted dropout with an explicit 0/1 keep mask (deterministic core; the
// RNG wrapper below draws the mask).
template <typename Real>
Tensor<Real> dropout_with_mask(const Tensor<Real>& a,
                               const std::vector<Real>& keep_mask, Real rate) {
  if (keep_mask.size() != a.values().size()) {
    throw ShapeError("dropout mask size mismatch");
  }
  const Real inv_keep = Real(1) / (Real(1) - rate);
  std::vector<Real> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.values()[i] * keep_mask[i] * inv_keep;
  }
  auto an = a.node();
  auto node = detail::make_op_node<Real>(
      a.shape(), std::move(out), "dropout", {an},
      [an, keep_mask, inv_keep](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          an->grad[i] += self.grad[i] * keep_mask[i] * inv_keep;
        }
      });
  return Tensor<Real>::from_node(std::move(node));
}

template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& a, Real rate, Rng& rng) {
  if (rate <= 0) return a;
  if (rate >= 1) throw ContractError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  std::vector<Real> mask(a.values().size());
  for (auto& m : mask) m = keep(rng) ? Real(1) : Real(0);
  return dropout_with_mask(a, mask, rate);
}

// Reverse-mode sweep from a scalar loss. Returns gradients for every
// trainable leaf that participated. Deterministic: nodes are processed in
// strictly decreasing creation order.
template <typename Real>
GradTable<Real> backward(const Tensor<Real>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        shape_str(loss.shape()));
  }
  // collect reachable grad-requiring subgraph
  std::vector<std::shared_ptr<TensorNode<Real>>> nodes;
  std::unordered_set<std::uint64_t> seen;
  std::vector<std::shared_ptr<TensorNode<Real>>> stack{loss.node()};
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || seen.count(n->id)) continue;
    seen.insert(n->id);
    nodes.push_back(n);
    for (auto& p : n->parents) stack.push_back(p);
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const auto& x, const auto& y) { return x->id > y->id; });

  loss.node()->ensure_grad();
  loss.node()->grad[0] = Real(1);
  GradTable<Real> table;
  for (auto& n : nodes) {
    if (n->backward_fn) {
      n->backward_fn(*n);
    } else if (n->is_leaf && n->requires_grad) {
      n->ensure_grad();
      Tensor<Real> g(n->shape, n->grad);
      table.by_id.emplace(n->id, std::move(g));
      if (!n->name.empty()) table.name_index.emplace(n->name, n->id);
    }
  }
  return table;
}

// Compares analytic gradients of f at x against central finite differences.
// Returns the max over elements of |analytic - numeric| / (|a| + |n| + 1e-12).
template <typename Real, typename F>
Real finite_diff_check(F f, const Tensor<Real>& x, Real eps) {
  if (!(eps > Real(0) && eps <= Real(1e-2))) {
    throw ContractError("finite_diff_check: eps must be in (0, 1e-2]");
  }
  Tensor<Real> probe(x.shape(), x.values());
  probe.set_requires_grad(true);

  Tensor<Real> loss = f(probe);
  if (loss.size() != 1) throw ContractError("finite_diff_check: f must be scalar");
  {
    const Real first = loss.value();
    const Real second = f(probe).value();
    if (std::memcmp(&first, &second, sizeof(Real)) != 0) {
      throw OracleInvalidError("finite_diff_check: f is non-deterministic");
    }
  }
  GradTable<Real> grads = backward(loss);
  if (!grads.contains(probe)) {
    throw ContractError("finite_diff_check: x does not reach the loss");
  }
  const auto& analytic = grads.at(probe).values();

  Real max_err = 0;
  auto& v = probe.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Real orig = v[i];
    v[i] = orig + eps;
    const Real fp = f(probe).value();
    v[i] = orig - eps;
    const Real fm = f(probe).value();
    v[i] = orig;
    const Real numeric = (fp - fm) / (2 * eps);
    const Real denom = std::abs(analytic[i]) + std::abs(numeric) + Real(1e-12);
    max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
  }
  return max_err;
}

// --- value-level helpers (no gradient tracking) ---

template <typename Real>
void fill_uniform(Tensor<Real>& t, Rng& rng, Real lo, Real hi) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                              static_cast<double>(hi));
  for (auto& v : t.mutable_values()) v = static_cast<Real>(dist(rng));
}

// Fan-based scaled uniform init for a [fan_in, fan_out] matrix.
template <typename Real>
void init_glorot(Tensor<Real>& t, Rng& rng) {
  const Real fan_in = static_cast<Real>(t.shape()[0]);
  const Real fan_out = static_cast<Real>(t.shape()[t.rank() - 1]);
  const Real bound = std::sqrt(Real(6) / (fan_in + fan_out));
  fill_uniform(t, rng, -bound, bound);
}

}  // namespace fusenmt
