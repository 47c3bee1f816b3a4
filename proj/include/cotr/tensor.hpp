#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cotr/errors.hpp"

namespace cotr {

using Shape = std::vector<std::size_t>;

/// Closed set of differentiable primitives. Every kind has exactly one
/// backward rule in ops.hpp and a gradient check in gradcheck.hpp.
enum class OpKind {
  kLeaf,
  kAdd,
  kSubtract,
  kMultiply,
  kMatMul,
  kConv2d,
  kRelu,
  kSoftmax,
  kLayerNorm,
  kConcat,
  kSlice,
  kReshape,
  kTranspose,
  kMean,
  kSum,
  kSquaredL2,
  kMaxPool,
  kPosEncode,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSubtract: return "subtract";
    case OpKind::kMultiply: return "multiply";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kSquaredL2: return "squared_l2";
    case OpKind::kMaxPool: return "max_pool";
    case OpKind::kPosEncode: return "pos_encode";
  }
  return "unknown";
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

inline std::atomic<std::uint64_t> g_next_node_id{1};

template <class T>
struct Node;

/// Backward rule: reads the output gradient and accumulates into the
/// gradient buffers of parents (nullptr for parents outside the tape).
template <class T>
using BackwardFn = std::function<void(const Node<T>& self, std::span<const T> grad_out,
                                      std::span<std::vector<T>* const> parent_grads)>;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  OpKind op = OpKind::kLeaf;
  std::vector<std::shared_ptr<const Node>> parents;
  BackwardFn<T> backward;
  std::uint64_t id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
};

/// True when no element has an all-ones exponent (NaN or infinity).
template <class T>
bool all_finite(const std::vector<T>& v) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits kExp = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  Bits bad = 0;
  for (T x : v) bad |= Bits((std::bit_cast<Bits>(x) & kExp) == kExp);
  return bad == 0;
}

}  // namespace detail

/// Immutable n-dimensional array. Copies share storage. A tensor whose
/// inputs require gradients records its producing primitive so that
/// backward() can replay the composition in reverse.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    validate(shape, data.size());
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    node_ = std::move(node);
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape shape, T v) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t numel() const { return node().value.size(); }
  std::span<const T> data() const { return node().value; }
  const std::vector<T>& vec() const { return node().value; }
  T operator[](std::size_t i) const { return node().value[i]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node().value[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  OpKind op() const { return node().op; }
  std::uint64_t id() const { return node().id; }
  std::vector<std::uint64_t> parent_ids() const {
    std::vector<std::uint64_t> ids;
    for (const auto& p : node().parents) ids.push_back(p->id);
    return ids;
  }

  /// Fresh leaf with the same values.
  Tensor detach(bool requires_grad = false) const {
    return Tensor(shape(), vec(), requires_grad);
  }

  template <class U>
  Tensor<U> cast(bool requires_grad = false) const {
    std::vector<U> out(numel());
    std::transform(vec().begin(), vec().end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(out), requires_grad);
  }

  const detail::Node<T>& node() const {
    if (!node_) throw std::logic_error("access to undefined tensor");
    return *node_;
  }
  const std::shared_ptr<const detail::Node<T>>& node_ptr() const { return node_; }

  /// Records the result of a primitive. Throws NumericError on NaN/inf.
  static Tensor make_result(OpKind op, Shape shape, std::vector<T> value,
                            std::vector<Tensor> inputs, detail::BackwardFn<T> backward) {
    if (!detail::all_finite(value)) {
      throw NumericError(std::string("non-finite value produced by ") + std::string(op_name(op)) +
                         " with output shape " + shape_str(shape));
    }
    validate(shape, value.size());
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (auto& in : inputs) node->parents.push_back(in.node_);
      node->backward = std::move(backward);
    }
    Tensor out;
    out.node_ = std::move(node);
    return out;
  }

 private:
  static void validate(const Shape& shape, std::size_t size) {
    if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor extent must be positive: " + shape_str(shape));
    }
    if (numel_of(shape) != size) {
      throw ShapeError("data length " + std::to_string(size) + " does not match shape " +
                       shape_str(shape));
    }
  }

  std::shared_ptr<const detail::Node<T>> node_;
};

/// Gradients of one backward pass, keyed by tensor identity.
template <class T>
class Gradients {
 public:
  /// Gradient for `t`; zeros of matching shape if `t` was not reached.
  Tensor<T> of(const Tensor<T>& t) const {
    auto it = grads_.find(t.node_ptr().get());
    if (it == grads_.end()) return Tensor<T>::zeros(t.shape());
    return Tensor<T>(t.shape(), it->second);
  }
  bool reached(const Tensor<T>& t) const { return grads_.count(t.node_ptr().get()) != 0; }

 private:
  template <class U>
  friend Gradients<U> backward(const Tensor<U>& loss);
  std::unordered_map<const detail::Node<T>*, std::vector<T>> grads_;
};

/// Reverse-mode accumulation from a scalar loss. Only leaf gradients are
/// retained in the result.
template <class T>
Gradients<T> backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw std::logic_error("backward on a loss with no recorded tape");

  using NodeT = detail::Node<T>;
  std::vector<const NodeT*> order;
  std::unordered_map<const NodeT*, bool> seen;
  std::vector<const NodeT*> stack{loss.node_ptr().get()};
  while (!stack.empty()) {
    const NodeT* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || seen[n]) continue;
    seen[n] = true;
    order.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  // Ids are issued at creation, so parents always carry smaller ids.
  std::sort(order.begin(), order.end(), [](const NodeT* a, const NodeT* b) { return a->id > b->id; });

  // Buffers are zero-filled when the first consumer is about to write them.
  std::unordered_map<const NodeT*, std::vector<T>> buf;
  buf.reserve(order.size());
  buf[loss.node_ptr().get()].assign(1, T(1));

  Gradients<T> out;
  std::vector<std::vector<T>*> pgrads;
  for (const NodeT* n : order) {
    auto& g = buf[n];
    if (n->op == OpKind::kLeaf) {
      out.grads_[n] = std::move(g);
      continue;
    }
    pgrads.clear();
    for (const auto& p : n->parents) {
      if (!p->requires_grad) {
        pgrads.push_back(nullptr);
        continue;
      }
      auto& pb = buf[p.get()];
      if (pb.empty()) pb.assign(p->value.size(), T(0));
      pgrads.push_back(&pb);
    }
    n->backward(*n, g, pgrads);
    std::vector<T>().swap(g);
  }
  return out;
}

/// Named parameter set.
template <class T>
using ParamSet = std::map<std::string, Tensor<T>>;

/// Gradient of `loss` for every named parameter (zeros where unreached).
template <class T>
std::map<std::string, Tensor<T>> backward_accumulate(const Tensor<T>& loss, const ParamSet<T>& params) {
  const Gradients<T> g = backward(loss);
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, p] : params) out.emplace(name, g.of(p));
  return out;
}

template <class U, class T>
ParamSet<U> cast_params(const ParamSet<T>& params, bool requires_grad) {
  ParamSet<U> out;
  for (const auto& [name, p] : params) out.emplace(name, p.template cast<U>(requires_grad));
  return out;
}

template <class T>
ParamSet<T> with_grad(const ParamSet<T>& params, bool requires_grad = true) {
  ParamSet<T> out;
  for (const auto& [name, p] : params) out.emplace(name, p.detach(requires_grad));
  return out;
}

}  // namespace cotr
