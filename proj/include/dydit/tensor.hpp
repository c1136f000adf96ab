#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dydit/error.hpp"

namespace dydit {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  // Leaves: persistent accumulator. Interior nodes: scratch, released after use.
  std::vector<T> grad;
  bool requires_grad = false;
  std::string op;  // producing primitive; empty for leaves
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward;

  bool is_leaf() const { return op.empty(); }
};

/// Handle to a dense row-major tensor. Copies share storage; use clone() for
/// a deep copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
    for (auto e : shape) require(e >= 0, "negative extent in shape ", shape_str(shape));
    node_->data.assign(static_cast<std::size_t>(dydit::numel(shape)), fill);
    node_->shape = std::move(shape);
  }

  BasicTensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node>()) {
    require(static_cast<std::int64_t>(data.size()) == dydit::numel(shape), "data length ", data.size(),
            " does not match shape ", shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }

  static BasicTensor from_node(std::shared_ptr<Node> node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t i) const {
    return node_->shape[static_cast<std::size_t>(i < 0 ? rank() + i : i)];
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  // Writes bypass the computation record; only for parameters and buffers.
  std::span<T> mutable_data() { return node_->data; }
  T item() const {
    require(node_->data.size() == 1, "item() on tensor of shape ", shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool value) {
    require(node_->is_leaf() || !value, "requires_grad can only be set on leaves");
    node_->requires_grad = value;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  const std::string& op() const { return node_->op; }
  bool is_leaf() const { return node_->is_leaf(); }

  BasicTensor clone() const { return BasicTensor(shape(), std::vector<T>(node_->data)); }
  // A leaf holding the same values, cut off from the record.
  BasicTensor detach() const { return clone(); }

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_storage(const BasicTensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;

template <typename T>
BasicTensor<T> zeros_like(const BasicTensor<T>& t) {
  return BasicTensor<T>(t.shape(), T(0));
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& t) {
  std::vector<To> out(t.data().begin(), t.data().end());
  return BasicTensor<To>(t.shape(), std::move(out));
}

}  // namespace dydit
