// Copyright 2026 The r2r Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense float64 tensors with a reverse-mode gradient tape.
//
// Every op result remembers its parents and an adjoint closure. Nodes carry a
// per-thread sequence number assigned at creation, so sorting the reachable
// interior nodes by that number reproduces the execution order; the Tape
// replays adjoints in the reverse of that order.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "r2r/errors.hpp"

namespace r2r {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using Adjoint = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  // Propagates self.grad into the grads of parents that require them.
  Adjoint adjoint;

  bool interior() const { return static_cast<bool>(adjoint); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline std::uint64_t next_seq() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct TensorAccess;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Shared handle to a tensor node. Copies alias the same storage; use
/// detach() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = r2r::numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = r2r::numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (r2r::numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " holds " +
                           std::to_string(r2r::numel(shape)) + " elements but " +
                           std::to_string(data.size()) + " values were given");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->seq = detail::next_seq();
    return Tensor(std::move(node));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           to_string(shape()));
    }
    return node().shape[axis];
  }
  std::size_t numel() const { return node().data.size(); }

  std::span<const double> data() const { return node().data; }

  /// Writable view of a leaf's values. Op results are immutable.
  std::span<double> mutable_data() {
    if (node().interior()) {
      throw ContractError(std::string("cannot mutate the result of op '") + node().op + "'");
    }
    return node().data;
  }

  double item() const {
    if (numel() != 1) {
      throw DimensionError("item() needs a single-element tensor, got " + to_string(shape()));
    }
    return node().data[0];
  }

  double operator[](std::size_t flat) const { return node().data[flat]; }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) {
    if (node().interior()) throw ContractError("requires_grad can only be set on leaves");
    node().requires_grad = on;
  }

  bool has_grad() const { return node().grad.size() == node().data.size() && numel() > 0; }
  std::span<const double> grad() const { return node().grad; }
  std::span<double> mutable_grad() {
    node().ensure_grad();
    return node().grad;
  }
  void zero_grad() { node().grad.assign(node().data.size(), 0.0); }

  /// Independent leaf copy of the values, outside any graph.
  Tensor detach() const { return from_data(shape(), node().data, false); }

  std::string_view op_name() const { return node().op; }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend struct detail::TensorAccess;
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  detail::Node& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }

  detail::NodePtr node_;
};

namespace detail {

struct TensorAccess {
  static const NodePtr& node(const Tensor& t) {
    if (!t.node_) throw ContractError("use of an undefined tensor");
    return t.node_;
  }
  static Tensor wrap(NodePtr node) { return Tensor(std::move(node)); }
};

/// Builds an op result, wiring it into the graph when grad mode is on and any
/// input requires a gradient.
inline Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                          std::initializer_list<const Tensor*> inputs, Adjoint adjoint) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->seq = next_seq();
  bool needs = false;
  if (grad_mode()) {
    for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const Tensor* in : inputs) node->parents.push_back(TensorAccess::node(*in));
    node->adjoint = std::move(adjoint);
  }
  return TensorAccess::wrap(std::move(node));
}

}  // namespace detail

/// The ordered record of interior ops reachable from a root tensor.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    tape.root_ = detail::TensorAccess::node(root);
    std::vector<detail::Node*> stack{tape.root_.get()};
    std::unordered_set<const detail::Node*> seen{tape.root_.get()};
    while (!stack.empty()) {
      detail::Node* n = stack.back();
      stack.pop_back();
      if (!n->interior()) continue;
      tape.order_.push_back(n);
      for (const auto& p : n->parents) {
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(tape.order_.begin(), tape.order_.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq < b->seq; });
    return tape;
  }

  std::size_t size() const { return order_.size(); }

  std::vector<std::string_view> ops() const {
    std::vector<std::string_view> names;
    names.reserve(order_.size());
    for (const auto* n : order_) names.emplace_back(n->op);
    return names;
  }

  /// Seeds d(root)/d(root) = 1 and runs every adjoint in reverse order.
  /// Leaf grads accumulate; interior grads are scratch and released after.
  void replay() {
    for (auto* n : order_) n->grad.assign(n->data.size(), 0.0);
    root_->ensure_grad();
    root_->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) (*it)->adjoint(**it);
    for (auto* n : order_) std::vector<double>().swap(n->grad);
  }

 private:
  detail::NodePtr root_;
  std::vector<detail::Node*> order_;
};

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
/// the scalar `loss`.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() called on a loss that depends on no trainable tensor");
  }
  Tape::record(loss).replay();
}

}  // namespace r2r
