#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sadnet/error.hpp"
#include "sadnet/tensor.hpp"

namespace sadnet {

template <typename T>
class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor4<T>& value() const;
  const Shape4& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Linear record of a computation. Nodes are appended in evaluation order,
// so the storage order is already a topological order.
template <typename T>
class Tape {
 public:
  // Called during backward with the node's own id; reads grad(id) and
  // accumulates into its inputs through accumulate().
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    std::string op;
    Tensor4<T> value;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor4<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{"leaf", std::move(value), {}, requires_grad, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor4<T> value) { return leaf(std::move(value), false); }

  // Appends an operation result. The backward closure only runs when at least
  // one input requires a gradient.
  Var<T> record(std::string op, Tensor4<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
    Node node{std::move(op), std::move(value), {}, false, {}};
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (&in.tape() != this) throw UsageError("operation '" + node.op + "' mixes vars from different tapes");
      node.inputs.push_back(in.id());
      node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor4<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient buffer of a node, or nullptr when nothing flowed into it.
  const Tensor4<T>* grad(std::size_t id) const {
    if (id >= grads_.size() || grads_[id].empty()) return nullptr;
    return &grads_[id];
  }

  // Zero-initialised gradient buffer for a node that requires grad.
  Tensor4<T>& grad_buffer(std::size_t id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    auto& g = grads_[id];
    if (g.empty()) g = Tensor4<T>(nodes_[id].value.shape());
    return g;
  }

  // grad(id) += delta, skipped when the node does not require grad.
  void accumulate(std::size_t id, const Tensor4<T>& delta) {
    if (!nodes_[id].requires_grad) return;
    auto& g = grad_buffer(id);
    require_same_shape(g.shape(), delta.shape(), "accumulate");
    T* dst = g.data();
    const T* src = delta.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  void clear_grads() { grads_.clear(); }

  // Reverse sweep from a scalar node.
  void backward(std::size_t loss_id) {
    if (loss_id >= nodes_.size()) throw UsageError("backward: unknown node");
    if (nodes_[loss_id].value.size() != 1) {
      throw UsageError("backward: loss must be a scalar, got shape " + nodes_[loss_id].value.shape().str());
    }
    grads_.clear();
    grads_.resize(nodes_.size());
    if (!nodes_[loss_id].requires_grad) return;
    grads_[loss_id] = Tensor4<T>(nodes_[loss_id].value.shape(), T(1));
    for (std::size_t id = loss_id + 1; id-- > 0;) {
      auto& node = nodes_[id];
      if (!node.requires_grad || !node.backward || grads_[id].empty()) continue;
      node.backward(*this, id);
    }
  }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor4<T>> grads_;
};

template <typename T>
const Tensor4<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

// Result of a backward pass: one gradient per requires_grad leaf.
// Leaves that did not receive any flow get zeros; detached leaves are absent.
template <typename T>
class Gradients {
 public:
  const Tensor4<T>* find(const Var<T>& v) const {
    for (const auto& [id, g] : entries_) {
      if (id == v.id()) return &g;
    }
    return nullptr;
  }
  bool contains(const Var<T>& v) const { return find(v) != nullptr; }
  const Tensor4<T>& at(const Var<T>& v) const {
    if (const auto* g = find(v)) return *g;
    throw UsageError("no gradient recorded for node " + std::to_string(v.id()));
  }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<std::pair<std::size_t, Tensor4<T>>>& entries() const noexcept { return entries_; }

  void add(std::size_t id, Tensor4<T> g) { entries_.emplace_back(id, std::move(g)); }

 private:
  std::vector<std::pair<std::size_t, Tensor4<T>>> entries_;
};

template <typename T>
Gradients<T> backward(const Var<T>& loss) {
  auto& tape = loss.tape();
  tape.backward(loss.id());
  Gradients<T> out;
  for (std::size_t id = 0; id < tape.size(); ++id) {
    const auto& node = tape.node(id);
    if (!node.inputs.empty() || node.op != "leaf" || !node.requires_grad) continue;
    if (const auto* g = tape.grad(id)) {
      out.add(id, *g);
    } else {
      out.add(id, Tensor4<T>(node.value.shape()));
    }
  }
  return out;
}

}  // namespace sadnet
