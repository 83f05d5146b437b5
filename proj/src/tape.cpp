#include "moa/tape.hpp"

#include "moa/errors.hpp"

namespace moa {

const Tensor& Var::value() const { return tape_->nodes_[id_].value; }

const Tensor* Var::grad() const {
  const auto& node = tape_->nodes_[id_];
  return node.has_grad ? &node.grad : nullptr;
}

bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }

void Tape::check_owned(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw ArgumentError("variable does not belong to this tape");
  }
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::param(const ParamStore& store, std::string_view name) {
  std::string key(name);
  if (auto it = bound_.find(key); it != bound_.end()) return Var(this, it->second);
  const auto& entry = store.at(name);
  Var v = leaf(entry.value, !entry.frozen);
  bound_.emplace(std::move(key), v.id_);
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    check_owned(in);
    needs = needs || nodes_[in.id_].requires_grad;
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = needs;
  node.is_leaf = false;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor* Tape::grad_target(Var v) {
  auto& node = nodes_[v.id_];
  if (!node.requires_grad) return nullptr;
  if (!node.has_grad) {
    node.grad = Tensor(node.value.rows(), node.value.cols());
    node.has_grad = true;
  }
  return &node.grad;
}

const Tensor& Tape::value_of(Var v) const {
  check_owned(v);
  return nodes_[v.id_].value;
}

void Tape::backward(Var root) {
  check_owned(root);
  if (root.value().size() != 1) {
    throw ArgumentError("backward requires a scalar root, got " +
                        root.value().shape_string());
  }
  for (auto& node : nodes_) {
    if (!node.is_leaf && node.has_grad) node.grad.fill(0.0);
  }
  Tensor* seed = grad_target(root);
  if (seed == nullptr) return;
  (*seed)[0] += 1.0;
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.is_leaf || !node.has_grad || !node.backward) continue;
    // The closure may append gradient buffers but never new nodes, so the
    // reference stays valid.
    node.backward(*this, node.grad);
  }
}

void Tape::accumulate_param_grads(ParamStore& store) const {
  for (const auto& [name, id] : bound_) {
    const Node& node = nodes_[id];
    if (!node.has_grad) continue;
    store.at(name).grad += node.grad;
  }
}

}  // namespace moa
