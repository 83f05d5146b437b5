#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "moa/param_store.hpp"
#include "moa/tensor.hpp"

namespace moa {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  /// Gradient accumulated by the last backward pass, or nullptr when the node
  /// does not require one or received no contribution.
  const Tensor* grad() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Define-by-run record of a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape is rebuilt for every forward pass and is confined to one thread.
/// Constructing a tape with `grad_enabled = false` turns every parameter into
/// a constant, which skips all backward bookkeeping for inference.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad);
  /// Leaf bound to a store entry. Binding the same name twice returns the
  /// same node, so shared weights accumulate a single gradient.
  Var param(const ParamStore& store, std::string_view name);

  /// Appends an op result. `backward` runs only when some input requires a
  /// gradient; it receives the gradient flowing into this node.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  /// Reverse pass from a 1x1 root. Intermediate gradients are reset at the
  /// start of each call; leaf gradients accumulate across calls.
  void backward(Var root);

  /// Adds the gradient of every bound parameter into `store`'s grad tensors.
  void accumulate_param_grads(ParamStore& store) const;

  /// Gradient buffer of `v` for accumulation, or nullptr when `v` does not
  /// require a gradient. Allocated (zeroed) on first use.
  Tensor* grad_target(Var v);

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value_of(Var v) const;

 private:
  friend class Var;
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool is_leaf = true;
    BackwardFn backward;
  };

  void check_owned(Var v) const;

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::uint32_t> bound_;
  bool grad_enabled_ = true;
};

}  // namespace moa
