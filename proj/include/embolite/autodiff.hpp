#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "embolite/tensor.hpp"

namespace embolite {

// Trainable tensor with an accumulated gradient buffer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const noexcept { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Turns on NaN/Inf checks for every recorded value and gradient.
void set_finite_checks(bool enabled);
bool finite_checks();

// Linear record of operations. Nodes are appended after their parents, so
// reverse insertion order is a valid reverse topological order. A tape is
// confined to one thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  // A non-recording tape computes values only (inference).
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value);
  // Leaf whose gradient is accumulated into `p.grad` by backward().
  Var parameter(Parameter& p);

  // Records a node. `backward` is dropped when no parent requires a gradient.
  Var record(Tensor value, std::vector<int> parents, BackwardFn backward);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  // Gradient buffer of a node, zero-allocated on first access.
  Tensor& grad(int id);
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  // Seeds d(root)/d(root) = 1 elementwise and propagates to every ancestor,
  // visiting each node at most once. Parameter grads accumulate.
  void backward(Var root);

  // Number of node visits in the last backward() (test hook).
  std::size_t last_backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool recording_;
  std::size_t visits_ = 0;
};

}  // namespace embolite
