#include "embolite/autodiff.hpp"

#include <atomic>

#include "embolite/errors.hpp"

namespace embolite {

namespace {
std::atomic<bool> g_finite_checks{false};

void check_finite(const Tensor& t, const char* what, int id) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite ") + what + " at tape node " + std::to_string(id));
  }
}
}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks() { return g_finite_checks; }

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) { return record(std::move(value), {}, nullptr); }

Var Tape::parameter(Parameter& p) {
  Var v = record(p.value, {}, nullptr);
  Node& n = nodes_.back();
  if (recording_) {
    n.param = &p;
    n.requires_grad = true;
  }
  return v;
}

Var Tape::record(Tensor value, std::vector<int> parents, BackwardFn backward) {
  const int id = static_cast<int>(nodes_.size());
  if (g_finite_checks) check_finite(value, "value", id);
  Node n;
  n.value = std::move(value);
  if (recording_) {
    for (int p : parents) n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(p)].requires_grad;
    if (n.requires_grad) {
      n.parents = std::move(parents);
      n.backward = std::move(backward);
    }
  }
  nodes_.push_back(std::move(n));
  return Var{this, id};
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var root) {
  if (!recording_) throw Error("backward() on a non-recording tape");
  if (root.tape != this) throw Error("backward() root belongs to another tape");
  visits_ = 0;
  grad(root.id).fill(1.0);
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() || !n.requires_grad) continue;
    ++visits_;
    if (g_finite_checks) check_finite(n.grad, "gradient", id);
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      Tensor& pg = n.param->grad;
      if (pg.shape() != n.value.shape()) pg = Tensor(n.value.shape());
      for (std::size_t i = 0; i < pg.numel(); ++i) pg[i] += n.grad[i];
    }
  }
}

}  // namespace embolite
