#include "embolite/optim.hpp"

#include <algorithm>
#include <cmath>

#include "embolite/errors.hpp"

namespace embolite {

void adam_step(std::span<Parameter* const> params, AdamState& state) {
  if (state.first_moment.size() != params.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (const Parameter* p : params) {
      state.first_moment.emplace_back(p->value.shape());
      state.second_moment.emplace_back(p->value.shape());
    }
  }
  for (const Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) throw DimensionError("gradient shape mismatch for " + p->name);
    for (double g : p->grad.data()) {
      if (std::isnan(g)) throw NumericError("NaN gradient in parameter " + p->name);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const double lr = state.learning_rate;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      p.value[i] -= lr * state.weight_decay * p.value[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

double PlateauScheduler::epoch_end(double val_metric) {
  if (val_metric < best_metric) {
    best_metric = val_metric;
    epochs_since_improvement = 0;
    return learning_rate;
  }
  if (++epochs_since_improvement > patience) {
    learning_rate = std::max(learning_rate * decay_factor, min_lr);
    epochs_since_improvement = 0;
  }
  return learning_rate;
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (std::size_t i = 0; i < p->grad.numel(); ++i) sq += p->grad[i] * p->grad[i];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Parameter* p : params) {
      for (std::size_t i = 0; i < p->grad.numel(); ++i) p->grad[i] *= s;
    }
  }
  return norm;
}

}  // namespace embolite
