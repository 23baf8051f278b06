#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "embolite/autodiff.hpp"

namespace embolite {

// Adam with decoupled weight decay. Moment buffers are indexed by the
// position of the parameter in the list passed to adam_step.
struct AdamState {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

// param -= lr * wd * param, then the bias-corrected Adam update.
// Throws NumericError naming the parameter on a NaN gradient.
void adam_step(std::span<Parameter* const> params, AdamState& state);

void zero_grads(std::span<Parameter* const> params);

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before rescaling.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

// Reduce-on-plateau for a metric that should decrease (validation loss).
struct PlateauScheduler {
  int patience = 3;
  double decay_factor = 0.1;
  double min_lr = 1e-6;
  double learning_rate = 1e-3;
  double best_metric = std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;

  // Returns the (possibly reduced) learning rate.
  double epoch_end(double val_metric);
};

}  // namespace embolite
