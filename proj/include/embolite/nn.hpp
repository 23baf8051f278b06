#pragma once

#include <string>
#include <utility>
#include <vector>

#include "embolite/autodiff.hpp"
#include "embolite/ops.hpp"
#include "embolite/random.hpp"

namespace embolite::nn {

// Named references to every tensor a checkpoint must carry: trainable
// parameters first, then non-trainable buffers (batch-norm statistics).
struct StateDict {
  std::vector<Parameter*> params;
  std::vector<std::pair<std::string, Tensor*>> buffers;

  void append(const StateDict& other) {
    params.insert(params.end(), other.params.begin(), other.params.end());
    buffers.insert(buffers.end(), other.buffers.begin(), other.buffers.end());
  }
  std::size_t parameter_count() const;
};

// He-normal weights, zero bias.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, Rng& rng);

  Var forward(Tape& tape, Var x);
  void collect(StateDict& sd) { sd.params.insert(sd.params.end(), {&weight_, &bias_}); }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
  int padding_ = 0;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels);

  Var forward(Tape& tape, Var x, ops::NormMode mode);
  void collect(StateDict& sd);

 private:
  std::string name_;
  Parameter gamma_;
  Parameter beta_;
  ops::BatchNormState state_;
};

// Uniform(-1/sqrt(in), 1/sqrt(in)) init; `zero_init` gives an all-zero layer.
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features, Rng& rng, bool zero_init = false);

  Var forward(Tape& tape, Var x);
  void collect(StateDict& sd) { sd.params.insert(sd.params.end(), {&weight_, &bias_}); }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
};

}  // namespace embolite::nn
