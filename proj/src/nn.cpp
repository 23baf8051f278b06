#include "embolite/nn.hpp"

#include <cmath>

namespace embolite::nn {

std::size_t StateDict::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->value.numel();
  return n;
}

Conv2d::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, Rng& rng)
    : weight_(name + ".weight",
              random_normal({out_channels, in_channels, kernel, kernel}, rng,
                            std::sqrt(2.0 / (static_cast<double>(in_channels) * kernel * kernel)))),
      bias_(name + ".bias", Tensor({out_channels}, 0.0)),
      padding_(kernel / 2) {}

Var Conv2d::forward(Tape& tape, Var x) {
  return ops::conv2d(x, tape.parameter(weight_), tape.parameter(bias_), 1, padding_);
}

BatchNorm2d::BatchNorm2d(const std::string& name, int channels)
    : name_(name),
      gamma_(name + ".gamma", Tensor({channels}, 1.0)),
      beta_(name + ".beta", Tensor({channels}, 0.0)),
      state_(channels) {}

Var BatchNorm2d::forward(Tape& tape, Var x, ops::NormMode mode) {
  return ops::batchnorm2d(x, tape.parameter(gamma_), tape.parameter(beta_), state_, mode);
}

void BatchNorm2d::collect(StateDict& sd) {
  sd.params.insert(sd.params.end(), {&gamma_, &beta_});
  sd.buffers.emplace_back(name_ + ".running_mean", &state_.running_mean);
  sd.buffers.emplace_back(name_ + ".running_var", &state_.running_var);
}

Linear::Linear(const std::string& name, int in_features, int out_features, Rng& rng, bool zero_init) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight_ = Parameter(name + ".weight", zero_init ? Tensor({out_features, in_features}, 0.0)
                                                  : random_uniform({out_features, in_features}, rng, -bound, bound));
  bias_ = Parameter(name + ".bias", Tensor({out_features}, 0.0));
}

Var Linear::forward(Tape& tape, Var x) {
  return ops::linear(x, tape.parameter(weight_), tape.parameter(bias_));
}

}  // namespace embolite::nn
