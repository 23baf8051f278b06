#pragma once

#include <vector>

#include "embolite/autodiff.hpp"
#include "embolite/tensor.hpp"

// Differentiable operators. Each takes Vars on one tape and records its
// backward rule there. Image tensors are NCHW.
namespace embolite::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // Hadamard product
Var scale(Var a, double s);

enum class Activation { relu, sigmoid, tanh };
Var activation(Var x, Activation kind);
inline Var relu(Var x) { return activation(x, Activation::relu); }
inline Var sigmoid(Var x) { return activation(x, Activation::sigmoid); }
inline Var tanh(Var x) { return activation(x, Activation::tanh); }

// x: [N,Cin,H,W], w: [Cout,Cin,kH,kW] with odd kernel sides, b: [Cout] or invalid Var.
// Output spatial size is (H + 2*padding - kH) / stride + 1.
Var conv2d(Var x, Var w, Var b, int stride, int padding);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(int channels) : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}
};

enum class NormMode { train, eval };

// Train mode normalizes with batch statistics and updates `state`'s running
// statistics (unbiased variance, PyTorch convention). Eval mode uses them.
Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormState& state, NormMode mode);

enum class PoolKind { max, avg };

// Non-overlapping pooling only: stride must equal kernel and divide H and W.
// Max-pool gradients go to the first maximal element in row-major order.
Var pool2d(Var x, PoolKind kind, int kernel, int stride);

// Nearest-neighbour 2x upsampling of an NCHW tensor.
Var upsample2x(Var x);

// x: [N,Din], w: [Dout,Din], b: [Dout] or invalid Var.
Var linear(Var x, Var w, Var b);
// [m,k] x [k,n]
Var matmul(Var a, Var b);

Var concat(const std::vector<Var>& parts, int axis);
Var slice(Var x, int axis, int start, int length);
Var reshape(Var x, Shape shape);

// w: [C] scaling channel c of x: [N,C,H,W] (per-channel Hadamard broadcast).
Var channel_mul(Var w, Var x);

// Softmax over all elements.
Var softmax(Var x);

enum class RowReduce { mean, max };
// [T,D] -> [1,D]. Max ties resolve to the first row.
Var reduce_rows(Var x, RowReduce kind);

Var sum(Var x);
Var mean(Var x);

}  // namespace embolite::ops
