#include "embolite/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "embolite/errors.hpp"
#include "embolite/gemm.hpp"

namespace embolite::ops {

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("operands recorded on different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

void accumulate(Tensor& dst, const double* src) {
  double* d = dst.ptr();
  for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += src[i];
}

struct ConvGeometry {
  int cin, h, w, kh, kw, stride, pad, ho, wo;
  int rows() const { return cin * kh * kw; }
  int cols() const { return ho * wo; }
};

void im2col(const double* x, const ConvGeometry& g, double* col) {
  const int cols = g.cols();
  for (int c = 0; c < g.cin; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        double* row = col + static_cast<std::ptrdiff_t>(((c * g.kh + ki) * g.kw + kj)) * cols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          double* out = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* in = x + (static_cast<std::ptrdiff_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            out[ox] = (ix >= 0 && ix < g.w) ? in[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  const int cols = g.cols();
  for (int c = 0; c < g.cin; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const double* row = col + static_cast<std::ptrdiff_t>(((c * g.kh + ki) * g.kw + kj)) * cols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          const double* in = row + oy * g.wo;
          double* out = x + (static_cast<std::ptrdiff_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "add");
  Tensor y = av;
  accumulate(y, bv.ptr());
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) accumulate(t.grad(ia), g.ptr());
    if (t.requires_grad(ib)) accumulate(t.grad(ib), g.ptr());
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "sub");
  Tensor y = av;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= bv[i];
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) accumulate(t.grad(ia), g.ptr());
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "mul");
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] * bv[i];
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor y = a.value();
  for (double& v : y.data()) v *= s;
  const int ia = a.id;
  return a.tape->record(std::move(y), {ia}, [ia, s](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += s * g[i];
  });
}

Var activation(Var x, Activation kind) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < y.numel(); ++i) y[i] = xv[i] > 0 ? xv[i] : 0.0;
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < y.numel(); ++i) y[i] = sigmoid_scalar(xv[i]);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::tanh(xv[i]);
      break;
  }
  const int ix = x.id;
  return x.tape->record(std::move(y), {ix}, [ix, kind](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad(ix);
    switch (kind) {
      case Activation::relu:
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += yv[i] > 0 ? g[i] : 0.0;
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g[i] * (1.0 - yv[i] * yv[i]);
        break;
    }
  });
}

Var conv2d(Var x, Var w, Var b, int stride, int padding) {
  require_same_tape(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 4, "conv2d input");
  require_rank(wv, 4, "conv2d weight");
  if (xv.dim(1) != wv.dim(1)) {
    throw DimensionError("conv2d: input channels of " + shape_str(xv.shape()) +
                         " do not match weight " + shape_str(wv.shape()));
  }
  const int n = xv.dim(0);
  const int cout = wv.dim(0);
  ConvGeometry g{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), wv.dim(3), stride, padding, 0, 0};
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw DimensionError("conv2d: kernel sides must be odd");
  if (padding < 0 || stride < 1) throw DimensionError("conv2d: invalid stride/padding");
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(xv.shape()));
  }
  if (b.valid()) {
    require_same_tape(x, b);
    if (b.value().shape() != Shape{cout}) {
      throw DimensionError("conv2d: bias shape " + shape_str(b.value().shape()) + " for " +
                           std::to_string(cout) + " output channels");
    }
  }
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  const bool direct = g.kh == 1 && g.kw == 1 && stride == 1 && padding == 0;
  const std::size_t in_sz = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t out_sz = static_cast<std::size_t>(cout) * g.cols();

  Tensor y({n, cout, g.ho, g.wo});
  std::vector<double> col(direct ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
  for (int s = 0; s < n; ++s) {
    const double* xs = xv.ptr() + s * in_sz;
    if (!direct) im2col(xs, g, col.data());
    double* ys = y.ptr() + s * out_sz;
    gemm(false, false, cout, g.cols(), g.rows(), wv.ptr(), direct ? xs : col.data(), ys, 0.0);
    if (b.valid()) {
      const Tensor& bv = b.value();
      for (int c = 0; c < cout; ++c) {
        double* yc = ys + static_cast<std::ptrdiff_t>(c) * g.cols();
        for (int i = 0; i < g.cols(); ++i) yc[i] += bv[static_cast<std::size_t>(c)];
      }
    }
  }

  const int ix = x.id, iw = w.id, ib = b.valid() ? b.id : -1;
  std::vector<int> parents{ix, iw};
  if (ib >= 0) parents.push_back(ib);
  return x.tape->record(std::move(y), std::move(parents),
                        [=](Tape& t, int self) {
                          const Tensor& gy = t.grad(self);
                          const Tensor& xv = t.value(ix);
                          const Tensor& wv = t.value(iw);
                          const bool need_x = t.requires_grad(ix);
                          const bool need_w = t.requires_grad(iw);
                          const bool need_b = ib >= 0 && t.requires_grad(ib);
                          std::vector<double> col(direct ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
                          std::vector<double> dcol(direct ? 0 : col.size());
                          for (int s = 0; s < n; ++s) {
                            const double* gys = gy.ptr() + s * out_sz;
                            const double* xs = xv.ptr() + s * in_sz;
                            if (need_w) {
                              if (!direct) im2col(xs, g, col.data());
                              gemm(false, true, cout, g.rows(), g.cols(), gys, direct ? xs : col.data(),
                                   t.grad(iw).ptr(), 1.0);
                            }
                            if (need_b) {
                              Tensor& gb = t.grad(ib);
                              for (int c = 0; c < cout; ++c) {
                                const double* gc = gys + static_cast<std::ptrdiff_t>(c) * g.cols();
                                double acc = 0.0;
                                for (int i = 0; i < g.cols(); ++i) acc += gc[i];
                                gb[static_cast<std::size_t>(c)] += acc;
                              }
                            }
                            if (need_x) {
                              double* gxs = t.grad(ix).ptr() + s * in_sz;
                              if (direct) {
                                gemm(true, false, g.rows(), g.cols(), cout, wv.ptr(), gys, gxs, 1.0);
                              } else {
                                gemm(true, false, g.rows(), g.cols(), cout, wv.ptr(), gys, dcol.data(), 0.0);
                                col2im_add(dcol.data(), g, gxs);
                              }
                            }
                          }
                        });
}

Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormState& state, NormMode mode) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "batchnorm2d");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  const Shape cshape{c};
  if (gamma.value().shape() != cshape || beta.value().shape() != cshape) {
    throw DimensionError("batchnorm2d: gamma/beta must have shape " + shape_str(cshape));
  }
  if (state.running_mean.shape() != cshape) state = BatchNormState(c);
  const std::size_t m = static_cast<std::size_t>(n) * hw;
  if (mode == NormMode::train && m < 2) {
    throw DimensionError("batchnorm2d: degenerate batch, N*H*W = " + std::to_string(m) +
                         " < 2 in train mode");
  }
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor y(xv.shape());
  for (int ch = 0; ch < c; ++ch) {
    double mu = 0.0, var = 0.0;
    if (mode == NormMode::train) {
      for (int s = 0; s < n; ++s) {
        const double* p = xv.ptr() + (static_cast<std::ptrdiff_t>(s) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) mu += p[i];
      }
      mu /= static_cast<double>(m);
      for (int s = 0; s < n; ++s) {
        const double* p = xv.ptr() + (static_cast<std::ptrdiff_t>(s) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= static_cast<double>(m);
      const auto k = static_cast<std::size_t>(ch);
      state.running_mean[k] = (1.0 - state.momentum) * state.running_mean[k] + state.momentum * mu;
      state.running_var[k] = (1.0 - state.momentum) * state.running_var[k] +
                             state.momentum * var * static_cast<double>(m) / static_cast<double>(m - 1);
    } else {
      mu = state.running_mean[static_cast<std::size_t>(ch)];
      var = state.running_var[static_cast<std::size_t>(ch)];
    }
    const double is = 1.0 / std::sqrt(var + state.eps);
    (*invstd)[static_cast<std::size_t>(ch)] = is;
    const double gch = gv[static_cast<std::size_t>(ch)];
    const double bch = bv[static_cast<std::size_t>(ch)];
    for (int s = 0; s < n; ++s) {
      const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(s) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) {
        const double xh = (xv[off + i] - mu) * is;
        (*xhat)[off + i] = xh;
        y[off + i] = gch * xh + bch;
      }
    }
  }
  const int ix = x.id, ig = gamma.id, ibeta = beta.id;
  const bool train = mode == NormMode::train;
  return x.tape->record(std::move(y), {ix, ig, ibeta}, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    const Tensor& gv = t.value(ig);
    const bool need_x = t.requires_grad(ix);
    for (int ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xh = 0.0;
      for (int s = 0; s < n; ++s) {
        const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(s) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) {
          sum_dy += gy[off + i];
          sum_dy_xh += gy[off + i] * (*xhat)[off + i];
        }
      }
      if (t.requires_grad(ig)) t.grad(ig)[static_cast<std::size_t>(ch)] += sum_dy_xh;
      if (t.requires_grad(ibeta)) t.grad(ibeta)[static_cast<std::size_t>(ch)] += sum_dy;
      if (!need_x) continue;
      Tensor& gx = t.grad(ix);
      const double gch = gv[static_cast<std::size_t>(ch)];
      const double is = (*invstd)[static_cast<std::size_t>(ch)];
      const double md = static_cast<double>(m);
      for (int s = 0; s < n; ++s) {
        const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(s) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) {
          if (train) {
            gx[off + i] += gch * is * (gy[off + i] - sum_dy / md - (*xhat)[off + i] * sum_dy_xh / md);
          } else {
            gx[off + i] += gch * is * gy[off + i];
          }
        }
      }
    }
  });
}

Var pool2d(Var x, PoolKind kind, int kernel, int stride) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "pool2d");
  if (kernel < 1 || stride != kernel) {
    throw DimensionError("pool2d: only non-overlapping pooling (stride == kernel) is supported");
  }
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % kernel != 0 || w % kernel != 0) {
    throw DimensionError("pool2d: spatial dims of " + shape_str(xv.shape()) + " not divisible by kernel " +
                         std::to_string(kernel));
  }
  const int ho = h / kernel, wo = w / kernel;
  Tensor y({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(kind == PoolKind::max ? y.numel() : 0);
  const double inv = 1.0 / (static_cast<double>(kernel) * kernel);
  std::size_t o = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const std::size_t base = static_cast<std::size_t>(plane) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++o) {
        double acc = 0.0;
        double best = 0.0;
        std::size_t best_i = 0;
        bool first = true;
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            const std::size_t i = base + static_cast<std::size_t>(oy * kernel + ky) * w + ox * kernel + kx;
            acc += xv[i];
            if (first || xv[i] > best) {
              best = xv[i];
              best_i = i;
              first = false;
            }
          }
        }
        if (kind == PoolKind::max) {
          y[o] = best;
          (*argmax)[o] = best_i;
        } else {
          y[o] = acc * inv;
        }
      }
    }
  }
  const int ix = x.id;
  return x.tape->record(std::move(y), {ix}, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(ix);
    if (kind == PoolKind::max) {
      for (std::size_t i = 0; i < gy.numel(); ++i) gx[(*argmax)[i]] += gy[i];
      return;
    }
    std::size_t o = 0;
    for (int plane = 0; plane < n * c; ++plane) {
      const std::size_t base = static_cast<std::size_t>(plane) * h * w;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++o) {
          const double gv = gy[o] * inv;
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              gx[base + static_cast<std::size_t>(oy * kernel + ky) * w + ox * kernel + kx] += gv;
            }
          }
        }
      }
    }
  });
}

Var upsample2x(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "upsample2x");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor y({n, c, 2 * h, 2 * w});
  for (int plane = 0; plane < n * c; ++plane) {
    const double* in = xv.ptr() + static_cast<std::ptrdiff_t>(plane) * h * w;
    double* out = y.ptr() + static_cast<std::ptrdiff_t>(plane) * 4 * h * w;
    for (int oy = 0; oy < 2 * h; ++oy) {
      for (int ox = 0; ox < 2 * w; ++ox) out[oy * 2 * w + ox] = in[(oy / 2) * w + ox / 2];
    }
  }
  const int ix = x.id;
  return x.tape->record(std::move(y), {ix}, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (int plane = 0; plane < n * c; ++plane) {
      const double* in = gy.ptr() + static_cast<std::ptrdiff_t>(plane) * 4 * h * w;
      double* out = gx.ptr() + static_cast<std::ptrdiff_t>(plane) * h * w;
      for (int oy = 0; oy < 2 * h; ++oy) {
        for (int ox = 0; ox < 2 * w; ++ox) out[(oy / 2) * w + ox / 2] += in[oy * 2 * w + ox];
      }
    }
  });
}

Var linear(Var x, Var w, Var b) {
  require_same_tape(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 2, "linear input");
  require_rank(wv, 2, "linear weight");
  const int n = xv.dim(0), din = xv.dim(1), dout = wv.dim(0);
  if (wv.dim(1) != din) {
    throw DimensionError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                         shape_str(wv.shape()));
  }
  if (b.valid() && b.value().shape() != Shape{dout}) {
    throw DimensionError("linear: bias shape " + shape_str(b.value().shape()));
  }
  Tensor y({n, dout});
  gemm(false, true, n, dout, din, xv.ptr(), wv.ptr(), y.ptr(), 0.0);
  if (b.valid()) {
    const Tensor& bv = b.value();
    for (int r = 0; r < n; ++r) {
      for (int j = 0; j < dout; ++j) y[static_cast<std::size_t>(r) * dout + j] += bv[static_cast<std::size_t>(j)];
    }
  }
  const int ix = x.id, iw = w.id, ib = b.valid() ? b.id : -1;
  std::vector<int> parents{ix, iw};
  if (ib >= 0) parents.push_back(ib);
  return x.tape->record(std::move(y), std::move(parents), [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    if (t.requires_grad(ix)) gemm(false, false, n, din, dout, gy.ptr(), t.value(iw).ptr(), t.grad(ix).ptr(), 1.0);
    if (t.requires_grad(iw)) gemm(true, false, dout, din, n, gy.ptr(), t.value(ix).ptr(), t.grad(iw).ptr(), 1.0);
    if (ib >= 0 && t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (int r = 0; r < n; ++r) {
        for (int j = 0; j < dout; ++j) gb[static_cast<std::size_t>(j)] += gy[static_cast<std::size_t>(r) * dout + j];
      }
    }
  });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul lhs");
  require_rank(bv, 2, "matmul rhs");
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor y({m, n});
  gemm(false, false, m, n, k, av.ptr(), bv.ptr(), y.ptr(), 0.0);
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(y), {ia, ib}, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    if (t.requires_grad(ia)) gemm(false, true, m, k, n, gy.ptr(), t.value(ib).ptr(), t.grad(ia).ptr(), 1.0);
    if (t.requires_grad(ib)) gemm(true, false, k, n, m, t.value(ia).ptr(), gy.ptr(), t.grad(ib).ptr(), 1.0);
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Tensor& first = parts.front().value();
  if (axis < 0) axis += first.rank();
  if (axis < 0 || axis >= first.rank()) throw DimensionError("concat: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(first.dim(i));
  for (int i = axis + 1; i < first.rank(); ++i) inner *= static_cast<std::size_t>(first.dim(i));
  std::vector<int> sizes;
  std::vector<int> ids;
  int total = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    const Tensor& v = p.value();
    Shape a = v.shape(), bshape = first.shape();
    if (a.size() != bshape.size()) throw DimensionError("concat: rank mismatch");
    a[static_cast<std::size_t>(axis)] = bshape[static_cast<std::size_t>(axis)] = 0;
    if (a != bshape) {
      throw DimensionError("concat: " + shape_str(v.shape()) + " incompatible with " + shape_str(first.shape()));
    }
    sizes.push_back(v.dim(axis));
    ids.push_back(p.id);
    total += v.dim(axis);
  }
  Shape out_shape = first.shape();
  out_shape[static_cast<std::size_t>(axis)] = total;
  Tensor y(out_shape);
  const std::size_t row = static_cast<std::size_t>(total) * inner;
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    const std::size_t chunk = static_cast<std::size_t>(sizes[p]) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.ptr() + o * chunk, chunk, y.ptr() + o * row + off);
    }
    off += chunk;
  }
  return parts.front().tape->record(std::move(y), ids, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t chunk = static_cast<std::size_t>(sizes[p]) * inner;
      if (t.requires_grad(ids[p])) {
        Tensor& gp = t.grad(ids[p]);
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = gy.ptr() + o * row + off;
          double* dst = gp.ptr() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      off += chunk;
    }
  });
}

Var slice(Var x, int axis, int start, int length) {
  const Tensor& xv = x.value();
  if (axis < 0) axis += xv.rank();
  if (axis < 0 || axis >= xv.rank()) throw DimensionError("slice: axis out of range");
  const int full = xv.dim(axis);
  if (start < 0 || length < 1 || start + length > full) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of bounds for " + shape_str(xv.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(xv.dim(i));
  for (int i = axis + 1; i < xv.rank(); ++i) inner *= static_cast<std::size_t>(xv.dim(i));
  Shape s = xv.shape();
  s[static_cast<std::size_t>(axis)] = length;
  Tensor y(s);
  const std::size_t chunk = static_cast<std::size_t>(length) * inner;
  const std::size_t row = static_cast<std::size_t>(full) * inner;
  const std::size_t off = static_cast<std::size_t>(start) * inner;
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xv.ptr() + o * row + off, chunk, y.ptr() + o * chunk);
  const int ix = x.id;
  return x.tape->record(std::move(y), {ix}, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = gy.ptr() + o * chunk;
      double* dst = gx.ptr() + o * row + off;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  const int ix = x.id;
  return x.tape->record(std::move(y), {ix}, [ix](Tape& t, int self) {
    accumulate(t.grad(ix), t.grad(self).ptr());
  });
}

Var channel_mul(Var w, Var x) {
  require_same_tape(w, x);
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  require_rank(xv, 4, "channel_mul");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (wv.shape() != Shape{c}) {
    throw DimensionError("channel_mul: weight " + shape_str(wv.shape()) + " for input " + shape_str(xv.shape()));
  }
  Tensor y(xv.shape());
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(s) * c + ch) * hw;
      const double k = wv[static_cast<std::size_t>(ch)];
      for (int i = 0; i < hw; ++i) y[off + i] = k * xv[off + i];
    }
  }
  const int iw = w.id, ix = x.id;
  return w.tape->record(std::move(y), {iw, ix}, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    const bool need_w = t.requires_grad(iw), need_x = t.requires_grad(ix);
    const Tensor& wv = t.value(iw);
    const Tensor& xv = t.value(ix);
    for (int s = 0; s < n; ++s) {
      for (int ch = 0; ch < c; ++ch) {
        const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(s) * c + ch) * hw;
        if (need_w) {
          double acc = 0.0;
          for (int i = 0; i < hw; ++i) acc += gy[off + i] * xv[off + i];
          t.grad(iw)[static_cast<std::size_t>(ch)] += acc;
        }
        if (need_x) {
          Tensor& gx = t.grad(ix);
          const double k = wv[static_cast<std::size_t>(ch)];
          for (int i = 0; i < hw; ++i) gx[off + i] += k * gy[off + i];
        }
      }
    }
  });
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  const double mx = xv.max();
  Tensor y(xv.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) {
    y[i] = std::exp(xv[i] - mx);
    z += y[i];
  }
  for (double& v : y.data()) v /= z;
  const int ix = x.id;
  return x.tape->record(std::move(y), {ix}, [ix](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    const Tensor& yv = t.value(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < yv.numel(); ++i) dot += gy[i] * yv[i];
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < yv.numel(); ++i) gx[i] += yv[i] * (gy[i] - dot);
  });
}

Var reduce_rows(Var x, RowReduce kind) {
  const Tensor& xv = x.value();
  require_rank(xv, 2, "reduce_rows");
  const int rows = xv.dim(0), cols = xv.dim(1);
  Tensor y({1, cols});
  auto arg = std::make_shared<std::vector<int>>(kind == RowReduce::max ? cols : 0);
  for (int j = 0; j < cols; ++j) {
    if (kind == RowReduce::mean) {
      double acc = 0.0;
      for (int r = 0; r < rows; ++r) acc += xv[static_cast<std::size_t>(r) * cols + j];
      y[static_cast<std::size_t>(j)] = acc / rows;
    } else {
      int best = 0;
      for (int r = 1; r < rows; ++r) {
        if (xv[static_cast<std::size_t>(r) * cols + j] > xv[static_cast<std::size_t>(best) * cols + j]) best = r;
      }
      (*arg)[static_cast<std::size_t>(j)] = best;
      y[static_cast<std::size_t>(j)] = xv[static_cast<std::size_t>(best) * cols + j];
    }
  }
  const int ix = x.id;
  return x.tape->record(std::move(y), {ix}, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (int j = 0; j < cols; ++j) {
      if (kind == RowReduce::mean) {
        for (int r = 0; r < rows; ++r) gx[static_cast<std::size_t>(r) * cols + j] += gy[static_cast<std::size_t>(j)] / rows;
      } else {
        gx[static_cast<std::size_t>((*arg)[static_cast<std::size_t>(j)]) * cols + j] += gy[static_cast<std::size_t>(j)];
      }
    }
  });
}

Var sum(Var x) {
  const int ix = x.id;
  return x.tape->record(Tensor::scalar(x.value().sum()), {ix}, [ix](Tape& t, int self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(ix).data()) v += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

}  // namespace embolite::ops
