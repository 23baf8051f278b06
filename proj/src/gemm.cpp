#include "embolite/gemm.hpp"

#include <Eigen/Core>

namespace embolite {

namespace {

thread_local Precision g_precision = Precision::f64;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;

template <typename T, typename LhsMap, typename RhsMap, typename Out>
void product(bool ta, bool tb, const LhsMap& a, const RhsMap& b, Out& c) {
  if (!ta && !tb) {
    c.noalias() += a * b;
  } else if (ta && !tb) {
    c.noalias() += a.transpose() * b;
  } else if (!ta && tb) {
    c.noalias() += a * b.transpose();
  } else {
    c.noalias() += a.transpose() * b.transpose();
  }
}

}  // namespace

void set_matmul_precision(Precision p) { g_precision = p; }
Precision matmul_precision() { return g_precision; }

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, const double* b, double* c,
          double beta) {
  const int ar = trans_a ? k : m;
  const int ac = trans_a ? m : k;
  const int br = trans_b ? n : k;
  const int bc = trans_b ? k : n;
  Eigen::Map<RowMat<double>> cm(c, m, n);
  if (beta == 0.0) {
    cm.setZero();
  } else if (beta != 1.0) {
    cm *= beta;
  }
  ConstMap<double> am(a, ar, ac);
  ConstMap<double> bm(b, br, bc);
  if (g_precision == Precision::f64) {
    product<double>(trans_a, trans_b, am, bm, cm);
    return;
  }
  const RowMat<float> af = am.cast<float>();
  const RowMat<float> bf = bm.cast<float>();
  RowMat<float> cf = RowMat<float>::Zero(m, n);
  product<float>(trans_a, trans_b, af, bf, cf);
  cm += cf.cast<double>();
}

}  // namespace embolite
