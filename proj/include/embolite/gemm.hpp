#pragma once

namespace embolite {

// Arithmetic precision of matrix products. Storage is always double; under
// f32 the operands are rounded before the product and the result widened.
enum class Precision { f64, f32 };

void set_matmul_precision(Precision p);
Precision matmul_precision();

// Restores the previous precision on scope exit.
class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p) : prev_(matmul_precision()) { set_matmul_precision(p); }
  ~PrecisionScope() { set_matmul_precision(prev_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision prev_;
};

// Row-major C[M,N] = op(A) * op(B) + beta * C, where op(A) is [M,K] and op(B) is [K,N].
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, const double* b, double* c,
          double beta);

}  // namespace embolite
