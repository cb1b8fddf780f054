#pragma once

// Dense double-precision inner loops used by the autograd engine, the
// contrastive losses and the evaluation probes. Every kernel has a scalar
// reference implementation; vectorized variants (AVX2 on x86-64, NEON on
// aarch64) are selected once at startup and must agree with the reference.

#include <cstddef>
#include <string_view>

namespace faircl::kernels {

enum class Isa { Scalar, Avx2, Neon };

struct KernelTable {
  Isa isa;
  // sum_i x[i] * y[i]
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y[i] += a * x[i]
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  // y[i] += x[i]
  void (*add)(const double* x, double* y, std::size_t n);
  // y[i] = x[i] * s
  void (*scale)(const double* x, double s, double* y, std::size_t n);
  // y[i] += x[i] * z[i]
  void (*mul_acc)(const double* x, const double* z, double* y, std::size_t n);
  // sum_i x[i]
  double (*sum)(const double* x, std::size_t n);
};

const KernelTable& scalar_table();
// Null when the variant was not compiled in.
const KernelTable* avx2_table();
const KernelTable* neon_table();

// Compiled in and usable on the running CPU.
bool supported(Isa isa);

// Best table supported by the running CPU, unless FAIRCL_SIMD=scalar is set.
const KernelTable& active();
// Overrides the runtime choice (tests and benchmarks).
void force(Isa isa);

std::string_view isa_name(Isa isa);

// Row-major C[n×m] (+)= op(A) · op(B), op = optional transpose.
// A is n×k (or k×n when trans_a), B is k×m (or m×k when trans_b).
void gemm(const KernelTable& kt, bool trans_a, bool trans_b, std::size_t n, std::size_t m,
          std::size_t k, const double* a, const double* b, double* c, bool accumulate);

inline void gemm(bool trans_a, bool trans_b, std::size_t n, std::size_t m, std::size_t k,
                 const double* a, const double* b, double* c, bool accumulate) {
  gemm(active(), trans_a, trans_b, n, m, k, a, b, c, accumulate);
}

}  // namespace faircl::kernels
