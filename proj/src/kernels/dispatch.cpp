#include <atomic>
#include <cstdlib>
#include <string>

#include "faircl/kernels.hpp"

namespace faircl::kernels {

#ifndef FAIRCL_BUILD_AVX2
const KernelTable* avx2_table() { return nullptr; }
#endif
#ifndef FAIRCL_BUILD_NEON
const KernelTable* neon_table() { return nullptr; }
#endif

bool supported(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return true;
    case Isa::Avx2:
#if defined(FAIRCL_BUILD_AVX2) && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::Neon:
      return neon_table() != nullptr;
  }
  return false;
}

namespace {

const KernelTable* detect() {
  if (const char* env = std::getenv("FAIRCL_SIMD"); env != nullptr && std::string(env) == "scalar") {
    return &scalar_table();
  }
  if (supported(Isa::Avx2)) return avx2_table();
  if (supported(Isa::Neon)) return neon_table();
  return &scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{detect()};
  return current;
}

}  // namespace

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void force(Isa isa) {
  const KernelTable* table = &scalar_table();
  if (isa == Isa::Avx2 && supported(isa)) table = avx2_table();
  if (isa == Isa::Neon && supported(isa)) table = neon_table();
  slot().store(table, std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::Scalar: return "scalar";
    case Isa::Avx2: return "avx2";
    case Isa::Neon: return "neon";
  }
  return "unknown";
}

void gemm(const KernelTable& kt, bool trans_a, bool trans_b, std::size_t n, std::size_t m,
          std::size_t k, const double* a, const double* b, double* c, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < n * m; ++i) c[i] = 0.0;
  }
  if (!trans_b) {
    // C[i,:] += A(i,p) * B[p,:]
    for (std::size_t i = 0; i < n; ++i) {
      double* crow = c + i * m;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = trans_a ? a[p * n + i] : a[i * k + p];
        kt.axpy(aip, b + p * m, crow, m);
      }
    }
    return;
  }
  // B stored m×k: C[i,j] += dot(A(i,:), B[j,:])
  if (!trans_a) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) c[i * m + j] += kt.dot(a + i * k, b + j * k, k);
    }
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * n + i] * b[j * k + p];
      c[i * m + j] += s;
    }
  }
}

}  // namespace faircl::kernels
