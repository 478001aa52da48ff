#pragma once

// Data-parallel inner loops with a portable scalar reference and an AVX2/FMA
// variant. The variant is picked once at startup from CPUID; set_backend()
// or BGM_KERNELS=scalar in the environment forces the reference path.
//
// All matrices are row-major and densely packed.

#include <cstddef>
#include <cstdint>

namespace bgm::kernels {

enum class Backend { Scalar, Avx2 };

struct KernelTable {
  // C[n x m] = A[n x k] * B[k x m], or C += ... when accumulate is set.
  void (*gemm_nn)(std::size_t n, std::size_t k, std::size_t m, const double* a,
                  const double* b, double* c, bool accumulate);
  // C[k x m] += A^T * B with A[n x k], B[n x m].
  void (*gemm_tn_acc)(std::size_t n, std::size_t k, std::size_t m, const double* a,
                      const double* b, double* c);
  // C[n x k] = A[n x m] * B^T with B[k x m].
  void (*gemm_nt)(std::size_t n, std::size_t m, std::size_t k, const double* a,
                  const double* b, double* c);
  // y = max(x, 0)
  void (*relu)(std::size_t n, const double* x, double* y);
  // gx += gy where x > 0
  void (*relu_backward)(std::size_t n, const double* x, const double* gy, double* gx);
  // sum_{i,j} a[i*n + j] * b[perm[i]*n + perm[j]]
  double (*permuted_frobenius)(std::size_t n, const float* a, const float* b,
                               const std::uint32_t* perm);
};

const KernelTable& scalar_table();
bool avx2_available();
// Throws ValidationError if the AVX2 table was requested but is unavailable.
const KernelTable& avx2_table();

Backend active_backend();
void set_backend(Backend backend);
const KernelTable& active();

inline void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const double* a,
                    const double* b, double* c, bool accumulate = false) {
  active().gemm_nn(n, k, m, a, b, c, accumulate);
}
inline void gemm_tn_acc(std::size_t n, std::size_t k, std::size_t m, const double* a,
                        const double* b, double* c) {
  active().gemm_tn_acc(n, k, m, a, b, c);
}
inline void gemm_nt(std::size_t n, std::size_t m, std::size_t k, const double* a,
                    const double* b, double* c) {
  active().gemm_nt(n, m, k, a, b, c);
}
inline void relu(std::size_t n, const double* x, double* y) { active().relu(n, x, y); }
inline void relu_backward(std::size_t n, const double* x, const double* gy, double* gx) {
  active().relu_backward(n, x, gy, gx);
}
inline double permuted_frobenius(std::size_t n, const float* a, const float* b,
                                 const std::uint32_t* perm) {
  return active().permuted_frobenius(n, a, b, perm);
}

}  // namespace bgm::kernels
