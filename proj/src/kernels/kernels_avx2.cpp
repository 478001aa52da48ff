// Compiled with -mavx2 -mfma. Nothing in this file may run before the
// dispatcher has confirmed CPU support.

#include <immintrin.h>

#include <algorithm>
#include <vector>

#include "bgm/kernels.hpp"

namespace bgm::kernels {
namespace avx2 {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b,
             double* c, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const double* a0 = a + (i + 0) * k;
    const double* a1 = a + (i + 1) * k;
    const double* a2 = a + (i + 2) * k;
    const double* a3 = a + (i + 3) * k;
    double* c0 = c + (i + 0) * m;
    double* c1 = c + (i + 1) * m;
    double* c2 = c + (i + 2) * m;
    double* c3 = c + (i + 3) * m;
    std::size_t j = 0;
    for (; j + 8 <= m; j += 8) {
      __m256d r00, r01, r10, r11, r20, r21, r30, r31;
      if (accumulate) {
        r00 = _mm256_loadu_pd(c0 + j);
        r01 = _mm256_loadu_pd(c0 + j + 4);
        r10 = _mm256_loadu_pd(c1 + j);
        r11 = _mm256_loadu_pd(c1 + j + 4);
        r20 = _mm256_loadu_pd(c2 + j);
        r21 = _mm256_loadu_pd(c2 + j + 4);
        r30 = _mm256_loadu_pd(c3 + j);
        r31 = _mm256_loadu_pd(c3 + j + 4);
      } else {
        r00 = r01 = r10 = r11 = r20 = r21 = r30 = r31 = _mm256_setzero_pd();
      }
      for (std::size_t l = 0; l < k; ++l) {
        const double* bl = b + l * m + j;
        const __m256d b0 = _mm256_loadu_pd(bl);
        const __m256d b1 = _mm256_loadu_pd(bl + 4);
        __m256d s = _mm256_broadcast_sd(a0 + l);
        r00 = _mm256_fmadd_pd(s, b0, r00);
        r01 = _mm256_fmadd_pd(s, b1, r01);
        s = _mm256_broadcast_sd(a1 + l);
        r10 = _mm256_fmadd_pd(s, b0, r10);
        r11 = _mm256_fmadd_pd(s, b1, r11);
        s = _mm256_broadcast_sd(a2 + l);
        r20 = _mm256_fmadd_pd(s, b0, r20);
        r21 = _mm256_fmadd_pd(s, b1, r21);
        s = _mm256_broadcast_sd(a3 + l);
        r30 = _mm256_fmadd_pd(s, b0, r30);
        r31 = _mm256_fmadd_pd(s, b1, r31);
      }
      _mm256_storeu_pd(c0 + j, r00);
      _mm256_storeu_pd(c0 + j + 4, r01);
      _mm256_storeu_pd(c1 + j, r10);
      _mm256_storeu_pd(c1 + j + 4, r11);
      _mm256_storeu_pd(c2 + j, r20);
      _mm256_storeu_pd(c2 + j + 4, r21);
      _mm256_storeu_pd(c3 + j, r30);
      _mm256_storeu_pd(c3 + j + 4, r31);
    }
    for (; j < m; ++j) {
      double s0 = accumulate ? c0[j] : 0.0;
      double s1 = accumulate ? c1[j] : 0.0;
      double s2 = accumulate ? c2[j] : 0.0;
      double s3 = accumulate ? c3[j] : 0.0;
      for (std::size_t l = 0; l < k; ++l) {
        const double bl = b[l * m + j];
        s0 += a0[l] * bl;
        s1 += a1[l] * bl;
        s2 += a2[l] * bl;
        s3 += a3[l] * bl;
      }
      c0[j] = s0;
      c1[j] = s1;
      c2[j] = s2;
      c3[j] = s3;
    }
  }
  for (; i < n; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * m;
    std::size_t j = 0;
    for (; j + 4 <= m; j += 4) {
      __m256d r = accumulate ? _mm256_loadu_pd(ci + j) : _mm256_setzero_pd();
      for (std::size_t l = 0; l < k; ++l) {
        r = _mm256_fmadd_pd(_mm256_broadcast_sd(ai + l), _mm256_loadu_pd(b + l * m + j), r);
      }
      _mm256_storeu_pd(ci + j, r);
    }
    for (; j < m; ++j) {
      double s = accumulate ? ci[j] : 0.0;
      for (std::size_t l = 0; l < k; ++l) s += ai[l] * b[l * m + j];
      ci[j] = s;
    }
  }
}

void gemm_tn_acc_rows(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b,
                      double* c) {
  std::size_t l = 0;
  for (; l + 4 <= k; l += 4) {
    double* c0 = c + (l + 0) * m;
    double* c1 = c + (l + 1) * m;
    double* c2 = c + (l + 2) * m;
    double* c3 = c + (l + 3) * m;
    std::size_t j = 0;
    for (; j + 8 <= m; j += 8) {
      __m256d r00 = _mm256_loadu_pd(c0 + j), r01 = _mm256_loadu_pd(c0 + j + 4);
      __m256d r10 = _mm256_loadu_pd(c1 + j), r11 = _mm256_loadu_pd(c1 + j + 4);
      __m256d r20 = _mm256_loadu_pd(c2 + j), r21 = _mm256_loadu_pd(c2 + j + 4);
      __m256d r30 = _mm256_loadu_pd(c3 + j), r31 = _mm256_loadu_pd(c3 + j + 4);
      for (std::size_t i = 0; i < n; ++i) {
        const double* bi = b + i * m + j;
        const double* ai = a + i * k + l;
        const __m256d b0 = _mm256_loadu_pd(bi);
        const __m256d b1 = _mm256_loadu_pd(bi + 4);
        __m256d s = _mm256_broadcast_sd(ai + 0);
        r00 = _mm256_fmadd_pd(s, b0, r00);
        r01 = _mm256_fmadd_pd(s, b1, r01);
        s = _mm256_broadcast_sd(ai + 1);
        r10 = _mm256_fmadd_pd(s, b0, r10);
        r11 = _mm256_fmadd_pd(s, b1, r11);
        s = _mm256_broadcast_sd(ai + 2);
        r20 = _mm256_fmadd_pd(s, b0, r20);
        r21 = _mm256_fmadd_pd(s, b1, r21);
        s = _mm256_broadcast_sd(ai + 3);
        r30 = _mm256_fmadd_pd(s, b0, r30);
        r31 = _mm256_fmadd_pd(s, b1, r31);
      }
      _mm256_storeu_pd(c0 + j, r00);
      _mm256_storeu_pd(c0 + j + 4, r01);
      _mm256_storeu_pd(c1 + j, r10);
      _mm256_storeu_pd(c1 + j + 4, r11);
      _mm256_storeu_pd(c2 + j, r20);
      _mm256_storeu_pd(c2 + j + 4, r21);
      _mm256_storeu_pd(c3 + j, r30);
      _mm256_storeu_pd(c3 + j + 4, r31);
    }
    for (; j < m; ++j) {
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double bij = b[i * m + j];
        const double* ai = a + i * k + l;
        s0 += ai[0] * bij;
        s1 += ai[1] * bij;
        s2 += ai[2] * bij;
        s3 += ai[3] * bij;
      }
      c0[j] += s0;
      c1[j] += s1;
      c2[j] += s2;
      c3[j] += s3;
    }
  }
  for (; l < k; ++l) {
    double* cl = c + l * m;
    std::size_t j = 0;
    for (; j + 4 <= m; j += 4) {
      __m256d r = _mm256_loadu_pd(cl + j);
      for (std::size_t i = 0; i < n; ++i) {
        r = _mm256_fmadd_pd(_mm256_broadcast_sd(a + i * k + l), _mm256_loadu_pd(b + i * m + j),
                            r);
      }
      _mm256_storeu_pd(cl + j, r);
    }
    for (; j < m; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += a[i * k + l] * b[i * m + j];
      cl[j] += s;
    }
  }
}

// Row chunks keep the slices of a and b that every output tile revisits in
// cache; a single pass over all n rows per tile streams from memory.
void gemm_tn_acc(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b,
                 double* c) {
  constexpr std::size_t kChunk = 64;
  for (std::size_t i0 = 0; i0 < n; i0 += kChunk) {
    gemm_tn_acc_rows(std::min(kChunk, n - i0), k, m, a + i0 * k, b + i0 * m, c);
  }
}

void gemm_nt_dot(std::size_t n, std::size_t m, std::size_t k, const double* a, const double* b,
                 double* c) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * m;
    std::size_t j = 0;
    for (; j + 4 <= k; j += 4) {
      const double* b0 = b + (j + 0) * m;
      const double* b1 = b + (j + 1) * m;
      const double* b2 = b + (j + 2) * m;
      const double* b3 = b + (j + 3) * m;
      __m256d r0 = _mm256_setzero_pd(), r1 = _mm256_setzero_pd();
      __m256d r2 = _mm256_setzero_pd(), r3 = _mm256_setzero_pd();
      std::size_t l = 0;
      for (; l + 4 <= m; l += 4) {
        const __m256d av = _mm256_loadu_pd(ai + l);
        r0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b0 + l), r0);
        r1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b1 + l), r1);
        r2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b2 + l), r2);
        r3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b3 + l), r3);
      }
      double s0 = hsum(r0), s1 = hsum(r1), s2 = hsum(r2), s3 = hsum(r3);
      for (; l < m; ++l) {
        s0 += ai[l] * b0[l];
        s1 += ai[l] * b1[l];
        s2 += ai[l] * b2[l];
        s3 += ai[l] * b3[l];
      }
      c[i * k + j + 0] = s0;
      c[i * k + j + 1] = s1;
      c[i * k + j + 2] = s2;
      c[i * k + j + 3] = s3;
    }
    for (; j < k; ++j) {
      const double* bj = b + j * m;
      __m256d r = _mm256_setzero_pd();
      std::size_t l = 0;
      for (; l + 4 <= m; l += 4) {
        r = _mm256_fmadd_pd(_mm256_loadu_pd(ai + l), _mm256_loadu_pd(bj + l), r);
      }
      double s = hsum(r);
      for (; l < m; ++l) s += ai[l] * bj[l];
      c[i * k + j] = s;
    }
  }
}

// With enough output columns a transposed copy of b turns this into the
// broadcast-FMA form of gemm_nn, avoiding a horizontal sum per output.
void gemm_nt(std::size_t n, std::size_t m, std::size_t k, const double* a, const double* b,
             double* c) {
  if (k < 8 || n < 16) {
    gemm_nt_dot(n, m, k, a, b, c);
    return;
  }
  thread_local std::vector<double> bt;
  bt.resize(m * k);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t l = 0; l < m; ++l) bt[l * k + j] = b[j * m + l];
  }
  gemm_nn(n, m, k, a, bt.data(), c, false);
}

void relu(std::size_t n, const double* x, double* y) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    // max_pd returns the second operand when the first is NaN, matching the
    // scalar reference (x > 0 ? x : 0).
    _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::size_t n, const double* x, const double* gy, double* gx) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    const __m256d g = _mm256_and_pd(mask, _mm256_loadu_pd(gy + i));
    _mm256_storeu_pd(gx + i, _mm256_add_pd(_mm256_loadu_pd(gx + i), g));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) gx[i] += gy[i];
  }
}

double permuted_frobenius(std::size_t n, const float* a, const float* b,
                          const std::uint32_t* perm) {
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* ai = a + i * n;
    const float* bi = b + static_cast<std::size_t>(perm[i]) * n;
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      const __m256i idx = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(perm + j));
      const __m256 g = _mm256_i32gather_ps(bi, idx, 4);
      const __m256 av = _mm256_loadu_ps(ai + j);
      acc0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(av)),
                             _mm256_cvtps_pd(_mm256_castps256_ps128(g)), acc0);
      acc1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(av, 1)),
                             _mm256_cvtps_pd(_mm256_extractf128_ps(g, 1)), acc1);
    }
    double row = hsum(_mm256_add_pd(acc0, acc1));
    for (; j < n; ++j) row += static_cast<double>(ai[j]) * static_cast<double>(bi[perm[j]]);
    total += row;
  }
  return total;
}

}  // namespace avx2

namespace detail {
const KernelTable& avx2_table_impl() {
  static const KernelTable table{avx2::gemm_nn, avx2::gemm_tn_acc, avx2::gemm_nt, avx2::relu,
                                 avx2::relu_backward, avx2::permuted_frobenius};
  return table;
}
}  // namespace detail

}  // namespace bgm::kernels
