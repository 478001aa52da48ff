#include <algorithm>

#include "bgm/kernels.hpp"

namespace bgm::kernels {
namespace reference {

void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b,
             double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = a[i * k + l];
      const double* bl = b + l * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += ail * bl[j];
    }
  }
}

void gemm_tn_acc(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b,
                 double* c) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * m;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = ai[l];
      double* cl = c + l * m;
      for (std::size_t j = 0; j < m; ++j) cl[j] += ail * bi[j];
    }
  }
}

void gemm_nt(std::size_t n, std::size_t m, std::size_t k, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * m;
    for (std::size_t j = 0; j < k; ++j) {
      const double* bj = b + j * m;
      double s = 0.0;
      for (std::size_t l = 0; l < m; ++l) s += ai[l] * bj[l];
      c[i * k + j] = s;
    }
  }
}

void relu(std::size_t n, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::size_t n, const double* x, const double* gy, double* gx) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > 0.0) gx[i] += gy[i];
  }
}

double permuted_frobenius(std::size_t n, const float* a, const float* b,
                          const std::uint32_t* perm) {
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* ai = a + i * n;
    const float* bi = b + static_cast<std::size_t>(perm[i]) * n;
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row += static_cast<double>(ai[j]) * static_cast<double>(bi[perm[j]]);
    }
    total += row;
  }
  return total;
}

}  // namespace reference

const KernelTable& scalar_table() {
  static const KernelTable table{reference::gemm_nn, reference::gemm_tn_acc, reference::gemm_nt, reference::relu,
                                 reference::relu_backward, reference::permuted_frobenius};
  return table;
}

}  // namespace bgm::kernels
