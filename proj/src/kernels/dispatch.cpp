#include <atomic>
#include <cstdlib>
#include <string_view>

#include "bgm/errors.hpp"
#include "bgm/kernels.hpp"

namespace bgm::kernels {

#if defined(BGM_HAVE_AVX2_KERNELS)
namespace detail {
const KernelTable& avx2_table_impl();
}
#endif

bool avx2_available() {
#if defined(BGM_HAVE_AVX2_KERNELS)
  static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return ok;
#else
  return false;
#endif
}

const KernelTable& avx2_table() {
#if defined(BGM_HAVE_AVX2_KERNELS)
  if (avx2_available()) return detail::avx2_table_impl();
#endif
  throw ValidationError("AVX2/FMA kernels are not available on this machine");
}

namespace {

Backend initial_backend() {
  if (const char* env = std::getenv("BGM_KERNELS")) {
    if (std::string_view(env) == "scalar") return Backend::Scalar;
  }
  return avx2_available() ? Backend::Avx2 : Backend::Scalar;
}

std::atomic<Backend>& backend_slot() {
  static std::atomic<Backend> slot{initial_backend()};
  return slot;
}

}  // namespace

Backend active_backend() { return backend_slot().load(std::memory_order_relaxed); }

void set_backend(Backend backend) {
  if (backend == Backend::Avx2 && !avx2_available()) {
    throw ValidationError("AVX2/FMA kernels are not available on this machine");
  }
  backend_slot().store(backend, std::memory_order_relaxed);
}

const KernelTable& active() {
  return active_backend() == Backend::Avx2 ? avx2_table() : scalar_table();
}

}  // namespace bgm::kernels
