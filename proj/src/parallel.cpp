#include "gspw/parallel.hpp"

#include <atomic>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gspw {

namespace {

std::atomic<int> g_override{0};

int env_threads() {
  const char* env = std::getenv("GSPW_THREADS");
  if (env != nullptr) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace

int thread_count() {
  const int o = g_override.load();
  if (o >= 1) return o;
  static const int from_env = env_threads();
  return from_env;
}

void set_thread_count(int n) { g_override.store(n < 1 ? 0 : n); }

}  // namespace gspw
