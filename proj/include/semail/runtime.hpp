#pragma once

#include <cstdlib>
#include <malloc.h>
#include <string>
#include <thread>
#include <unistd.h>

extern "C" {
void openblas_set_num_threads(int);
}

#ifdef _OPENMP
#include <omp.h>
#endif

namespace semail {

// OpenBLAS picks its kernel set from /proc/cpuinfo at library load, which
// reports "unknown" on some virtualized hosts and silently falls back to a
// generic kernel (~4x slower here). The core type can only be forced through
// the environment before the library initializes, so when the CPU really has
// AVX-512 and nothing was requested we set it and re-exec once.
inline void boost_blas_kernel(int argc, char** argv) {
    (void)argc;
    if (std::getenv("SEMAIL_REEXEC") != nullptr) return;
    if (std::getenv("OPENBLAS_CORETYPE") != nullptr) return;
    if (!__builtin_cpu_supports("avx512f")) return;
    ::setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
    ::setenv("SEMAIL_REEXEC", "1", 1);
    ::execv("/proc/self/exe", argv);
    // execv failed; continue with the generic kernel.
}

// threads <= 0 selects hardware concurrency capped at 4. BLAS stays
// single-threaded regardless: the GEMM shapes here (tall-skinny im2col
// products, 64-row recurrent steps) all run faster without OpenBLAS
// threading, which the im2col/elementwise OpenMP loops then overlap.
inline int set_compute_threads(int threads) {
    int n = threads;
    if (n <= 0) {
        unsigned hw = std::thread::hardware_concurrency();
        n = static_cast<int>(hw == 0 ? 1 : (hw > 4 ? 4 : hw));
    }
    openblas_set_num_threads(1);
#ifdef _OPENMP
    omp_set_num_threads(n);
#endif
    // The training graphs churn through multi-hundred-MB activation buffers
    // every iteration. Keep large blocks on the heap instead of per-call
    // mmap/munmap so freed pages are reused without refaulting.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return n;
}

} // namespace semail
