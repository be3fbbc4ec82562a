#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace t2i {

// Error taxonomy. Everything user-facing derives from t2i::error so the CLI
// can map validation failures and runtime failures to distinct exit codes.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Inputs that violate an API contract (bad shapes, bad arguments, bad config).
struct contract_error : error { using error::error; };
struct dim_error : contract_error { using contract_error::contract_error; };
struct index_error : contract_error { using contract_error::contract_error; };
struct vocab_error : contract_error { using contract_error::contract_error; };
struct length_error : contract_error { using contract_error::contract_error; };
struct data_error : contract_error { using contract_error::contract_error; };
struct config_error : contract_error { using contract_error::contract_error; };
struct parse_error : contract_error { using contract_error::contract_error; };
// Failures of the world: I/O, corrupt files, broken invariants at runtime.
struct io_error : error { using error::error; };
struct integrity_error : error { using error::error; };

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw contract_error(msg);
}
inline void check_dim(bool cond, const std::string& msg) {
    if (!cond) throw dim_error(msg);
}

// FNV-1a 64-bit. Used for file checksums, caption keys and RNG stream names.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}
inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Streaming variant for whole-file checksums.
struct Fnv1a {
    uint64_t h = 0xcbf29ce484222325ull;
    void update(const void* data, size_t n) { h = fnv1a64(data, n, h); }
    uint64_t digest() const { return h; }
};

// Global worker count for parallel_for. Kernels partition work into exactly
// `threads()` fixed chunks, so results are identical run-to-run at a fixed
// count; every kernel in this project is also chunk-count independent
// (disjoint writes, no cross-chunk reductions).
inline int& thread_slots() {
    static int n = 1;
    return n;
}
inline int threads() { return thread_slots(); }
inline void set_threads(int n) {
    if (n < 1) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    thread_slots() = n;
}

// Large activation buffers turn over every step; leaving big blocks to mmap
// would fault in fresh zeroed pages each time. Keeping them in the heap
// arena recycles warm pages instead.
#if defined(__GLIBC__)
inline const bool kMallocTuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, -1);
    return true;
}();
#endif

// Runs fn(begin, end) over a partition of [0, n) into contiguous chunks.
// Runs inline when a single worker suffices.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    int nt = threads();
    if (n <= 0) return;
    if (nt == 1 || n == 1) {
        fn(0, n);
        return;
    }
    if (static_cast<int64_t>(nt) > n) nt = static_cast<int>(n);
    int64_t chunk = (n + nt - 1) / nt;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(nt) - 1);
    for (int t = 1; t < nt; t++) {
        int64_t b = t * chunk, e = std::min<int64_t>(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back(fn, b, e);
    }
    fn(0, std::min<int64_t>(n, chunk));
    for (auto& th : pool) th.join();
}

static_assert(std::endian::native == std::endian::little, "little-endian host required");

}  // namespace t2i
