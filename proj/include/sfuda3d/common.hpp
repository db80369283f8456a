#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, hashing, and the
// thread-capped parallel loop used by the numeric kernels.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace sfuda3d {

// ---------------------------------------------------------------------------
// Errors. Each maps to one failure class named by the module contracts; the
// CLI folds them into exit codes (config=2, data=3, numeric=4).

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error { using Error::Error; };   // shape mismatch between operands
struct ParameterError : Error { using Error::Error; };   // invalid argument value
struct LabelError     : Error { using Error::Error; };   // class id out of range
struct ContractError  : Error { using Error::Error; };   // API misuse or violated postcondition
struct ClassError     : Error { using Error::Error; };   // class absent from a mixture
struct SamplingError  : Error { using Error::Error; };   // rejection sampling retry cap exceeded
struct DataError      : Error { using Error::Error; };   // missing/empty datasets, unreadable files
struct FormatError    : DataError { using DataError::DataError; };  // malformed file contents
struct ChecksumError  : DataError { using DataError::DataError; };  // payload checksum mismatch
struct NumericError   : Error { using Error::Error; };   // NaN/Inf surfaced in a computation
struct ConfigError    : Error { using Error::Error; };   // bad config file or override

// ---------------------------------------------------------------------------
// FNV-1a 64-bit. Used for file checksums, parameter-blob hashes and seed
// derivation labels.

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

// ---------------------------------------------------------------------------
// RNG. splitmix64 core with a hand-rolled Box-Muller normal so that streams
// are bit-identical across standard libraries. Every stochastic subsystem
// takes an explicit Rng; seeds are derived from one global seed plus a label.

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0,1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo,hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0,n)
    uint64_t uniform_index(uint64_t n) {
        if (n == 0) throw ParameterError("uniform_index: n must be positive");
        return next_u64() % n;
    }

    bool coin(double p = 0.5) { return uniform() < p; }

    // standard normal, Box-Muller (one value per draw pair; portable sequence)
    double normal() {
        double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    uint64_t state_;
};

// Derive an independent stream from (seed, label). Mixing through splitmix64
// keeps sibling streams uncorrelated even for adjacent seeds.
inline uint64_t derive_seed(uint64_t seed, std::string_view label) {
    uint64_t s = seed ^ fnv1a64(label);
    return splitmix64(s);
}

// ---------------------------------------------------------------------------
// Parallel loop. Work is split into fixed-size chunks; workers pull chunks
// from an atomic counter. Outputs must be disjoint per index (or per chunk),
// which keeps results bit-identical for any thread count, including 1.
// SFUDA3D_THREADS caps the worker count.

namespace detail {
inline int& max_threads_ref() {
    static int v = [] {
        if (const char* env = std::getenv("SFUDA3D_THREADS")) {
            int n = std::atoi(env);
            if (n > 0) return n;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return hc ? int(hc) : 1;
    }();
    return v;
}
}  // namespace detail

inline int max_threads() { return detail::max_threads_ref(); }
inline void set_max_threads(int n) {
    if (n < 1) throw ParameterError("set_max_threads: n must be >= 1");
    detail::max_threads_ref() = n;
}

// fn(begin, end) over [0,n) in chunks of `grain`.
template <class Fn>
void parallel_chunks(int64_t n, int64_t grain, Fn&& fn) {
    if (n <= 0) return;
    if (grain < 1) grain = 1;
    const int64_t num_chunks = (n + grain - 1) / grain;
    int workers = std::min<int64_t>(max_threads(), num_chunks);
    if (workers <= 1) {
        for (int64_t c = 0; c < num_chunks; ++c)
            fn(c * grain, std::min(n, (c + 1) * grain));
        return;
    }
    std::atomic<int64_t> next{0};
    auto run = [&] {
        for (;;) {
            int64_t c = next.fetch_add(1, std::memory_order_relaxed);
            if (c >= num_chunks) break;
            fn(c * grain, std::min(n, (c + 1) * grain));
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int i = 1; i < workers; ++i) pool.emplace_back(run);
    run();
    for (auto& t : pool) t.join();
}

template <class Fn>
void parallel_for(int64_t n, int64_t grain, Fn&& fn) {
    parallel_chunks(n, grain, [&](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i) fn(i);
    });
}

}  // namespace sfuda3d
