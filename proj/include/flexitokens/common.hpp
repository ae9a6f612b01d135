#pragma once

// Shared plumbing: error types, deterministic RNG streams, stable shuffling,
// and a small parallel_for capped by FLEXITOK_THREADS.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ftok {

// Exit-code contract: config/usage -> 1, data -> 2, numerical abort -> 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Mix an arbitrary number of 64-bit keys into one stream seed.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = 0x2545f4914f6cdd1dull;
    for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k));
    return h;
}

// Deterministic RNG with the distributions we need spelled out explicitly,
// so draws are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0,1) with 53 random bits
    double uniform01() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // uniform in (0,1), safe for log()
    double uniform_open() {
        double u = uniform01();
        return u <= 0.0 ? 0x1.0p-53 : u;
    }

    double normal(double mu = 0.0, double sigma = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mu + spare_ * sigma;
        }
        double u1 = uniform_open();
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return mu + r * std::cos(a) * sigma;
    }

    // standard logistic = difference of two Gumbel(0,1) draws
    double logistic() {
        double u = uniform_open();
        if (u >= 1.0) u = 1.0 - 0x1.0p-53;
        return std::log(u) - std::log1p(-u);
    }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        return n <= 1 ? 0 : eng_() % n;
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Permutation of [0,n) keyed by (seed, index): stable across platforms and
// independent of any library shuffle implementation.
inline std::vector<std::size_t> stable_shuffle(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::vector<std::uint64_t> key(n);
    for (std::size_t i = 0; i < n; ++i) key[i] = mix_seed({seed, static_cast<std::uint64_t>(i)});
    std::sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
        if (key[a] != key[b]) return key[a] < key[b];
        return a < b;
    });
    return perm;
}

inline int max_threads() {
    if (const char* env = std::getenv("FLEXITOK_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0,n). Results must only depend on i; the caller is
// responsible for writing outputs to disjoint slots so order is irrelevant.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, int threads = -1) {
    if (threads < 0) threads = max_threads();
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::vector<std::thread> pool;
    pool.reserve(nt);
    std::exception_ptr err;
    std::mutex err_mu;
    for (std::size_t t = 0; t < nt; ++t) {
        pool.emplace_back([&, t]() {
            try {
                for (std::size_t i = t; i < n; i += nt) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

// 160-bit looking content id from two independent fnv streams.
inline std::string content_id(const std::string& payload) {
    std::uint64_t a = fnv1a64(payload.data(), payload.size());
    std::uint64_t b = fnv1a64(payload.data(), payload.size(), 0x84222325cbf29ce4ull);
    std::uint64_t c = splitmix64(a ^ (b << 1));
    return hex64(a) + hex64(b) + hex64(c).substr(0, 8);
}

}  // namespace ftok
