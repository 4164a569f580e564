#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace unipact {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xCBF29CE484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

/// Derive an independent stream seed from a base seed and a salt.
inline uint64_t derive_seed(uint64_t base, uint64_t salt) {
    return splitmix64(base ^ splitmix64(salt));
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
    return derive_seed(base, fnv1a64(tag));
}

/// Deterministic RNG. mt19937_64 has a standardized sequence, and all
/// transforms below are explicit, so streams are identical on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float uniform_f() { return static_cast<float>(uniform()); }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (no cached spare, stream is position-independent).
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    float normal_f() { return static_cast<float>(normal()); }

    /// Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

/// Fixed-point decimal formatting, locale independent.
inline std::string format_fixed(double v, int decimals) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, decimals);
    return std::string(buf, res.ptr);
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Static-chunk parallel map: fn(begin, end, chunk_index). Chunk boundaries
/// depend only on (n, threads), so any reduction done in chunk order is
/// deterministic for a fixed thread count.
template <typename Fn>
void parallel_chunks(size_t n, int threads, Fn&& fn) {
    if (threads < 1) threads = 1;
    size_t t = std::min<size_t>(static_cast<size_t>(threads), n == 0 ? 1 : n);
    if (t <= 1) {
        fn(size_t{0}, n, 0);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(t);
    size_t chunk = (n + t - 1) / t;
    for (size_t i = 0; i < t; ++i) {
        size_t b = i * chunk;
        size_t e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e, i] { fn(b, e, i); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace unipact
