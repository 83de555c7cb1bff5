#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace clseg {

/// Identifier written into every experiment record so results can be traced
/// to the exact generator in use.
inline constexpr const char* kRngName = "pcg32-v1";

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Deterministic sub-seed derivation: same (seed, tag) always maps to the
/// same stream, different tags decorrelate.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
    return splitmix64(seed ^ fnv1a64(tag));
}

/// Minimal PCG-XSH-RR 32-bit generator. Fixed algorithm so that shuffles and
/// samples are reproducible bit-for-bit across platforms and standard
/// libraries.
class Pcg32 {
public:
    explicit Pcg32(uint64_t seed, uint64_t stream = 0) { reseed(seed, stream); }

    void reseed(uint64_t seed, uint64_t stream = 0) {
        state_ = 0;
        inc_ = (stream << 1u) | 1u;
        next();
        state_ += seed;
        next();
        has_cached_gauss_ = false;
    }

    uint32_t next() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    uint64_t next64() {
        uint64_t hi = next();
        return (hi << 32) | next();
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Unbiased via rejection.
    uint32_t uniform_int(uint32_t n) {
        uint32_t threshold = (-n) % n;
        for (;;) {
            uint32_t r = next();
            if (r >= threshold) return r % n;
        }
    }

    /// Standard normal via Box-Muller (second draw cached).
    double gaussian() {
        if (has_cached_gauss_) {
            has_cached_gauss_ = false;
            return cached_gauss_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_gauss_ = r * std::sin(a);
        has_cached_gauss_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_int(static_cast<uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices sampled from [0, n), in draw order.
    std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        shuffle(idx);
        idx.resize(k < n ? k : n);
        return idx;
    }

private:
    uint64_t state_ = 0;
    uint64_t inc_ = 1;
    double cached_gauss_ = 0.0;
    bool has_cached_gauss_ = false;
};

}  // namespace clseg
