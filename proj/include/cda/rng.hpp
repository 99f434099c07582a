#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace cda {

// 64-bit finalizer from the splitmix64 generator.
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Seed-derivation chain. Derived streams are defined as
//   chain(chain(chain(seed, a), b), c) ...
// so the same (seed, parts...) always maps to the same stream on any
// platform. Used for per-(domain, index, view) augmentation seeds.
inline uint64_t seed_chain(uint64_t h, uint64_t part) {
    return mix64(h + 0x9E3779B97F4A7C15ULL + part);
}

inline uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> parts) {
    uint64_t h = mix64(seed + 0x9E3779B97F4A7C15ULL);
    for (uint64_t p : parts) h = seed_chain(h, p);
    return h;
}

// Deterministic splitmix64 stream. Distributions are hand-rolled
// (53-bit uniform, Box-Muller normal) so sequences are identical across
// standard libraries and platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix64(state_);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the spare value is discarded so the
    // stream position does not depend on call history.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Uniform integer in [0, n) via multiply-shift.
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // First n entries of a seeded Fisher-Yates shuffle of [0, total).
    std::vector<size_t> sample_without_replacement(size_t total, size_t n) {
        std::vector<size_t> idx(total);
        for (size_t i = 0; i < total; ++i) idx[i] = i;
        for (size_t i = 0; i < n && i + 1 < total; ++i) {
            size_t j = i + static_cast<size_t>(below(total - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(n);
        return idx;
    }

    std::vector<size_t> permutation(size_t total) {
        return sample_without_replacement(total, total);
    }

private:
    uint64_t state_;
};

} // namespace cda
