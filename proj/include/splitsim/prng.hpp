#pragma once

#include <cstdint>

namespace splitsim {

// SplitMix64 (Steele, Lea, Flood 2014). Chosen over std::mt19937_64 because
// the whole sequence is pinned by ~10 lines of arithmetic: any reimplementation
// in any language reproduces the golden workloads bit-for-bit.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [lo, hi], inclusive. Modulo draw; the tiny bias is irrelevant
    // for synthetic token counts and keeps the algorithm trivially portable.
    std::int64_t next_range(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1ULL;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    // Uniform double in [0, 1) with 53 random bits.
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

private:
    std::uint64_t state_;
};

}  // namespace splitsim
