#pragma once

#include <cstdint>
#include <string_view>

namespace lst {

// Deterministic splittable RNG built on splitmix64. Sampling decisions in the
// data pipeline compare raw 64-bit draws against integer thresholds, so a
// given seed reproduces the same corpus on any platform.
//
// Every consumer derives its own stream with substream(); streams never
// share state. Labels are part of the seed, so (root, "corpus", k) is stable
// across runs and across code that draws in a different order.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Unbiased draw in [0, n) by rejection.
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next();
        while (v >= limit) v = next();
        return v % n;
    }

    // True with probability p. The decision is a single integer compare.
    bool bernoulli(double p) {
        if (p <= 0.0) return false;
        if (p >= 1.0) return true;
        const auto threshold = static_cast<uint64_t>(p * 18446744073709551616.0 /* 2^64 */);
        return next() < threshold;
    }

    // 1 + geometric number of failures, so the support is {1, 2, ...} and the
    // mean is exactly `mean`. Capped to keep pathological draws bounded; the
    // cap shifts the mean by under 1e-4 for the configured ranges.
    int64_t shifted_geometric(double mean, int64_t cap = 64) {
        const double p = 1.0 / mean;
        int64_t len = 1;
        while (len < cap && !bernoulli(p)) ++len;
        return len;
    }

    double unit() {  // [0, 1), 53-bit resolution
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    Rng substream(uint64_t label) const {
        Rng child(mix(state_, label));
        return child;
    }

    Rng substream(std::string_view label) const {
        // FNV-1a over the label bytes keeps names portable.
        uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return substream(h);
    }

private:
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        return z ^ (z >> 31);
    }

    uint64_t state_;
};

}  // namespace lst
