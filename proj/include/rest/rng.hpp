#pragma once

// Seeded random streams. Every random draw in the project flows from a root
// seed through derive_seed(), so results are independent of worker count and
// identical across platforms (mt19937_64 output is pinned by the standard,
// and all distribution shaping is done by hand).

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace rest {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derive an independent stream seed from (root, stream id). Used to give each
// source context / phase its own generator.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
    return splitmix64(root ^ splitmix64(stream + 0x51'7c'c1'b7'27'22'0a'95ull));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b) {
    return derive_seed(derive_seed(root, a), b);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t bits() { return engine_(); }

    // Uniform in [0,1) with 53 random bits.
    double real() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform in {0, ..., n-1}; n must be >= 1.
    std::uint64_t below(std::uint64_t n) {
        // rejection sampling keeps the draw unbiased and reproducible
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(below(n)); }

    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u = 1.0 - real();  // (0,1]
        double v = real();
        double radius = std::sqrt(-2.0 * std::log(u));
        double angle = 6.283185307179586477 * v;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    template <typename Container>
    void shuffle(Container& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = index(i + 1);
            std::swap(v[i], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace rest
