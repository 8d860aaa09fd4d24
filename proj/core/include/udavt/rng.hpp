#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>

#include "udavt/common.hpp"

namespace udavt {

// SplitMix64 with labelled substream derivation. Streams depend only on the
// construction seed (and derivation labels), never on how many values were
// already drawn, so independent components can share one root seed without
// coupling their draw order.
class Rng {
  public:
    explicit Rng(uint64_t seed) : root_(seed), state_(scramble(seed ^ 0x6a09e667f3bcc908ull)) {}

    uint64_t next() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    Rng derive(std::string_view label) const {
        return Rng(scramble(root_ ^ fnv1a64(label)));
    }

    Rng derive(std::string_view label, uint64_t index) const {
        uint64_t h = fnv1a64(label);
        h = fnv1a64(&index, sizeof(index), h);
        return Rng(scramble(root_ ^ h));
    }

    uint64_t seed() const { return root_; }

    // [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n)
    uint64_t below(uint64_t n) {
        if (n <= 1) return 0;
        uint64_t mask = ~0ull >> __builtin_clzll(n - 1 | 1);
        uint64_t v;
        do {
            v = next() & mask;
        } while (v >= n);
        return v;
    }

    double normal(double mean = 0.0, double sd = 1.0) {
        // Box-Muller; u clamped away from 0 so log stays finite.
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        return mean + sd * r * std::cos(2.0 * M_PI * v);
    }

    // Resample until |x| <= 2*sd (ViT-style truncated init).
    double trunc_normal(double sd) {
        double x;
        do {
            x = normal(0.0, sd);
        } while (std::abs(x) > 2.0 * sd);
        return x;
    }

    template <class It>
    void shuffle(It begin, It end) {
        size_t n = static_cast<size_t>(end - begin);
        for (size_t i = n; i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(begin[i - 1], begin[j]);
        }
    }

  private:
    static uint64_t scramble(uint64_t z) {
        z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdull;
        z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ull;
        return z ^ (z >> 33);
    }

    uint64_t root_;
    uint64_t state_;
};

}  // namespace udavt
