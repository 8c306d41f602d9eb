#pragma once

// Counter-based 64-bit PRNG (SplitMix64) plus Box-Muller normal sampling.
// Identical seed => bit-identical stream, on any platform with IEEE doubles.

#include <cstdint>
#include <cmath>

namespace nthlab {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in the open interval (0,1); never returns 0 or 1, so it is
    // safe under log().
    double uniform01() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1p-53;
    }

    // Uniform in (-1,1).
    double uniform_sym() { return 2.0 * uniform01() - 1.0; }

    // Standard normal via Box-Muller; the second variate of each pair is
    // cached so consecutive calls consume the stream deterministically.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Stable seed derivation for independent sub-streams (sweep cells, MC
// replicates). Mixes both words through one SplitMix64 round.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    Rng r(base ^ (0x632be59bd9b4e019ull + index * 0x9e3779b97f4a7c15ull));
    return r.next_u64();
}

} // namespace nthlab
