#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace lidia {

// splitmix64; used to expand seeds and derive independent substreams.
struct SplitMix64 {
    std::uint64_t state;
    explicit SplitMix64(std::uint64_t s) : state(s) {}
    std::uint64_t next() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
};

// Derives a child seed from a parent seed and a stream tag. Used to partition
// randomness per (epoch, step, role) so parallel pipelines stay reproducible.
inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag) {
    SplitMix64 sm(parent ^ (0x9e3779b97f4a7c15ULL + tag * 0xbf58476d1ce4e5b9ULL));
    std::uint64_t v = sm.next();
    return v ^ sm.next();
}

// xoshiro256++ (Blackman & Vigna). All noise and sampling in the library is
// driven by this generator; it is always an explicit value, never ambient.
struct Xoshiro256pp {
    std::array<std::uint64_t, 4> s{};

    explicit Xoshiro256pp(std::uint64_t seed) {
        SplitMix64 sm(seed);
        for (auto& w : s) w = sm.next();
    }

    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t next() {
        const std::uint64_t result = rotl(s[0] + s[3], 23) + s[0];
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    // 53-bit uniform in [0,1).
    double next_unit() { return double(next() >> 11) * 0x1.0p-53; }
    // Uniform in (0,1]; safe as a log() argument.
    double next_unit_open() { return double((next() >> 11) + 1) * 0x1.0p-53; }

    // Standard normal via Box-Muller; the second value of each pair is cached.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = next_unit_open();
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n) via the multiply-shift map. The (negligible)
    // modulo bias is acceptable for crop positions and shuffles.
    std::uint64_t next_below(std::uint64_t n) {
        return std::uint64_t((static_cast<unsigned __int128>(next()) * n) >> 64);
    }

  private:
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lidia
