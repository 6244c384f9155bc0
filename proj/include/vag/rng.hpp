#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "vag/error.hpp"

namespace vag {

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::uint64_t x, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (int i = 0; i < 8; ++i) {
        h ^= (x >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic random source. The engine is std::mt19937_64 (its output
// sequence is pinned by the standard) and all value transforms are done by
// hand, so identical seeds give identical draws on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1]; never zero, safe under log().
    double uniform_pos() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

    // Uniform index in [0, n). Lemire multiply-shift.
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw ContractError("Rng::uniform_index: n must be positive");
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Box-Muller; consumes exactly two draws per call.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform_pos();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream; deterministic given this stream's state and tag.
    Rng fork(std::string_view tag) { return Rng(fnv1a64(tag, fnv1a64(next_u64()))); }

private:
    std::mt19937_64 engine_;
};

}  // namespace vag
