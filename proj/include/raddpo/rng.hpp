#pragma once

// Deterministic RNG helpers. All stochastic components derive their streams
// through these so that a (seed, stream) pair fully determines behavior and
// independent streams can be consumed in any order.

#include <cstdint>
#include <random>

namespace raddpo::rngu {

// splitmix64 finalizer; good avalanche for combining seed material.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Independent generator for (seed, stream); streams may be consumed in any
// order without affecting one another.
inline std::mt19937_64 derive(uint64_t seed, uint64_t stream) {
    return std::mt19937_64(mix64(mix64(seed) ^ mix64(stream * 0x100000001b3ull + 0x51ull)));
}

// Uniform double in [0,1) built directly from generator bits (the standard
// distributions are implementation-defined; this is pinned).
inline double uniform01(std::mt19937_64& g) {
    return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

// Uniform index in [0, n).
inline size_t uniform_index(std::mt19937_64& g, size_t n) {
    return static_cast<size_t>(uniform01(g) * static_cast<double>(n)) % n;
}

// Standard normal via Box-Muller on pinned uniforms.
inline double normal(std::mt19937_64& g) {
    double u1 = uniform01(g);
    while (u1 <= 0.0) u1 = uniform01(g);
    const double u2 = uniform01(g);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

} // namespace raddpo::rngu
