#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace diffice {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Seed for the stream addressed by `path` under `master`. The derivation is
/// order-sensitive, so (seed, image, iteration, t) never collides with
/// (seed, image, t, iteration).
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
    std::uint64_t h = mix64(master);
    for (auto p : path) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
    return h;
}

inline Rng make_rng(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
    return Rng(derive_seed(master, path));
}

template <class T>
void fill_normal(std::span<T> out, Rng& rng, T stddev = T(1)) {
    std::normal_distribution<T> dist(T(0), stddev);
    for (auto& v : out) v = dist(rng);
}

template <class T>
void fill_uniform(std::span<T> out, Rng& rng, T lo, T hi) {
    std::uniform_real_distribution<T> dist(lo, hi);
    for (auto& v : out) v = dist(rng);
}

}  // namespace diffice
