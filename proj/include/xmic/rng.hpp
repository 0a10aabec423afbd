#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "xmic/common.hpp"

namespace xmic {

// All stochastic behaviour in the library flows through one seeded engine per
// logical purpose. Sub-seeds are derived with splitmix64 so that independent
// components (data generation, shuffling, frame sampling, weight init) never
// share a stream.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return splitmix64(base ^ splitmix64(stream));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

inline void fill_normal(Rng& rng, std::vector<Scalar>& out, Scalar stddev = 1.0) {
    std::normal_distribution<Scalar> dist(0.0, stddev);
    for (auto& v : out) v = dist(rng);
}

inline std::vector<Scalar> draw_normal(Rng& rng, std::size_t n, Scalar stddev = 1.0) {
    std::vector<Scalar> out(n);
    fill_normal(rng, out, stddev);
    return out;
}

// Uniform direction on the unit sphere in R^dim.
inline std::vector<Scalar> draw_unit_vector(Rng& rng, std::size_t dim) {
    std::vector<Scalar> v = draw_normal(rng, dim);
    Scalar norm2 = 0.0;
    for (Scalar x : v) norm2 += x * x;
    while (norm2 < 1e-24) {  // astronomically unlikely; redraw
        v = draw_normal(rng, dim);
        norm2 = 0.0;
        for (Scalar x : v) norm2 += x * x;
    }
    Scalar inv = 1.0 / std::sqrt(norm2);
    for (auto& x : v) x *= inv;
    return v;
}

}  // namespace xmic
