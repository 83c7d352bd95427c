#pragma once

// Platform-stable random helpers shared by the data generators and
// parameter initialization (std distributions vary across stdlibs).

#include <cmath>
#include <cstdint>

#include "moiie/tensor.hpp"

namespace moiie::rng {

inline uint64_t splitmix(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline double unit(uint64_t& state) {
    return static_cast<double>(splitmix(state) >> 11) * 0x1.0p-53;
}

inline double normal(uint64_t& state) {
    double u1 = unit(state);
    while (u1 <= 0.0) u1 = unit(state);
    const double u2 = unit(state);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline void fill_normal(Tensor& t, double stddev, uint64_t seed) {
    uint64_t state = seed;
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, stddev * normal(state));
}

}  // namespace moiie::rng
