// SPDX-License-Identifier: Apache-2.0
#include "ww/rng.hpp"

#include <cmath>

namespace ww {

namespace {
constexpr uint64_t kGamma = 0x9e3779b97f4a7c15ULL;
}

uint64_t CounterRng::mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

CounterRng::CounterRng(uint64_t seed, RngStream stream, uint64_t substream)
    : key_(mix(mix(seed ^ mix(static_cast<uint64_t>(stream) * kGamma)) + substream * kGamma)) {}

uint64_t CounterRng::next_u64() {
    ++counter_;
    return mix(key_ + counter_ * kGamma);
}

double CounterRng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint64_t CounterRng::below(uint64_t bound) {
    // Rejection keeps the draw unbiased.
    const uint64_t limit = ~uint64_t{0} - (~uint64_t{0} % bound);
    uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % bound;
}

double CounterRng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

} // namespace ww
