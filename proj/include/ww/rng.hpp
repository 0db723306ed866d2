// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace ww {

// Purpose-separated streams. Values are part of the fixture format: changing
// them changes every synthetic model, trace and sketch.
enum class RngStream : uint64_t {
    weights = 1,
    inputs = 2,
    sketch = 3,
    reservoir = 4,
    sampling = 5,
    anomaly = 6,
    plant = 7,
};

// Counter-based generator: output i is splitmix64_mix(key + (i+1) * gamma),
// with key derived from (seed, stream, substream). Any draw can be
// recomputed from its coordinates, independent of platform and library.
class CounterRng {
public:
    CounterRng(uint64_t seed, RngStream stream, uint64_t substream = 0);

    uint64_t next_u64();
    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    // Uniform integer in [0, bound).
    uint64_t below(uint64_t bound);
    // Standard normal via Box-Muller (one variate per pair of uniforms).
    double normal();

    uint64_t counter() const { return counter_; }

    static uint64_t mix(uint64_t z);

private:
    uint64_t key_;
    uint64_t counter_ = 0;
};

} // namespace ww
