#pragma once

#include <cstdint>

#include "flowsr/tensor.hpp"

namespace flowsr {

/// Seedable PRNG: a splitmix64 stream feeding a Box-Muller Gaussian
/// transform. Identical seed gives an identical sequence on every
/// platform; each generator owns its own state so parallel streams
/// never interleave.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed), seed_used_(seed) {}

    uint64_t next_u64();

    /// Uniform double in (0,1), never exactly 0 or 1.
    double uniform();

    /// Standard normal draw (Box-Muller, second value cached).
    double gaussian();

    /// Deterministic child stream for (this seed, stream index).
    Rng derive(uint64_t stream) const;

    uint64_t seed() const { return seed_used_; }

private:
    Rng(uint64_t state, uint64_t seed_used) : state_(state), seed_used_(seed_used) {}
    uint64_t state_;
    uint64_t seed_used_ = 0;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

/// I.i.d. N(0, stddev^2) tensor; stddev = 0 returns zeros without
/// consuming any randomness.
Tensor gauss_sample(Rng& rng, std::vector<int64_t> shape, double stddev);

}  // namespace flowsr
