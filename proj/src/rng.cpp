#include "flowsr/rng.hpp"

#include <cmath>

#include "flowsr/errors.hpp"

namespace flowsr {

namespace {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
    // 53 random bits, offset by half an ulp so the value is strictly inside (0,1).
    return (static_cast<double>(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

double Rng::gaussian() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
}

Rng Rng::derive(uint64_t stream) const {
    // Mix the base seed with the stream index through two splitmix steps so
    // neighbouring indices give unrelated states.
    uint64_t s = seed_used_ ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
    splitmix64(s);
    uint64_t state = splitmix64(s);
    return Rng(state, state);
}

Tensor gauss_sample(Rng& rng, std::vector<int64_t> shape, double stddev) {
    if (stddev < 0.0) throw DomainError("gauss_sample: stddev must be >= 0");
    Tensor t = Tensor::zeros(std::move(shape));
    if (stddev == 0.0) return t;
    double* p = t.data();
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) p[i] = stddev * rng.gaussian();
    return t;
}

}  // namespace flowsr
