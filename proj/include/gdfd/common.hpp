#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace gdfd {

// Error hierarchy. Every failure mode surfaces as one of these typed
// exceptions so callers (and tests) can distinguish contract violations
// from bad data or runtime divergence.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/operation shape disagreement.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid argument value (non-positive temperature, bad sizes, ...).
struct ParamError : Error {
    using Error::Error;
};

// API contract misuse (backward on non-scalar, registry mismatch, ...).
struct ContractError : Error {
    using Error::Error;
};

// Autodiff tape misuse (variable not on this tape).
struct TapeError : Error {
    using Error::Error;
};

// Bad configuration file or builder config.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed or insufficient input data (files, datasets).
struct DataError : Error {
    using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
    DivergenceError(const std::string& msg, long step_index)
        : Error(msg), step(step_index) {}
    long step;
};

// Deterministic RNG used everywhere randomness enters the library.
// A thin xoshiro-free wrapper over splitmix64: the sequence is fully
// specified here, so results do not depend on the C++ standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (stateless across calls: two uniforms
    // per sample, no cached second value).
    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        constexpr double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

private:
    std::uint64_t state_;
};

// Deterministic per-stream seed derivation, e.g. one independent seed per
// ensemble member. Serial and parallel training agree because member i
// always receives derive_seed(base, i).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    Rng r(base ^ (0xD1342543DE82EF95ull * (stream + 1)));
    r.next_u64();
    return r.next_u64();
}

} // namespace gdfd
