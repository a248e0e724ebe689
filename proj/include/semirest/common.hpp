#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace semirest {

// ---------------------------------------------------------------------------
// Error taxonomy. Commands map these onto exit codes (see cli.hpp).
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ArgumentError : Error {
    using Error::Error;
};

struct DimensionError : ArgumentError {
    using ArgumentError::ArgumentError;
};

// backward() called without a matching forward pass, and similar misuse
struct StateError : Error {
    using Error::Error;
};

struct DecodeError : Error {
    using Error::Error;
};

struct MagicMismatchError : DecodeError {
    using DecodeError::DecodeError;
};

struct TruncatedFileError : DecodeError {
    using DecodeError::DecodeError;
};

struct HeaderError : DecodeError {
    using DecodeError::DecodeError;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct NumericalError : Error {
    using Error::Error;
};

// metric requested on degenerate input (single-class truth, no regions, ...)
struct UndefinedMetricError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// RNG. All randomness in the library flows through one engine type and the
// transforms below, so a (seed, stream) pair pins every draw bit-exactly.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Independent stream id under one base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return splitmix64(base ^ splitmix64(stream + 0x632be59bd9b4e019ull));
}

// uniform in [0, 1)
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_range(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

// inclusive bounds
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    // modulo bias is irrelevant at desk scale vs 2^64
    return rng() % n;
}

// Box-Muller; always consumes exactly two engine outputs.
inline double normal01(Rng& rng) {
    double u1 = uniform01(rng);
    double u2 = uniform01(rng);
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Johnk's sampler for the symmetric Beta(a, a), valid for any a > 0.
inline double beta_symmetric(Rng& rng, double a) {
    if (!(a > 0.0)) throw ArgumentError("beta_symmetric: shape must be > 0");
    for (;;) {
        const double u = uniform01(rng);
        const double v = uniform01(rng);
        const double x = std::pow(u, 1.0 / a);
        const double y = std::pow(v, 1.0 / a);
        const double s = x + y;
        if (s <= 1.0 && s > 0.0) return x / s;
    }
}

}  // namespace semirest
