#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace romekit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// Error taxonomy. The CLI maps each family onto a distinct exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class InputError : public Error {
public:
    using Error::Error;
};

/// Generation requested more tokens than the context window holds.
class TruncationError : public InputError {
public:
    using InputError::InputError;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class SolverDivergence : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class DegenerateKey : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// splitmix64 step; used to derive independent sub-seeds from a master seed.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Uniform double in [0, 1) from the top 53 bits of a 64-bit engine draw.
template <class Engine>
double uniform01(Engine& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n) without modulo bias.
template <class Engine>
std::uint64_t uniform_index(Engine& rng, std::uint64_t n) {
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t x = rng();
    while (x >= limit) {
        x = rng();
    }
    return x % n;
}

}  // namespace romekit
