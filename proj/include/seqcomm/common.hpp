#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace seqcomm {

// Caller passed something malformed: wrong shape, invalid index, bad argument.
struct UsageError : std::invalid_argument {
    explicit UsageError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A computation produced NaN/Inf or otherwise left the numeric domain.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// The request is valid but exceeds what this implementation supports.
struct CapabilityError : std::runtime_error {
    explicit CapabilityError(const std::string& msg) : std::runtime_error(msg) {}
};

// splitmix64 step; used to derive independent seed streams from one root seed.
inline uint64_t split_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(uint64_t seed, uint64_t stream = 0) {
    return std::mt19937_64(split_seed(seed, stream));
}

}  // namespace seqcomm
