#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace xtab {

// Error taxonomy. Contract violations throw; callers that can recover catch
// by category.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error("usage error: " + msg) {}
};
struct LoadError : std::runtime_error {
    explicit LoadError(const std::string& msg) : std::runtime_error("load error: " + msg) {}
};
struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& msg) : std::runtime_error("protocol error: " + msg) {}
};
struct MetricError : std::runtime_error {
    explicit MetricError(const std::string& msg) : std::runtime_error("metric error: " + msg) {}
};

using Rng = std::mt19937_64;

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent deterministic RNG streams derived from one master seed.
// Stream tags keep e.g. featurizer init and backbone init decoupled, so a
// checkpoint-initialized run and a random-initialized run consume identical
// featurizer/head init values.
inline Rng rng_stream(uint64_t seed, uint64_t tag) {
    return Rng(splitmix64(seed ^ splitmix64(tag)));
}

namespace stream_tag {
constexpr uint64_t featurizer_init = 0x11;
constexpr uint64_t backbone_init = 0x22;
constexpr uint64_t head_init = 0x33;
constexpr uint64_t dropout = 0x44;
constexpr uint64_t corruption = 0x55;
constexpr uint64_t batching = 0x66;
constexpr uint64_t subsample = 0x77;
constexpr uint64_t data_gen = 0x88;
}  // namespace stream_tag

// FNV-1a, used for config hashes embedded in result records and checkpoint
// sidecars.
inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace xtab
