#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace raddpo {

// Error taxonomy mirrors the CLI exit codes (see tools/raddpo_main.cpp):
// config 2, missing input 3, training divergence 4, hash mismatch 5.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingDivergedError : std::runtime_error {
    TrainingDivergedError(const std::string& msg, long step)
        : std::runtime_error(msg), step(step) {}
    long step;
};

struct HashMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// FNV-1a over raw bytes. Used for provenance records (config/corpus hashes),
// not for security.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(uint64_t v);
std::string hash_file_hex(const std::string& path);  // throws MissingInputError
std::string read_text_file(const std::string& path); // throws MissingInputError

inline const char* kToolVersion = "raddpo 0.1.0";

} // namespace raddpo
