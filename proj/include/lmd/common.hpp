#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lmd {

// ============================================================
// Errors. The CLI maps these onto stable exit codes:
//   ValidationError/StateError -> 1, DataError -> 2, NumericError -> 3.
// ============================================================

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad arguments, bad config, violated preconditions.
struct ValidationError : Error {
    using Error::Error;
};

// File format problems: magic, version, truncation, CRC.
struct DataError : Error {
    using Error::Error;
};

// Non-finite values in a forward/backward pass.
struct NumericError : Error {
    using Error::Error;
};

// Contract violations on mutable state (e.g. missing gradients).
struct StateError : Error {
    using Error::Error;
};

// Non-fatal diagnostics to stderr, prefixed "[lmd] warning:".
void warn(const std::string& msg);

// ============================================================
// Deterministic RNG: xoshiro256** seeded via splitmix64.
// No libstdc++ distributions, so streams are reproducible
// independently of the standard library implementation.
// ============================================================

class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    // Uniform in [-a, a).
    double uniform_sym(double a);
    // Standard normal via Box-Muller, second draw cached.
    double normal();
    // Uniform integer in [0, n), n > 0.
    std::uint64_t below(std::uint64_t n);
    // Fisher-Yates shuffle of an index vector.
    void shuffle(std::vector<int>& idx);

private:
    std::uint64_t s_[4];
    double cached_normal_ = 0.0;
    bool has_cached_ = false;
};

// Derives an independent stream seed from (base, stream tags).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b);
// Tag from a short string literal (FNV-1a), for readable derivations.
std::uint64_t seed_tag(const char* name);

// ============================================================
// Hashing / checksums
// ============================================================

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0);
std::uint64_t fnv1a64(const void* data, std::size_t len,
                      std::uint64_t seed = 1469598103934665603ull);
std::string hex64(std::uint64_t v);

// ============================================================
// Small file helpers
// ============================================================

std::string read_file(const std::string& path);
// Write-temp-then-rename so concurrent readers never see partial files.
void write_file_atomic(const std::string& path, const std::string& bytes);

// Throws NumericError naming `what` if any element is NaN/Inf.
void check_finite(std::span<const double> values, const char* what);

} // namespace lmd
