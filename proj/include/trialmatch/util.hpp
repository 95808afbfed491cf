#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace trialmatch {

// 64-bit FNV-1a. Used for content hashes and for seeding per-token streams.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

std::uint64_t splitmix64(std::uint64_t& state);

/// Lowercase hex rendering of a 64-bit value, zero padded to 16 chars.
std::string hex64(std::uint64_t v);

/// Deterministic random source. Only the raw mt19937_64 stream is used; every
/// derived distribution is implemented here so results do not depend on the
/// standard library's distribution algorithms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);

    // Box-Muller; one value per call, the pair partner is discarded.
    double normal();

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

/// Splits on ASCII whitespace; no empty tokens.
std::vector<std::string> split_whitespace(std::string_view text);

std::string to_lower(std::string_view s);

/// Shortest decimal that round-trips the double ("%.17g" trimmed).
std::string format_double(double v);

}  // namespace trialmatch
