#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace cdsr {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// FNV-1a, used to give every named parameter its own init stream.
inline std::uint64_t hash_name(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Seeded random stream. Streams are derived from a root seed plus a tuple
/// of counters (step, sample index, purpose tag), so the draws of any one
/// stream do not depend on how many values other streams consumed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> counters) {
        std::uint64_t s = splitmix64(seed);
        for (std::uint64_t c : counters) s = splitmix64(s ^ splitmix64(c + 0x51ED27ull));
        return Rng(s);
    }

    /// Uniform in [0, 1).
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
    double normal() { return normal_(engine_); }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace cdsr
