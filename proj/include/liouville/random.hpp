#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace liouville {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer, used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seed for a named purpose ("data", "collocation", "init", ...) derived from
/// the root seed. Distinct purposes give statistically independent streams.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose) noexcept {
    return mix_seed(root ^ mix_seed(fnv1a(purpose)));
}

/// Seed for the i-th member of a stream, e.g. trajectory i, attempt a.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index,
                                    std::uint64_t attempt = 0) noexcept {
    return mix_seed(mix_seed(root + 0x632be59bd9b4e019ULL * (index + 1)) ^ mix_seed(attempt));
}

inline Rng make_rng(std::uint64_t seed) { return Rng{seed}; }

} // namespace liouville
