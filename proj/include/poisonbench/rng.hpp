#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace poisonbench {

using Rng = std::mt19937_64;

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
    for (unsigned char c : s) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

inline constexpr std::uint64_t fnv1a64(std::uint64_t v, std::uint64_t h = kFnvOffset) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= kFnvPrime;
    }
    return h;
}

/// Stage-scoped seed: every module draws from (global seed, stage name)
/// so stages stay reproducible independently of call order.
inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view stage) {
    return fnv1a64(stage, fnv1a64(base));
}

/// Per-unit stream (e.g. one cluster, one query) under a stage seed.
inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view stage, std::uint64_t index) {
    return fnv1a64(index, fnv1a64(stage, fnv1a64(base)));
}

} // namespace poisonbench
