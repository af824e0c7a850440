#pragma once

#include <cstdint>
#include <random>

namespace ame {

// Counter-based randomness: every draw is a pure function of
// (seed, stream, row, column), so rows can be generated in any order or on
// any worker and still produce identical results.

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept
{
    return splitmix64(a ^ splitmix64(b));
}

/// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit(std::uint64_t bits) noexcept
{
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Uniform double in (0, 1).
constexpr double to_open_unit(std::uint64_t bits) noexcept
{
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

enum class Stream : std::uint64_t {
    PDraw = 1,
    Mask = 2,
    KnockoffMask = 3,
    TopMask = 4,
    TopKnockoffMask = 5,
    Fold = 6,
    OracleNoise = 7,
    Trial = 8,
    Permutation = 9,
    Game = 10,
    Task = 11,
};

class CounterRng
{
public:
    CounterRng(std::uint64_t seed, Stream stream) noexcept
        : key_(hash_combine(seed, static_cast<std::uint64_t>(stream)))
    {}

    std::uint64_t bits(std::uint64_t row, std::uint64_t col = 0) const noexcept
    {
        return hash_combine(hash_combine(key_, row), col);
    }

    double uniform(std::uint64_t row, std::uint64_t col = 0) const noexcept
    {
        return to_unit(bits(row, col));
    }

    double open_uniform(std::uint64_t row, std::uint64_t col = 0) const noexcept
    {
        return to_open_unit(bits(row, col));
    }

    /// Sequential engine for draws that need rejection sampling (gamma, normal).
    std::mt19937_64 engine(std::uint64_t row) const { return std::mt19937_64(bits(row, ~0ULL)); }

private:
    std::uint64_t key_;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept
{
    return hash_combine(hash_combine(seed, static_cast<std::uint64_t>(Stream::Trial)), index);
}

} // namespace ame
