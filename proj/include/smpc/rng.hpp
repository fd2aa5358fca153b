#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "types.hpp"

namespace smpc {

// Counter-based generator: every draw is a pure function of
// (seed, stream, counter), so parallel trial workers reproduce the exact same
// numbers regardless of scheduling.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream) : key_(mix(mix(seed) ^ (stream * 0xD1B54A32D192ED03ull))) {}

    // Uniform in the open interval (0, 1).
    [[nodiscard]] double uniform(std::uint64_t counter) const {
        const std::uint64_t bits = mix(key_ + counter * 0x9E3779B97F4A7C15ull);
        return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller on two independent counters.
    [[nodiscard]] double normal(std::uint64_t counter) const {
        const double u1 = uniform(2 * counter);
        const double u2 = uniform(2 * counter + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Fills `out` with normals for counters [first, first + out.size()).
    void normals(std::uint64_t first, Eigen::Ref<Vector> out) const {
        for (Index i = 0; i < out.size(); ++i) out(i) = normal(first + static_cast<std::uint64_t>(i));
    }

    // Derives an independent child seed, e.g. per trial or per (k, j) row.
    [[nodiscard]] static std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
        return mix(mix(seed ^ mix(a + 0x632BE59BD9B4E019ull)) + b * 0x8CB92BA72F3D8DD7ull);
    }

private:
    // splitmix64 finalizer
    static constexpr std::uint64_t mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
};

// Named streams so different noise sources never share counters.
namespace streams {
inline constexpr std::uint64_t process_noise     = 1;
inline constexpr std::uint64_t measurement_noise = 2;
inline constexpr std::uint64_t excitation        = 3;
inline constexpr std::uint64_t initial_state     = 4;
inline constexpr std::uint64_t parameters        = 5;
inline constexpr std::uint64_t quantile          = 6;
inline constexpr std::uint64_t perturbation      = 7;
inline constexpr std::uint64_t rollout           = 8;
inline constexpr std::uint64_t trial             = 9;
} // namespace streams

} // namespace smpc
