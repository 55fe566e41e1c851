#pragma once

// Counter-based random streams. Every variate is a pure function of
// (key, particle, step, component), so results do not depend on the order
// in which particles are visited or on the number of worker threads.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace mrsim::rng {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Mixes a master seed with up to two integer labels into a child seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) noexcept {
    return splitmix64(splitmix64(master ^ splitmix64(a + 0x632BE59BD9B4E019ull)) ^ (b * 0xD1B54A32D192ED03ull));
}

/// Philox4x32-10 block function (Salmon et al., Random123).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) noexcept {
    constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
    constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kW0;
        key[1] += kW1;
    }
    return ctr;
}

/// An independent stream of variates addressed by (index, step, slot).
class Stream {
public:
    Stream() = default;
    explicit Stream(std::uint64_t seed) noexcept
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

    /// Two uniforms in (0,1) for the given address.
    std::array<double, 2> uniform2(std::uint64_t index, std::uint32_t step, std::uint32_t slot) const noexcept {
        const auto r = philox4x32({static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                                   step, slot},
                                  key_);
        return {to_unit(r[0], r[1]), to_unit(r[2], r[3])};
    }

    double uniform(std::uint64_t index, std::uint32_t step, std::uint32_t slot = 0) const noexcept {
        return uniform2(index, step, slot)[0];
    }

    /// Fills `out` with i.i.d. standard normals (Box-Muller, two per block).
    void normals(std::uint64_t index, std::uint32_t step, std::span<double> out) const noexcept {
        for (std::size_t c = 0; c < out.size(); c += 2) {
            const auto u = uniform2(index, step, static_cast<std::uint32_t>(c / 2));
            const double rad = std::sqrt(-2.0 * std::log(u[0]));
            const double ang = 2.0 * std::numbers::pi * u[1];
            out[c] = rad * std::cos(ang);
            if (c + 1 < out.size()) out[c + 1] = rad * std::sin(ang);
        }
    }

    double normal(std::uint64_t index, std::uint32_t step) const noexcept {
        double z[1];
        normals(index, step, z);
        return z[0];
    }

private:
    static double to_unit(std::uint32_t hi, std::uint32_t lo) noexcept {
        const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 21) ^ (lo >> 11);
        return (static_cast<double>(bits & ((1ull << 53) - 1)) + 0.5) * 0x1.0p-53;
    }

    std::array<std::uint32_t, 2> key_{0, 0};
};

/// Seeds of the separate noise sources of one particle run.
struct NoiseSeeds {
    std::uint64_t initial = 0;   ///< X_0 draws
    std::uint64_t brownian = 0;  ///< idiosyncratic B^i
    std::uint64_t common = 0;    ///< shared W

    static NoiseSeeds from_master(std::uint64_t seed, std::uint64_t member = 0) noexcept {
        return {derive_seed(seed, 0x11, member), derive_seed(seed, 0x22, member), derive_seed(seed, 0x33, member)};
    }
    bool operator==(const NoiseSeeds&) const = default;
};

}  // namespace mrsim::rng
