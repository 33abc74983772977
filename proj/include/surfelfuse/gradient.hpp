#pragma once

// Gradient plumbing between the per-pixel / per-ray kernels and surfel parameters.
//
// Kernels write derivatives with respect to intermediate per-surfel terms
// (projected mean, conic, camera-space plane, color, world axes). The
// per-surfel chain back to position / quaternion / scale / color is replayed on
// a reverse-mode tape.

#include "surfelfuse/core.hpp"

#include <array>
#include <atomic>
#include <cstdint>
#include <span>
#include <vector>

namespace surfelfuse {

struct RasterConfig;

struct SurfelTermGrad {
    std::array<double, 2> mean{};
    std::array<double, 3> conic{};
    std::array<double, 3> center{};
    std::array<double, 3> normal{};
    std::array<double, 3> color{};
    std::array<double, 9> rotation{};  // world rotation, row-major
    std::array<double, 3> position{};  // direct world-position terms
    std::array<double, 2> scale{};
    double opacity = 0.0;

    SurfelTermGrad& operator+=(const SurfelTermGrad& o);
};

/// Zero-valued gradient with the same shape as `scene`.
Scene zero_gradient(const Scene& scene);

/// Chains term gradients collected for `camera` into parameter gradients.
void accumulate_parameter_gradients(const Scene& scene, const CameraModel& camera, const RasterConfig& config,
                                    std::span<const SurfelTermGrad> terms, Scene& gradient);

/// Order-independent fingerprint of the discrete decisions a render made
/// (which surfels touched which pixel, in what order, which bins were hit).
/// Finite differences are only meaningful while this stays constant.
struct StructureProbe {
    std::uint64_t soft_bin = 0;
    std::uint64_t other = 0;

    void add_soft_bin(std::uint64_t v) { std::atomic_ref(soft_bin).fetch_add(mix(v), std::memory_order_relaxed); }
    void add_other(std::uint64_t v) { std::atomic_ref(other).fetch_add(mix(v), std::memory_order_relaxed); }

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }
    static std::uint64_t combine(std::uint64_t h, std::uint64_t v) { return mix(h ^ (v + 0x632be59bd9b4e019ull)); }
};

}  // namespace surfelfuse
