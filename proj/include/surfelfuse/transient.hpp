#pragma once

// Diffuse-LiDAR transient rendering: cone ray sampling, soft temporal binning
// and opacity-weighted deposits of every surfel a ray crosses.

#include "surfelfuse/core.hpp"
#include "surfelfuse/gradient.hpp"
#include "surfelfuse/raster.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace surfelfuse {

struct ConeSampleSet {
    std::vector<Vec3> origins;
    std::vector<Vec3> directions;  // unit, world space
    std::vector<Vec2> image_points;  // points on the z = 1 camera plane
    std::vector<double> weights;     // solid-angle weights, sum to 1
};

/// Stratified jittered samples over the zone rectangle; one sample is the axis ray.
ConeSampleSet sample_cone(const Cone& cone, int n_rays, std::uint64_t seed);

struct BinAssignment {
    int lower_bin = 0;
    double w1 = 1.0;  // weight of lower_bin
    double w2 = 0.0;  // weight of lower_bin + 1
    bool out_of_range = false;
};

/// Soft bin for a one-way distance `distance_m`.
BinAssignment bin_index(double distance_m, double bin_width_s, int n_bins);

enum class DepositWeight {
    Opacity,        // every crossed surfel deposits its raw opacity
    Transmittance,  // deposits T * alpha along the ray
};

struct TransientConfig {
    DepositWeight deposit = DepositWeight::Transmittance;
    RasterConfig raster;
};

struct TransientStats {
    double deposited = 0.0;  // mass landed in bins
    double dropped = 0.0;    // mass beyond the last bin
    std::int64_t dropped_count = 0;
};

/// Counter-based seed for a zone so each zone draws an independent stream.
std::uint64_t zone_seed(std::uint64_t seed, ZoneIndex zone, int nx);

/// Histogram of one zone. `pose` supplies the co-located camera pose and intrinsics.
std::vector<double> render_transient(const Scene& scene, const LidarConfig& lidar, const CameraModel& pose,
                                     ZoneIndex zone, std::uint64_t seed, const TransientConfig& config = {},
                                     TransientStats* stats = nullptr);

/// All zones, rows in parallel.
TransientImage render_transient_image(const Scene& scene, const LidarConfig& lidar, const CameraModel& pose,
                                      std::uint64_t seed, const TransientConfig& config = {},
                                      TransientStats* stats = nullptr, StructureProbe* probe = nullptr);

/// Single-threaded brute-force version of render_transient_image for testing.
TransientImage render_transient_image_reference(const Scene& scene, const LidarConfig& lidar,
                                                const CameraModel& pose, std::uint64_t seed,
                                                const TransientConfig& config = {});

/// Accumulates term gradients from d(loss)/d(histogram counts).
void render_transient_backward(const Scene& scene, const LidarConfig& lidar, const CameraModel& pose,
                               std::uint64_t seed, const TransientConfig& config, const TransientImage& upstream,
                               std::span<SurfelTermGrad> grads);

struct NormalizedHistogram {
    std::vector<double> p;
    double sum = 0.0;  // raw mass before the floor
    bool empty = false;
};

inline constexpr double kHistogramFloor = 1e-8;

/// Adds the floor to every bin and divides by the total.
NormalizedHistogram normalize_histogram(std::span<const double> h, double floor = kHistogramFloor);

}  // namespace surfelfuse
