#include "surfelfuse/transient.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace surfelfuse;

namespace {

// One surfel on the plane z = depth in front of a camera at the origin looking down +z.
Scene wall(double depth, double scale, double opacity) {
    Scene s;
    Surfel w;
    w.position = Vec3(0, 0, depth);
    w.scale = Vec2(scale, scale);
    w.opacity = opacity;
    s.surfels.push_back(w);
    return s;
}

CameraModel origin_camera(const LidarConfig& l) { return make_rig_camera(l, 8 * l.nx, 8 * l.ny); }

}  // namespace

TEST(BinIndex, WeightsSumToOneExactly) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const BinAssignment b = bin_index(u(rng), 40e-12, 1000);
        EXPECT_EQ(b.w1 + b.w2, 1.0);
        EXPECT_GE(b.w2, 0.0);
        EXPECT_LT(b.w2, 1.0);
    }
}

TEST(BinIndex, ClosedForm) {
    const double bw = 40e-12;
    const double bin_m = 0.5 * kSpeedOfLight * bw;  // 6 mm
    const BinAssignment mid = bin_index(7.25 * bin_m, bw, 100);
    EXPECT_EQ(mid.lower_bin, 7);
    EXPECT_NEAR(mid.w2, 0.25, 1e-9);
    const BinAssignment zero = bin_index(0.0, bw, 100);
    EXPECT_EQ(zero.lower_bin, 0);
    EXPECT_EQ(zero.w1, 1.0);
    EXPECT_TRUE(bin_index(100.5 * bin_m, bw, 100).out_of_range);
    EXPECT_FALSE(bin_index(99.5 * bin_m, bw, 100).out_of_range);
    EXPECT_THROW(bin_index(-1e-3, bw, 100), InvalidParameter);
}

TEST(BinIndex, ExpectedBinIsContinuous) {
    // Soft binning makes the mean bin a linear function of distance.
    const double bw = 40e-12;
    for (double d = 0.01; d < 0.5; d += 0.0137) {
        const BinAssignment b = bin_index(d, bw, 1000);
        EXPECT_NEAR(b.lower_bin + b.w2, 2.0 * d / (kSpeedOfLight * bw), 1e-9);
    }
}

TEST(SampleCone, WeightsAndDirections) {
    const LidarConfig l;
    const CameraModel cam = look_at(Vec3(0.2, -0.6, 0.4), Vec3::Zero(), Vec3::UnitZ(), origin_camera(l));
    const Cone cone = pixel_cone(l, cam, {2, 5});
    for (int n : {1, 7, 16, 256}) {
        const ConeSampleSet s = sample_cone(cone, n, 99);
        ASSERT_EQ(static_cast<int>(s.weights.size()), n);
        EXPECT_NEAR(std::accumulate(s.weights.begin(), s.weights.end(), 0.0), 1.0, 1e-14);
        for (int k = 0; k < n; ++k) {
            EXPECT_GE(s.image_points[k].x(), cone.tan_min.x());
            EXPECT_LE(s.image_points[k].x(), cone.tan_max.x());
            EXPECT_GE(s.image_points[k].y(), cone.tan_min.y());
            EXPECT_LE(s.image_points[k].y(), cone.tan_max.y());
            const Vec3 cam_dir = cam.rotation * s.directions[k];
            EXPECT_NEAR(cam_dir.x() / cam_dir.z(), s.image_points[k].x(), 1e-12);
            EXPECT_NEAR(s.directions[k].norm(), 1.0, 1e-14);
        }
    }
    const ConeSampleSet one = sample_cone(cone, 1, 5);
    EXPECT_TRUE(one.directions[0].isApprox(cone.axis, 1e-12));
    EXPECT_THROW(sample_cone(cone, 0, 1), InvalidParameter);
}

TEST(SampleCone, SeedDeterminism) {
    const LidarConfig l;
    const Cone cone = pixel_cone(l, origin_camera(l), {0, 0});
    EXPECT_EQ(sample_cone(cone, 16, 3).image_points, sample_cone(cone, 16, 3).image_points);
    EXPECT_NE(sample_cone(cone, 16, 3).image_points, sample_cone(cone, 16, 4).image_points);
    EXPECT_NE(zone_seed(1, {0, 1}, 8), zone_seed(1, {1, 0}, 8));
}

TEST(RenderTransient, WallMatchesPerRayOracle) {
    LidarConfig l;
    l.rays_per_cone = 32;
    const CameraModel cam = origin_camera(l);
    const double depth = 0.8, scale = 0.5, opacity = 0.9;
    const Scene scene = wall(depth, scale, opacity);
    for (ZoneIndex z : {ZoneIndex{0, 0}, ZoneIndex{3, 4}, ZoneIndex{7, 2}}) {
        const auto hist = render_transient(scene, l, cam, z, 17);
        const ConeSampleSet rays = sample_cone(pixel_cone(l, cam, z), l.rays_per_cone, zone_seed(17, z, l.nx));
        std::vector<double> expect(l.n_bins, 0.0);
        for (std::size_t r = 0; r < rays.weights.size(); ++r) {
            const Vec3 d = rays.directions[r];
            const double t = depth / d.z();
            const Vec3 hit = t * d;
            const double alpha = opacity * std::exp(-0.5 * (hit.x() * hit.x() + hit.y() * hit.y()) / (scale * scale));
            const double tau = t / l.bin_width_m();
            const int lo = static_cast<int>(std::floor(tau));
            expect[lo] += rays.weights[r] * alpha * (lo + 1 - tau);
            expect[lo + 1] += rays.weights[r] * alpha * (tau - lo);
        }
        for (int k = 0; k < l.n_bins; ++k) ASSERT_NEAR(hist[k], expect[k], 1e-12) << "bin " << k;
    }
}

TEST(RenderTransient, OccludedWallDepositsTransmittance) {
    LidarConfig l;
    l.rays_per_cone = 1;
    const CameraModel cam = origin_camera(l);
    Scene scene = wall(0.5, 10.0, 0.6);
    scene.surfels.push_back(wall(1.0, 10.0, 0.5).surfels[0]);
    const auto hist = render_transient(scene, l, cam, {3, 3}, 1);
    const auto only_front = render_transient(wall(0.5, 10.0, 0.6), l, cam, {3, 3}, 1);
    const double front = std::accumulate(only_front.begin(), only_front.end(), 0.0);
    const double total = std::accumulate(hist.begin(), hist.end(), 0.0);
    // Gaussian falloff at 10 m scale is below 1e-4 for a central zone.
    EXPECT_NEAR(front, 0.6, 1e-4);
    EXPECT_NEAR(total - front, 0.4 * 0.5, 1e-4);

    TransientConfig raw;
    raw.deposit = DepositWeight::Opacity;
    const auto opaque = render_transient(scene, l, cam, {3, 3}, 1, raw);
    EXPECT_NEAR(std::accumulate(opaque.begin(), opaque.end(), 0.0), 1.1, 1e-4);
}

TEST(RenderTransient, MassAccounting) {
    std::mt19937_64 rng(2);
    const LidarConfig l = fixtures::small_lidar();
    const CameraModel cam = fixtures::small_camera(l);
    for (int trial = 0; trial < 20; ++trial) {
        const Scene scene = fixtures::random_scene(rng, 15);
        TransientStats stats;
        const auto img = render_transient_image(scene, l, cam, 5, {}, &stats);
        const double sum = std::accumulate(img.counts.begin(), img.counts.end(), 0.0);
        EXPECT_NEAR(sum, stats.deposited, 1e-12);
        // Each zone deposits at most its unit ray weight.
        EXPECT_LE(stats.deposited + stats.dropped, l.nx * l.ny + 1e-12);
        for (double c : img.counts) EXPECT_GE(c, 0.0);
    }
}

TEST(RenderTransient, BeyondRangeIsDropped) {
    LidarConfig l = fixtures::small_lidar();
    const CameraModel cam = make_rig_camera(l, 32, 32);
    TransientStats stats;
    const auto img = render_transient_image(wall(5.0, 10.0, 0.9), l, cam, 1, {}, &stats);
    EXPECT_EQ(std::accumulate(img.counts.begin(), img.counts.end(), 0.0), 0.0);
    EXPECT_GT(stats.dropped, 0.0);
    EXPECT_GT(stats.dropped_count, 0);
}

TEST(RenderTransient, ParallelMatchesReference) {
    std::mt19937_64 rng(3);
    const LidarConfig l = fixtures::small_lidar();
    const CameraModel cam = fixtures::small_camera(l);
    const int saved = omp_get_max_threads();
    for (int trial = 0; trial < 5; ++trial) {
        const Scene scene = fixtures::random_scene(rng, 25);
        const auto ref = render_transient_image_reference(scene, l, cam, 11);
        omp_set_num_threads(1);
        const auto serial = render_transient_image(scene, l, cam, 11);
        omp_set_num_threads(4);
        const auto parallel = render_transient_image(scene, l, cam, 11);
        EXPECT_EQ(ref.counts, serial.counts);
        EXPECT_EQ(ref.counts, parallel.counts);
    }
    omp_set_num_threads(saved);
}

TEST(RenderTransient, SurfelOrderDoesNotMatter) {
    std::mt19937_64 rng(4);
    const LidarConfig l = fixtures::small_lidar();
    const CameraModel cam = fixtures::small_camera(l);
    for (int trial = 0; trial < 10; ++trial) {
        const Scene scene = fixtures::random_scene(rng, 8);
        Scene shuffled = scene;
        std::shuffle(shuffled.surfels.begin(), shuffled.surfels.end(), rng);
        const auto a = render_transient_image(scene, l, cam, 3);
        const auto b = render_transient_image(shuffled, l, cam, 3);
        for (std::size_t k = 0; k < a.counts.size(); ++k) ASSERT_NEAR(a.counts[k], b.counts[k], 1e-14);
    }
}

TEST(NormalizeHistogram, FloorAndSum) {
    const std::vector<double> h{0.0, 2.0, 0.0, 6.0};
    const auto n = normalize_histogram(h);
    EXPECT_DOUBLE_EQ(n.sum, 8.0);
    EXPECT_FALSE(n.empty);
    EXPECT_NEAR(std::accumulate(n.p.begin(), n.p.end(), 0.0), 1.0, 1e-15);
    EXPECT_NEAR(n.p[0], kHistogramFloor / (8.0 + 4 * kHistogramFloor), 1e-20);
    EXPECT_NEAR(n.p[3] / n.p[1], (6.0 + kHistogramFloor) / (2.0 + kHistogramFloor), 1e-12);

    const auto e = normalize_histogram(std::vector<double>(5, 0.0));
    EXPECT_TRUE(e.empty);
    for (double p : e.p) EXPECT_DOUBLE_EQ(p, 0.2);
}
