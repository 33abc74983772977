// Tiled/parallel kernels against their single-threaded reference versions.

#include "surfelfuse/raster.hpp"
#include "surfelfuse/sim.hpp"
#include "surfelfuse/transient.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace surfelfuse;

namespace {

Scene bench_scene(int n) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Scene s;
    for (int i = 0; i < n; ++i) {
        Surfel x;
        x.position = Vec3(0.4 * u(rng), 0.4 * u(rng), 0.1 + 0.1 * u(rng));
        x.rotation = Vec4(u(rng), u(rng), u(rng), u(rng)).normalized();
        x.scale = Vec2(0.02, 0.02) * (1.5 + u(rng));
        x.opacity = 0.6;
        x.color_coeffs = {u(rng), u(rng), u(rng)};
        s.surfels.push_back(x);
    }
    return s;
}

CameraModel bench_camera(const LidarConfig& lidar, int size) {
    ProtocolConfig p;
    p.width = p.height = size;
    p.lidar = lidar;
    p.n_test = 0;
    return protocol_cameras(p).front();
}

void BM_RenderImage(benchmark::State& state) {
    const Scene scene = bench_scene(static_cast<int>(state.range(0)));
    const CameraModel cam = bench_camera(LidarConfig{}, 128);
    for (auto _ : state) benchmark::DoNotOptimize(render_image(scene, cam));
}

void BM_RenderImageReference(benchmark::State& state) {
    const Scene scene = bench_scene(static_cast<int>(state.range(0)));
    const CameraModel cam = bench_camera(LidarConfig{}, 128);
    for (auto _ : state) benchmark::DoNotOptimize(render_image_reference(scene, cam));
}

void BM_RenderTransient(benchmark::State& state) {
    const Scene scene = bench_scene(static_cast<int>(state.range(0)));
    const LidarConfig lidar;
    const CameraModel cam = bench_camera(lidar, 128);
    for (auto _ : state) benchmark::DoNotOptimize(render_transient_image(scene, lidar, cam, 3));
}

void BM_RenderTransientReference(benchmark::State& state) {
    const Scene scene = bench_scene(static_cast<int>(state.range(0)));
    const LidarConfig lidar;
    const CameraModel cam = bench_camera(lidar, 128);
    for (auto _ : state) benchmark::DoNotOptimize(render_transient_image_reference(scene, lidar, cam, 3));
}

}  // namespace

BENCHMARK(BM_RenderImage)->Arg(500)->Arg(3000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RenderImageReference)->Arg(500)->Arg(3000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RenderTransient)->Arg(500)->Arg(3000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RenderTransientReference)->Arg(500)->Arg(3000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
