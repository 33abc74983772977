#pragma once

// Per-camera surfel preprocessing shared by the image and transient kernels.

#include "surfelfuse/raster.hpp"

#include <vector>

namespace surfelfuse::detail {

struct Box {
    double x0 = 0.0, y0 = 0.0, x1 = -1.0, y1 = -1.0;
    bool overlaps(double ax0, double ay0, double ax1, double ay1) const {
        return x0 <= ax1 && ax0 <= x1 && y0 <= ay1 && ay0 <= y1;
    }
    bool contains(double u, double v) const { return u >= x0 && u <= x1 && v >= y0 && v <= y1; }
};

struct Splat {
    bool visible = false;
    // image-space
    Vec2 mean = Vec2::Zero();
    double conic[3] = {0.0, 0.0, 0.0};
    Vec3 center = Vec3::Zero();
    Vec3 normal = Vec3::UnitZ();
    Vec3 color = Vec3::Zero();
    double opacity = 0.0;
    Box splat_box;
    // world-space
    Vec3 position = Vec3::Zero();
    Vec3 tangent_u = Vec3::UnitX();
    Vec3 tangent_v = Vec3::UnitY();
    Vec3 world_normal = Vec3::UnitZ();
    double scale_u = 0.0;
    double scale_v = 0.0;
    Box ray_box;
};

struct PreparedView {
    CameraModel camera;
    RasterConfig config;
    std::vector<Splat> splats;
};

PreparedView prepare_view(const Scene& scene, const CameraModel& camera, const RasterConfig& config);

/// CSR lists of surfel indices (ascending) per tile.
struct TileBins {
    int tile_size = 16;
    int tiles_x = 0;
    int tiles_y = 0;
    std::vector<int> offsets;
    std::vector<int> items;

    std::span<const int> tile(int tx, int ty) const {
        const int t = ty * tiles_x + tx;
        return {items.data() + offsets[t], static_cast<std::size_t>(offsets[t + 1] - offsets[t])};
    }
};

TileBins bin_splats(const PreparedView& view, int tile_size);

/// Fragment plus the intermediates the backward pass needs.
struct PixelFragment {
    double alpha = 0.0;
    double gauss = 0.0;
    double depth = 0.0;
    bool fallback = false;
    int index = 0;
};

/// Evaluates the candidates at (u, v), returns fragments sorted by (depth, index).
void gather_fragments(const PreparedView& view, double u, double v, std::span<const int> candidates,
                      std::vector<PixelFragment>& out);

PixelSample blend(const PreparedView& view, std::span<const PixelFragment> frags);

/// Adds the gradient of one pixel's outputs into per-surfel term gradients.
void blend_backward(const PreparedView& view, double u, double v, std::span<const PixelFragment> frags,
                    const PixelSample& forward, const Vec3& g_color, double g_depth, const Vec3& g_normal,
                    double g_alpha, std::span<SurfelTermGrad> grads);

std::uint64_t fragment_signature(std::span<const PixelFragment> frags, int used, bool covered);

}  // namespace surfelfuse::detail
