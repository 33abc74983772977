#pragma once

// Surfel projection and per-pixel alpha compositing of color, depth and normals.
//
// Two kernels produce identical buffers: `render_image` bins surfels into
// screen tiles and runs rows in parallel, `render_image_reference` loops over
// every surfel for every pixel on one thread and exists for testing.

#include "surfelfuse/core.hpp"
#include "surfelfuse/gradient.hpp"

#include <optional>
#include <span>
#include <vector>

namespace surfelfuse {

struct RasterConfig {
    double cov_epsilon = 0.3;  // px^2 added to the projected covariance diagonal
    double cutoff_sigma = 3.0;
    double near_plane = 0.01;
    double min_transmittance = 1e-4;
    double coverage_epsilon = 1e-3;
    double parallel_epsilon = 1e-4;
    Vec3 background = Vec3::Zero();
    int tile_size = 16;
};

struct ProjectedSurfel {
    Vec2 mean_2d = Vec2::Zero();
    Mat2 cov_2d = Mat2::Zero();  // without the epsilon regularizer
    Mat2 conic = Mat2::Zero();   // inverse of the regularized covariance
    double cam_depth = 0.0;
    Vec3 plane_point = Vec3::Zero();   // camera space
    Vec3 plane_normal = Vec3::UnitZ(); // camera space, facing the camera
    Mat3 camera_rotation = Mat3::Identity();  // W R
    Vec3 color = Vec3::Zero();
    double opacity = 0.0;
    int source = -1;
};

std::optional<ProjectedSurfel> project_surfel(const Surfel& surfel, int sh_degree, const CameraModel& camera,
                                              const RasterConfig& config = {});

/// Opacity-scaled footprint at pixel position `u`; zero beyond the cutoff ellipse.
double alpha_at(const Vec2& u, const ProjectedSurfel& proj, double opacity, const RasterConfig& config = {});

struct RayDepth {
    double depth = 0.0;
    bool fallback = false;  // ray nearly parallel to the plane; center depth returned
};

/// Camera z of the intersection between the pixel ray through `u` and the surfel plane.
RayDepth ray_surfel_depth(const Vec2& u, const ProjectedSurfel& proj, const CameraModel& camera,
                          const RasterConfig& config = {});
RayDepth ray_surfel_depth(const Vec2& u, const Surfel& surfel, const CameraModel& camera,
                          const RasterConfig& config = {});

/// First-order expansion of the intersection depth around the projected center.
double linearized_surfel_depth(const Vec2& u, const ProjectedSurfel& proj, const CameraModel& camera);

struct Fragment {
    double alpha = 0.0;
    double depth = 0.0;
    Vec3 color = Vec3::Zero();
    Vec3 normal = Vec3::Zero();
    int index = 0;
};

struct PixelSample {
    Vec3 color = Vec3::Zero();
    double depth = 0.0;
    Vec3 normal = Vec3::Zero();
    double alpha_acc = 0.0;
    int used = 0;  // fragments blended before termination
};

/// Front-to-back blend of fragments already sorted by depth.
PixelSample composite_fragments(std::span<const Fragment> sorted, const RasterConfig& config = {});

/// Gathers, sorts and blends every projected surfel covering `u`.
PixelSample composite_pixel(const Vec2& u, std::span<const ProjectedSurfel> surfels, const CameraModel& camera,
                            const RasterConfig& config = {});

struct RenderBuffers {
    Image color;   // 3 channels
    Image depth;   // meters, camera z; 0 where uncovered
    Image normal;  // 3 channels, camera space
    Image alpha;   // accumulated opacity

    RenderBuffers() = default;
    RenderBuffers(int w, int h) : color(w, h, 3), depth(w, h, 1), normal(w, h, 3), alpha(w, h, 1) {}
    bool covered(int x, int y, double eps) const { return alpha.at(x, y) >= eps; }
};

RenderBuffers render_image(const Scene& scene, const CameraModel& camera, const RasterConfig& config = {},
                           StructureProbe* probe = nullptr);
RenderBuffers render_image_reference(const Scene& scene, const CameraModel& camera,
                                     const RasterConfig& config = {});

/// Renders single rays through arbitrary (sub-pixel) image positions.
std::vector<PixelSample> render_points(const Scene& scene, const CameraModel& camera, std::span<const Vec2> points,
                                       const RasterConfig& config = {}, StructureProbe* probe = nullptr);

/// Accumulates d(loss)/d(surfel terms) given d(loss)/d(buffers). `upstream`
/// has the same layout as the forward buffers.
void render_image_backward(const Scene& scene, const CameraModel& camera, const RasterConfig& config,
                           const RenderBuffers& upstream, std::span<SurfelTermGrad> grads);

/// Backward of render_points for per-point depth gradients.
void render_points_backward(const Scene& scene, const CameraModel& camera, std::span<const Vec2> points,
                            std::span<const double> depth_grads, const RasterConfig& config,
                            std::span<SurfelTermGrad> grads);

}  // namespace surfelfuse
