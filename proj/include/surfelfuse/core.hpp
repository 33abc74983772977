#pragma once

// Scene primitives, camera and diffuse-LiDAR geometry shared by every module.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace surfelfuse {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kSpeedOfLight = 299792458.0;

class InvalidParameter : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Number of spherical-harmonic coefficients (all three channels) for degree L.
constexpr int sh_coeff_count(int degree) { return 3 * (degree + 1) * (degree + 1); }

/// One flattened Gaussian. `rotation` is a (w, x, y, z) quaternion; the third
/// scale axis is fixed at zero and not stored.
struct Surfel {
    Vec3 position = Vec3::Zero();
    Vec4 rotation = Vec4(1.0, 0.0, 0.0, 0.0);
    Vec2 scale = Vec2(0.01, 0.01);
    double opacity = 0.5;
    std::vector<double> color_coeffs = std::vector<double>(3, 0.0);
};

struct Scene {
    int sh_degree = 0;
    std::vector<Surfel> surfels;

    std::size_t size() const { return surfels.size(); }
    bool empty() const { return surfels.empty(); }
};

/// Pinhole camera. `rotation`/`translation` map world to camera coordinates
/// (x right, y down, z forward). Pixel (i, j) has its center at (i + 0.5, j + 0.5).
struct CameraModel {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 1;
    int height = 1;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
    Vec3 center() const { return -rotation.transpose() * translation; }

    /// Camera-space direction through image point (u, v), scaled so z = 1.
    Vec3 pixel_ray(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }

    /// Unit world-space direction through image point (u, v).
    Vec3 world_ray(double u, double v) const {
        return (rotation.transpose() * pixel_ray(u, v)).normalized();
    }

    /// Throws InvalidParameter when the pose or intrinsics are unusable.
    void validate() const;
};

/// World-to-camera rotation and translation for an eye looking at `target`.
CameraModel look_at(const Vec3& eye, const Vec3& target, const Vec3& up, CameraModel intrinsics);

struct LidarConfig {
    int nx = 8;
    int ny = 8;
    double ifov_deg = 4.9;
    double bin_width_s = 40e-12;
    int n_bins = 256;
    double max_range_m = 1.5;
    int rays_per_cone = 64;

    double bin_width_m() const { return 0.5 * kSpeedOfLight * bin_width_s; }
    double fov_x_rad() const;
    double fov_y_rad() const;
    void validate() const;
};

/// Camera whose frustum is tiled exactly by the LiDAR zones.
CameraModel make_rig_camera(const LidarConfig& lidar, int width, int height);

struct ZoneIndex {
    int ix = 0;
    int iy = 0;
};

/// A zone's viewing cone. `tan_min`/`tan_max` bound the zone's rectangle on
/// the z = 1 camera plane; sampling happens over that rectangle.
struct Cone {
    Vec3 apex = Vec3::Zero();
    Vec3 axis = Vec3::UnitZ();
    double half_angle = 0.0;
    Vec2 tan_min = Vec2::Zero();
    Vec2 tan_max = Vec2::Zero();
    Mat3 camera_to_world = Mat3::Identity();
};

Cone pixel_cone(const LidarConfig& lidar, const CameraModel& pose, ZoneIndex zone);

/// Solid angle subtended by the rectangle [x0,x1] x [y0,y1] on the z = 1 plane.
double rectangle_solid_angle(double x0, double x1, double y0, double y1);

/// Row-major, channel-interleaved image of doubles.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    double& at(int x, int y, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    double at(int x, int y, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

struct TransientImage {
    int nx = 0;
    int ny = 0;
    int nt = 0;
    double bin_width_s = 0.0;
    std::vector<double> counts;  // [ny][nx][nt]

    TransientImage() = default;
    TransientImage(int nx_, int ny_, int nt_, double bin_width)
        : nx(nx_), ny(ny_), nt(nt_), bin_width_s(bin_width),
          counts(static_cast<std::size_t>(nx_) * ny_ * nt_, 0.0) {}

    std::span<double> histogram(int ix, int iy) {
        return {counts.data() + (static_cast<std::size_t>(iy) * nx + ix) * nt, static_cast<std::size_t>(nt)};
    }
    std::span<const double> histogram(int ix, int iy) const {
        return {counts.data() + (static_cast<std::size_t>(iy) * nx + ix) * nt, static_cast<std::size_t>(nt)};
    }
};

Mat3 quaternion_to_rotation(const Vec4& q);

/// (RS)(RS)^T with S = diag(s1, s2, 0).
Mat3 covariance_from_params(const Vec4& rotation, const Vec2& scale);

/// Gaussian value at `x`, using the pseudo-inverse of the covariance on the
/// surfel plane. Points off the plane are projected onto it along the normal.
double evaluate_gaussian(const Vec3& x, const Surfel& surfel);

/// Real spherical-harmonic color with the +0.5 offset; not clamped.
Vec3 sh_to_color(std::span<const double> coeffs, int degree, const Vec3& view_dir);

void validate_surfel(const Surfel& s, int sh_degree);

}  // namespace surfelfuse
