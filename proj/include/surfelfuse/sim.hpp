#pragma once

// Ground-truth data factory: analytic scenes, ray-traced RGB/depth/normal
// views, Monte-Carlo transients, low-light noise and protocol datasets.

#include "surfelfuse/core.hpp"

#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace surfelfuse {

struct Texture {
    enum class Kind { Constant, Checker };
    Kind kind = Kind::Constant;
    Vec3 c1 = Vec3::Constant(0.5);
    Vec3 c2 = Vec3::Constant(0.5);
    double period = 0.1;  // meters, solid 3D checker

    static Texture constant(const Vec3& c) { return {Kind::Constant, c, c, 1.0}; }
    static Texture checker(const Vec3& a, const Vec3& b, double period) { return {Kind::Checker, a, b, period}; }
    Vec3 eval(const Vec3& p) const;
};

struct Sphere {
    Vec3 center = Vec3::Zero();
    double radius = 1.0;
};

/// Rectangle centered at `point`, spanned by `u_axis` and normal x u_axis.
struct Plane {
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::UnitZ();
    Vec3 u_axis = Vec3::UnitX();
    Vec2 half_extent = Vec2::Constant(std::numeric_limits<double>::infinity());
};

struct Box3 {
    Vec3 min = Vec3::Zero();
    Vec3 max = Vec3::Ones();
};

struct Primitive {
    std::variant<Sphere, Plane, Box3> shape;
    Texture texture;
};

struct AnalyticScene {
    std::string id;
    std::vector<Primitive> primitives;
};

struct Hit {
    double t = 0.0;  // distance along the unit ray
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::UnitZ();  // unit, facing the ray origin
    Vec3 albedo = Vec3::Zero();
    int primitive = -1;
};

/// Nearest intersection with t > t_min.
std::optional<Hit> trace_ray(const AnalyticScene& scene, const Vec3& origin, const Vec3& dir, double t_min = 1e-9);

enum class TextureVariant { Full, ObjectOnly, PlaneOnly, None };

TextureVariant parse_texture_variant(const std::string& name);
std::string to_string(TextureVariant v);

/// Desk-scale scenes: "sphere-on-plane", "box-on-plane", "two-spheres".
AnalyticScene make_scene(const std::string& id, TextureVariant variant, double albedo_scale = 1.0);

struct ShadingConfig {
    double ambient = 0.1;  // headlight Lambertian fills the rest
    Vec3 background = Vec3::Zero();
};

struct GtView {
    CameraModel camera;
    Image rgb;     // clean
    Image depth;   // camera z, 0 on miss
    Image normal;  // camera space, facing the camera
    TransientImage transient;
    std::vector<double> sparse_depth;  // camera z at the zone-center rays, row-major zones; 0 on miss
};

/// Image points (pixels) of the zone-center rays, row-major.
std::vector<Vec2> zone_center_points(const LidarConfig& lidar, const CameraModel& camera);

/// Noiseless transient of one view: unit deposits, soft binned, weighted by ray solid angle.
TransientImage simulate_transient(const AnalyticScene& scene, const LidarConfig& lidar, const CameraModel& camera,
                                  int rays_per_cone, std::uint64_t seed, bool poisson = false,
                                  double photons_per_zone = 1e4);

GtView render_gt_view(const AnalyticScene& scene, const CameraModel& camera, const LidarConfig& lidar,
                      std::uint64_t seed, int rays_per_cone = 1024, const ShadingConfig& shading = {});

/// snr_db may be +/- infinity. Noise sigma = rms(image) / 10^(snr_db / 20); result clamped to [0, 1].
Image add_gaussian_noise(const Image& image, double snr_db, std::uint64_t seed);

struct ProtocolConfig {
    std::string scene = "sphere-on-plane";
    TextureVariant variant = TextureVariant::Full;
    int n_train = 10;
    int n_test = 10;
    double snr_db = std::numeric_limits<double>::infinity();
    std::uint64_t seed = 1;
    int width = 128;
    int height = 128;
    LidarConfig lidar;
    int gt_rays_per_cone = 1024;
    double albedo_scale = 1.0;
    double orbit_radius = 0.8;
    double elevation_deg = 50.0;
    bool poisson = false;
};

struct DatasetView {
    GtView gt;
    Image rgb;  // what training sees: noisy for train views, clean for test views
    bool train = true;
};

struct DatasetBundle {
    ProtocolConfig config;
    std::vector<DatasetView> views;

    std::vector<const DatasetView*> train_views() const;
    std::vector<const DatasetView*> test_views() const;
};

/// Orbit cameras: n_train + n_test azimuths, interleaved, with a seed-dependent phase.
std::vector<CameraModel> protocol_cameras(const ProtocolConfig& config);

DatasetBundle make_protocol_dataset(const ProtocolConfig& config);

/// Axis-aligned bounds that contain every finite primitive (planes use their extent).
std::pair<Vec3, Vec3> scene_bounds(const AnalyticScene& scene);

}  // namespace surfelfuse
