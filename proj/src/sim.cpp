#include "surfelfuse/sim.hpp"

#include "surfelfuse/gradient.hpp"
#include "surfelfuse/transient.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace surfelfuse {

Vec3 Texture::eval(const Vec3& p) const {
    if (kind == Kind::Constant) return c1;
    // Half-period offset keeps cell boundaries off the coordinate planes.
    const auto cell = [&](double v) { return static_cast<long long>(std::floor(v / period + 0.5)); };
    const long long parity = cell(p.x()) + cell(p.y()) + cell(p.z());
    return (parity & 1) ? c2 : c1;
}

namespace {

std::optional<double> intersect(const Sphere& s, const Vec3& o, const Vec3& d, double t_min, Vec3& n) {
    const Vec3 oc = o - s.center;
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - s.radius * s.radius;
    const double disc = b * b - c;
    if (disc < 0.0) return std::nullopt;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (!(t > t_min)) t = -b + sq;
    if (!(t > t_min)) return std::nullopt;
    n = (o + t * d - s.center) / s.radius;
    return t;
}

std::optional<double> intersect(const Plane& p, const Vec3& o, const Vec3& d, double t_min, Vec3& n) {
    const double den = p.normal.dot(d);
    if (std::abs(den) < 1e-12) return std::nullopt;
    const double t = p.normal.dot(p.point - o) / den;
    if (!(t > t_min)) return std::nullopt;
    const Vec3 rel = o + t * d - p.point;
    const Vec3 v_axis = p.normal.cross(p.u_axis);
    if (std::abs(rel.dot(p.u_axis)) > p.half_extent.x() || std::abs(rel.dot(v_axis)) > p.half_extent.y())
        return std::nullopt;
    n = p.normal;
    return t;
}

std::optional<double> intersect(const Box3& b, const Vec3& o, const Vec3& d, double t_min, Vec3& n) {
    double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
    int axis0 = -1, axis1 = -1;
    for (int a = 0; a < 3; ++a) {
        if (std::abs(d[a]) < 1e-15) {
            if (o[a] < b.min[a] || o[a] > b.max[a]) return std::nullopt;
            continue;
        }
        double ta = (b.min[a] - o[a]) / d[a], tb = (b.max[a] - o[a]) / d[a];
        if (ta > tb) std::swap(ta, tb);
        if (ta > t0) {
            t0 = ta;
            axis0 = a;
        }
        if (tb < t1) {
            t1 = tb;
            axis1 = a;
        }
    }
    if (t0 > t1) return std::nullopt;
    double t = t0;
    int axis = axis0;
    if (!(t > t_min)) {
        t = t1;
        axis = axis1;
    }
    if (!(t > t_min) || axis < 0) return std::nullopt;
    n = Vec3::Zero();
    n[axis] = 1.0;
    return t;
}

}  // namespace

std::optional<Hit> trace_ray(const AnalyticScene& scene, const Vec3& origin, const Vec3& dir, double t_min) {
    std::optional<Hit> best;
    for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
        const auto& prim = scene.primitives[i];
        Vec3 n;
        const auto t = std::visit([&](const auto& s) { return intersect(s, origin, dir, t_min, n); }, prim.shape);
        if (!t || (best && *t >= best->t)) continue;
        Hit h;
        h.t = *t;
        h.point = origin + *t * dir;
        h.normal = n.dot(dir) > 0.0 ? Vec3(-n) : n;
        h.albedo = prim.texture.eval(h.point);
        h.primitive = static_cast<int>(i);
        best = h;
    }
    return best;
}

TextureVariant parse_texture_variant(const std::string& name) {
    if (name == "full") return TextureVariant::Full;
    if (name == "object-only") return TextureVariant::ObjectOnly;
    if (name == "plane-only") return TextureVariant::PlaneOnly;
    if (name == "none") return TextureVariant::None;
    throw InvalidParameter("unknown texture variant '" + name + "'");
}

std::string to_string(TextureVariant v) {
    switch (v) {
    case TextureVariant::Full: return "full";
    case TextureVariant::ObjectOnly: return "object-only";
    case TextureVariant::PlaneOnly: return "plane-only";
    case TextureVariant::None: return "none";
    }
    return "?";
}

AnalyticScene make_scene(const std::string& id, TextureVariant variant, double albedo_scale) {
    const bool plane_tex = variant == TextureVariant::Full || variant == TextureVariant::PlaneOnly;
    const bool object_tex = variant == TextureVariant::Full || variant == TextureVariant::ObjectOnly;
    const double k = albedo_scale;
    const Texture plane_texture = plane_tex ? Texture::checker(k * Vec3(0.8, 0.75, 0.6), k * Vec3(0.25, 0.3, 0.35), 0.06)
                                            : Texture::constant(k * Vec3(0.6, 0.6, 0.6));
    const Texture object_texture = object_tex
                                       ? Texture::checker(k * Vec3(0.9, 0.35, 0.25), k * Vec3(0.25, 0.35, 0.85), 0.05)
                                       : Texture::constant(k * Vec3(0.75, 0.55, 0.45));

    AnalyticScene scene;
    scene.id = id;
    Plane ground;
    ground.half_extent = Vec2(0.6, 0.6);
    scene.primitives.push_back({ground, plane_texture});
    if (id == "sphere-on-plane") {
        scene.primitives.push_back({Sphere{Vec3(0.0, 0.0, 0.15), 0.15}, object_texture});
    } else if (id == "box-on-plane") {
        scene.primitives.push_back({Box3{Vec3(-0.1, -0.1, 0.0), Vec3(0.1, 0.1, 0.2)}, object_texture});
    } else if (id == "two-spheres") {
        scene.primitives.push_back({Sphere{Vec3(-0.1, 0.0, 0.1), 0.1}, object_texture});
        scene.primitives.push_back({Sphere{Vec3(0.12, 0.02, 0.12), 0.12}, object_texture});
    } else {
        throw InvalidParameter("unknown scene id '" + id + "'");
    }
    return scene;
}

std::vector<Vec2> zone_center_points(const LidarConfig& lidar, const CameraModel& camera) {
    std::vector<Vec2> pts;
    const double zw = static_cast<double>(camera.width) / lidar.nx;
    const double zh = static_cast<double>(camera.height) / lidar.ny;
    for (int iy = 0; iy < lidar.ny; ++iy)
        for (int ix = 0; ix < lidar.nx; ++ix) pts.emplace_back((ix + 0.5) * zw, (iy + 0.5) * zh);
    return pts;
}

TransientImage simulate_transient(const AnalyticScene& scene, const LidarConfig& lidar, const CameraModel& camera,
                                  int rays_per_cone, std::uint64_t seed, bool poisson, double photons_per_zone) {
    lidar.validate();
    TransientImage out(lidar.nx, lidar.ny, lidar.n_bins, lidar.bin_width_s);
    const int zones = lidar.nx * lidar.ny;
#pragma omp parallel for schedule(dynamic, 1)
    for (int z = 0; z < zones; ++z) {
        const ZoneIndex zone{z % lidar.nx, z / lidar.nx};
        const Cone cone = pixel_cone(lidar, camera, zone);
        const auto rays = sample_cone(cone, rays_per_cone, zone_seed(seed, zone, lidar.nx));
        auto hist = out.histogram(zone.ix, zone.iy);
        for (std::size_t r = 0; r < rays.weights.size(); ++r) {
            const auto hit = trace_ray(scene, rays.origins[r], rays.directions[r]);
            if (!hit) continue;
            const BinAssignment bin = bin_index(hit->t, lidar.bin_width_s, lidar.n_bins);
            if (bin.out_of_range) continue;
            hist[bin.lower_bin] += rays.weights[r] * bin.w1;
            if (bin.lower_bin + 1 < lidar.n_bins) hist[bin.lower_bin + 1] += rays.weights[r] * bin.w2;
        }
        if (poisson) {
            std::mt19937_64 rng(StructureProbe::combine(zone_seed(seed, zone, lidar.nx), 0x9015));
            for (double& v : hist) v = static_cast<double>(std::poisson_distribution<long long>(v * photons_per_zone)(rng));
        }
    }
    return out;
}

GtView render_gt_view(const AnalyticScene& scene, const CameraModel& camera, const LidarConfig& lidar,
                      std::uint64_t seed, int rays_per_cone, const ShadingConfig& shading) {
    camera.validate();
    GtView v;
    v.camera = camera;
    v.rgb = Image(camera.width, camera.height, 3);
    v.depth = Image(camera.width, camera.height, 1);
    v.normal = Image(camera.width, camera.height, 3);
    const Vec3 origin = camera.center();
    const Vec3 forward = camera.rotation.row(2).transpose();

#pragma omp parallel for schedule(dynamic, 4)
    for (int y = 0; y < camera.height; ++y)
        for (int x = 0; x < camera.width; ++x) {
            const Vec3 dir = camera.world_ray(x + 0.5, y + 0.5);
            const auto hit = trace_ray(scene, origin, dir);
            if (!hit) {
                for (int c = 0; c < 3; ++c) v.rgb.at(x, y, c) = shading.background[c];
                continue;
            }
            const double lambert = std::max(0.0, -hit->normal.dot(dir));
            const Vec3 color = hit->albedo * (shading.ambient + (1.0 - shading.ambient) * lambert);
            const Vec3 n_cam = camera.rotation * hit->normal;
            for (int c = 0; c < 3; ++c) {
                v.rgb.at(x, y, c) = std::clamp(color[c], 0.0, 1.0);
                v.normal.at(x, y, c) = n_cam[c];
            }
            v.depth.at(x, y) = hit->t * dir.dot(forward);
        }

    v.transient = simulate_transient(scene, lidar, camera, rays_per_cone, seed);
    for (const Vec2& p : zone_center_points(lidar, camera)) {
        const Vec3 dir = camera.world_ray(p.x(), p.y());
        const auto hit = trace_ray(scene, origin, dir);
        v.sparse_depth.push_back(hit ? hit->t * dir.dot(forward) : 0.0);
    }
    return v;
}

Image add_gaussian_noise(const Image& image, double snr_db, std::uint64_t seed) {
    if (std::isnan(snr_db)) throw InvalidParameter("add_gaussian_noise: snr_db is NaN");
    if (snr_db == std::numeric_limits<double>::infinity()) return image;
    double sum = 0.0, sum2 = 0.0;
    for (double v : image.data) {
        sum += v;
        sum2 += v * v;
    }
    const double n = static_cast<double>(image.data.size());
    const double mean = n > 0 ? sum / n : 0.0;
    const double rms = n > 0 ? std::sqrt(sum2 / n) : 0.0;
    std::mt19937_64 rng(StructureProbe::mix(seed));
    std::normal_distribution<double> gauss(0.0, 1.0);
    Image out = image;
    if (snr_db == -std::numeric_limits<double>::infinity()) {
        for (double& v : out.data) v = std::clamp(mean + rms * gauss(rng), 0.0, 1.0);
        return out;
    }
    const double sigma = rms / std::pow(10.0, snr_db / 20.0);
    for (double& v : out.data) v = std::clamp(v + sigma * gauss(rng), 0.0, 1.0);
    return out;
}

std::vector<const DatasetView*> DatasetBundle::train_views() const {
    std::vector<const DatasetView*> out;
    for (const auto& v : views)
        if (v.train) out.push_back(&v);
    return out;
}

std::vector<const DatasetView*> DatasetBundle::test_views() const {
    std::vector<const DatasetView*> out;
    for (const auto& v : views)
        if (!v.train) out.push_back(&v);
    return out;
}

namespace {

bool is_test_slot(int k, int total, int n_test) {
    return static_cast<long long>(k + 1) * n_test / total > static_cast<long long>(k) * n_test / total;
}

}  // namespace

std::vector<CameraModel> protocol_cameras(const ProtocolConfig& cfg) {
    const int total = cfg.n_train + cfg.n_test;
    if (cfg.n_train < 0 || cfg.n_test < 0 || total < 1) throw InvalidParameter("protocol needs at least one view");
    const CameraModel intr = make_rig_camera(cfg.lidar, cfg.width, cfg.height);
    std::mt19937_64 rng(StructureProbe::mix(cfg.seed));
    const double step = 2.0 * std::numbers::pi / total;
    const double phase = std::uniform_real_distribution<double>(0.0, step)(rng);
    std::vector<CameraModel> cams;
    for (int k = 0; k < total; ++k) {
        const double az = phase + k * step;
        const double el = (cfg.elevation_deg + 8.0 * std::cos(3.0 * az)) * std::numbers::pi / 180.0;
        const Vec3 eye = cfg.orbit_radius * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
        cams.push_back(look_at(eye, Vec3(0.0, 0.0, 0.08), Vec3::UnitZ(), intr));
    }
    return cams;
}

DatasetBundle make_protocol_dataset(const ProtocolConfig& cfg) {
    if (cfg.width % cfg.lidar.nx != 0 || cfg.height % cfg.lidar.ny != 0)
        throw InvalidParameter("image size must be a multiple of the LiDAR grid");
    const AnalyticScene scene = make_scene(cfg.scene, cfg.variant, cfg.albedo_scale);
    const auto cams = protocol_cameras(cfg);
    const int total = static_cast<int>(cams.size());
    DatasetBundle bundle;
    bundle.config = cfg;
    bundle.views.resize(total);
    for (int k = 0; k < total; ++k) {
        DatasetView& v = bundle.views[k];
        v.train = !is_test_slot(k, total, cfg.n_test);
        v.gt = render_gt_view(scene, cams[k], cfg.lidar, StructureProbe::combine(cfg.seed, 0x7000 + k),
                              cfg.gt_rays_per_cone);
        if (cfg.poisson)
            v.gt.transient = simulate_transient(scene, cfg.lidar, cams[k], cfg.gt_rays_per_cone,
                                                StructureProbe::combine(cfg.seed, 0x7000 + k), true);
        v.rgb = v.train ? add_gaussian_noise(v.gt.rgb, cfg.snr_db, StructureProbe::combine(cfg.seed, 0x8000 + k))
                        : v.gt.rgb;
    }
    return bundle;
}

std::pair<Vec3, Vec3> scene_bounds(const AnalyticScene& scene) {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    auto grow = [&](const Vec3& p) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    };
    for (const auto& prim : scene.primitives) {
        if (const auto* s = std::get_if<Sphere>(&prim.shape)) {
            grow(s->center - Vec3::Constant(s->radius));
            grow(s->center + Vec3::Constant(s->radius));
        } else if (const auto* b = std::get_if<Box3>(&prim.shape)) {
            grow(b->min);
            grow(b->max);
        } else if (const auto* p = std::get_if<Plane>(&prim.shape)) {
            if (!std::isfinite(p->half_extent.x()) || !std::isfinite(p->half_extent.y())) continue;
            const Vec3 v_axis = p->normal.cross(p->u_axis);
            for (int a = -1; a <= 1; a += 2)
                for (int b2 = -1; b2 <= 1; b2 += 2)
                    grow(p->point + a * p->half_extent.x() * p->u_axis + b2 * p->half_extent.y() * v_axis);
        }
    }
    return {lo, hi};
}

}  // namespace surfelfuse
