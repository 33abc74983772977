#include "surfelfuse/sim.hpp"
#include "surfelfuse/transient.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

using namespace surfelfuse;

namespace {

AnalyticScene single(Primitive p) {
    AnalyticScene s;
    s.id = "test";
    s.primitives.push_back(std::move(p));
    return s;
}

}  // namespace

TEST(TraceRay, SphereClosedForm) {
    const AnalyticScene s = single({Sphere{Vec3(0, 0, 2), 0.5}, Texture::constant(Vec3(0.2, 0.4, 0.6))});
    const auto hit = trace_ray(s, Vec3::Zero(), Vec3::UnitZ());
    ASSERT_TRUE(hit);
    EXPECT_NEAR(hit->t, 1.5, 1e-12);
    EXPECT_TRUE(hit->normal.isApprox(-Vec3::UnitZ(), 1e-12));
    EXPECT_EQ(hit->albedo, Vec3(0.2, 0.4, 0.6));
    // Off-axis ray: distance to the near intersection of |o + t d - c| = r.
    const Vec3 d = Vec3(0.1, 0.05, 1.0).normalized();
    const double b = d.dot(Vec3(0, 0, 2));
    EXPECT_NEAR(trace_ray(s, Vec3::Zero(), d)->t, b - std::sqrt(b * b - 4.0 + 0.25), 1e-12);
    // From inside, the far wall is hit and the normal still faces the origin.
    const auto inside = trace_ray(s, Vec3(0, 0, 2), Vec3::UnitX());
    EXPECT_NEAR(inside->t, 0.5, 1e-12);
    EXPECT_LT(inside->normal.dot(Vec3::UnitX()), 0.0);
    EXPECT_FALSE(trace_ray(s, Vec3::Zero(), Vec3::UnitX()));
}

TEST(TraceRay, FinitePlaneAndBox) {
    Plane p;
    p.half_extent = Vec2(0.5, 0.25);
    const AnalyticScene s = single({p, Texture::constant(Vec3::Ones())});
    EXPECT_NEAR(trace_ray(s, Vec3(0.4, 0.2, 1.0), -Vec3::UnitZ())->t, 1.0, 1e-12);
    EXPECT_FALSE(trace_ray(s, Vec3(0.4, 0.3, 1.0), -Vec3::UnitZ()));
    EXPECT_TRUE(trace_ray(s, Vec3(0.4, 0.2, -1.0), Vec3::UnitZ())->normal.isApprox(-Vec3::UnitZ()));

    const AnalyticScene box = single({Box3{Vec3(-1, -1, -1), Vec3(1, 1, 1)}, Texture::constant(Vec3::Ones())});
    const auto h = trace_ray(box, Vec3(-3, 0.2, 0.1), Vec3::UnitX());
    EXPECT_NEAR(h->t, 2.0, 1e-12);
    EXPECT_TRUE(h->normal.isApprox(-Vec3::UnitX(), 1e-12));
}

TEST(TraceRay, NearestPrimitiveWins) {
    AnalyticScene s;
    s.primitives.push_back({Sphere{Vec3(0, 0, 5), 1.0}, Texture::constant(Vec3::Zero())});
    s.primitives.push_back({Sphere{Vec3(0, 0, 2), 0.5}, Texture::constant(Vec3::Ones())});
    const auto h = trace_ray(s, Vec3::Zero(), Vec3::UnitZ());
    EXPECT_EQ(h->primitive, 1);
    EXPECT_NEAR(h->t, 1.5, 1e-12);
}

TEST(Texture, CheckerParity) {
    const Texture t = Texture::checker(Vec3::Zero(), Vec3::Ones(), 0.1);
    EXPECT_EQ(t.eval(Vec3(0, 0, 0)), Vec3::Zero());
    EXPECT_EQ(t.eval(Vec3(0.1, 0, 0)), Vec3::Ones());
    EXPECT_EQ(t.eval(Vec3(0.1, 0.1, 0)), Vec3::Zero());
    EXPECT_EQ(t.eval(Vec3(0.04, -0.04, 0.04)), Vec3::Zero());
}

TEST(Scenes, IdsVariantsAndBounds) {
    for (const std::string id : {"sphere-on-plane", "box-on-plane", "two-spheres"}) {
        const AnalyticScene s = make_scene(id, TextureVariant::Full);
        const auto [lo, hi] = scene_bounds(s);
        std::mt19937_64 rng(1);
        std::normal_distribution<double> n;
        for (int k = 0; k < 200; ++k) {
            const Vec3 d = Vec3(n(rng), n(rng), n(rng)).normalized();
            const auto h = trace_ray(s, Vec3(0, 0, 1.0), d);
            if (!h) continue;
            EXPECT_TRUE((h->point.array() >= lo.array() - 1e-9).all() && (h->point.array() <= hi.array() + 1e-9).all());
        }
    }
    EXPECT_THROW(make_scene("teapot", TextureVariant::Full), InvalidParameter);
    const auto none = make_scene("sphere-on-plane", TextureVariant::None);
    for (const auto& p : none.primitives) EXPECT_EQ(p.texture.kind, Texture::Kind::Constant);
    const auto obj = make_scene("sphere-on-plane", TextureVariant::ObjectOnly);
    EXPECT_EQ(obj.primitives[0].texture.kind, Texture::Kind::Constant);
    EXPECT_EQ(obj.primitives[1].texture.kind, Texture::Kind::Checker);
    for (TextureVariant v : {TextureVariant::Full, TextureVariant::ObjectOnly, TextureVariant::PlaneOnly, TextureVariant::None})
        EXPECT_EQ(parse_texture_variant(to_string(v)), v);
}

TEST(GtView, DepthNormalAndShadingOracles) {
    Plane p;
    p.half_extent = Vec2(10, 10);
    const AnalyticScene s = single({p, Texture::constant(Vec3(0.5, 0.5, 0.5))});
    LidarConfig l = fixtures::small_lidar();
    const CameraModel cam = look_at(Vec3(0, -0.3, 0.4), Vec3::Zero(), Vec3::UnitZ(), make_rig_camera(l, 16, 16));
    const GtView v = render_gt_view(s, cam, l, 3, 16);
    const Vec3 forward = cam.rotation.row(2).transpose();
    for (int y = 0; y < 16; y += 3)
        for (int x = 0; x < 16; x += 3) {
            const Vec3 d = cam.world_ray(x + 0.5, y + 0.5);
            const double t = -cam.center().z() / d.z();
            EXPECT_NEAR(v.depth.at(x, y), t * d.dot(forward), 1e-12);
            const Vec3 n = cam.rotation * Vec3::UnitZ();
            EXPECT_NEAR(v.normal.at(x, y, 2), n.z(), 1e-12);
            // Headlight Lambertian: the cosine is -d.z on the upward-facing ground.
            EXPECT_NEAR(v.rgb.at(x, y, 0), 0.5 * (0.1 + 0.9 * -d.z()), 1e-12);
        }
    ASSERT_EQ(v.sparse_depth.size(), 16u);
    const auto pts = zone_center_points(l, cam);
    for (std::size_t k = 0; k < pts.size(); ++k) {
        const Vec3 d = cam.world_ray(pts[k].x(), pts[k].y());
        EXPECT_NEAR(v.sparse_depth[k], -cam.center().z() / d.z() * d.dot(forward), 1e-12);
    }
}

TEST(SimulateTransient, OpaqueWallDepositsUnitMass) {
    Plane p;
    p.half_extent = Vec2(10, 10);
    const AnalyticScene s = single({p, Texture::constant(Vec3::Ones())});
    const LidarConfig l = fixtures::small_lidar();
    const CameraModel cam = look_at(Vec3(0, 0, 0.5), Vec3::Zero(), Vec3::UnitY(), make_rig_camera(l, 16, 16));
    const auto t = simulate_transient(s, l, cam, 64, 9);
    for (int iy = 0; iy < l.ny; ++iy)
        for (int ix = 0; ix < l.nx; ++ix) {
            const auto h = t.histogram(ix, iy);
            EXPECT_NEAR(std::accumulate(h.begin(), h.end(), 0.0), 1.0, 1e-12);
        }
    // One axis ray: the two soft bins around the distance.
    const auto one = simulate_transient(s, l, cam, 1, 9);
    const Cone c = pixel_cone(l, cam, {1, 2});
    const double dist = 0.5 / -c.axis.z();
    const BinAssignment b = bin_index(dist, l.bin_width_s, l.n_bins);
    EXPECT_NEAR(one.histogram(1, 2)[b.lower_bin], b.w1, 1e-12);
    EXPECT_NEAR(one.histogram(1, 2)[b.lower_bin + 1], b.w2, 1e-12);
}

TEST(SimulateTransient, PoissonCountsAreIntegers) {
    const AnalyticScene s = make_scene("sphere-on-plane", TextureVariant::None);
    const LidarConfig l = fixtures::small_lidar();
    const CameraModel cam = fixtures::small_camera(l);
    const auto t = simulate_transient(s, l, cam, 16, 1, true, 500.0);
    double total = 0.0;
    for (double v : t.counts) {
        EXPECT_EQ(v, std::floor(v));
        total += v;
    }
    EXPECT_GT(total, 0.0);
}

TEST(SimulateTransient, OpaqueSurfelWallMatchesAnalyticPlane) {
    Plane p;
    p.half_extent = Vec2(10, 10);
    const AnalyticScene analytic = single({p, Texture::constant(Vec3::Ones())});
    Scene surfels;
    Surfel w;
    w.scale = Vec2(1e3, 1e3);
    w.opacity = 1.0;
    surfels.surfels.push_back(w);
    LidarConfig l = fixtures::small_lidar();
    l.rays_per_cone = 32;
    const CameraModel cam = look_at(Vec3(0.1, -0.3, 0.45), Vec3::Zero(), Vec3::UnitZ(), make_rig_camera(l, 16, 16));
    const auto gt = simulate_transient(analytic, l, cam, l.rays_per_cone, 4);
    const auto rendered = render_transient_image(surfels, l, cam, 4);
    for (std::size_t k = 0; k < gt.counts.size(); ++k) EXPECT_NEAR(rendered.counts[k], gt.counts[k], 1e-6);
}

TEST(Noise, InfiniteSnrIsIdentityAndFiniteSnrMatches) {
    Image img(64, 64, 3);
    for (double& v : img.data) v = 0.5;
    EXPECT_EQ(add_gaussian_noise(img, std::numeric_limits<double>::infinity(), 1).data, img.data);
    const Image noisy = add_gaussian_noise(img, 20.0, 1);
    double se = 0.0;
    for (std::size_t i = 0; i < img.data.size(); ++i) se += std::pow(noisy.data[i] - img.data[i], 2);
    const double measured = 20.0 * std::log10(0.5 / std::sqrt(se / img.data.size()));
    EXPECT_NEAR(measured, 20.0, 0.2);
    EXPECT_EQ(add_gaussian_noise(img, 20.0, 1).data, noisy.data);
    EXPECT_NE(add_gaussian_noise(img, 20.0, 2).data, noisy.data);
    EXPECT_THROW(add_gaussian_noise(img, NAN, 1), InvalidParameter);
}

TEST(Noise, MinusInfinityCarriesNoSignal) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(64, 64, 3);
    for (double& v : img.data) v = u(rng);
    const Image noise = add_gaussian_noise(img, -std::numeric_limits<double>::infinity(), 5);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        ma += img.data[i];
        mb += noise.data[i];
    }
    ma /= img.data.size();
    mb /= img.data.size();
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        cov += (img.data[i] - ma) * (noise.data[i] - mb);
        va += std::pow(img.data[i] - ma, 2);
        vb += std::pow(noise.data[i] - mb, 2);
    }
    EXPECT_LT(std::abs(cov / std::sqrt(va * vb)), 0.05);
    for (double v : noise.data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Protocol, CamerasAndSplit) {
    ProtocolConfig cfg;
    cfg.n_train = 3;
    cfg.n_test = 2;
    const auto cams = protocol_cameras(cfg);
    ASSERT_EQ(cams.size(), 5u);
    for (const auto& c : cams) {
        EXPECT_NEAR(c.center().norm(), cfg.orbit_radius, 1e-12);
        const Vec3 p = c.to_camera(Vec3(0, 0, 0.08));
        EXPECT_NEAR(p.x(), 0.0, 1e-12);
        EXPECT_NEAR(p.y(), 0.0, 1e-12);
    }
    ProtocolConfig other = cfg;
    other.seed = 2;
    EXPECT_FALSE(protocol_cameras(other)[0].translation.isApprox(cams[0].translation));
}

TEST(Protocol, DatasetNoiseOnlyOnTrainViews) {
    ProtocolConfig cfg;
    cfg.n_train = 2;
    cfg.n_test = 1;
    cfg.width = cfg.height = 16;
    cfg.gt_rays_per_cone = 4;
    cfg.snr_db = 10.0;
    const DatasetBundle b = make_protocol_dataset(cfg);
    EXPECT_EQ(b.train_views().size(), 2u);
    EXPECT_EQ(b.test_views().size(), 1u);
    for (const auto* v : b.train_views()) EXPECT_NE(v->rgb.data, v->gt.rgb.data);
    for (const auto* v : b.test_views()) EXPECT_EQ(v->rgb.data, v->gt.rgb.data);
    cfg.width = 20;
    EXPECT_THROW(make_protocol_dataset(cfg), InvalidParameter);
}
