#include "surfelfuse/core.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace surfelfuse;

namespace {

Vec4 random_quaternion(std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    return Vec4(n(rng), n(rng), n(rng), n(rng)).normalized();
}

// Quaternion product (w, x, y, z).
Vec4 qmul(const Vec4& a, const Vec4& b) {
    return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

}  // namespace

TEST(Covariance, IdentityRotation) {
    const Mat3 c = covariance_from_params(Vec4(1, 0, 0, 0), Vec2(1, 1));
    EXPECT_TRUE(c.isApprox(Vec3(1, 1, 0).asDiagonal().toDenseMatrix(), 1e-15));
    const Mat3 c2 = covariance_from_params(Vec4(1, 0, 0, 0), Vec2(2, 3));
    EXPECT_TRUE(c2.isApprox(Vec3(4, 9, 0).asDiagonal().toDenseMatrix(), 1e-15));
}

TEST(Covariance, EigenvaluesMatchSquaredScales) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.01, 2.0);
    for (int trial = 0; trial < 200; ++trial) {
        const Vec2 s(u(rng), u(rng));
        const Mat3 c = covariance_from_params(random_quaternion(rng), s);
        EXPECT_TRUE(c.isApprox(c.transpose(), 1e-14));
        Eigen::SelfAdjointEigenSolver<Mat3> es(c);
        std::array<double, 3> expect{0.0, s.x() * s.x(), s.y() * s.y()};
        std::sort(expect.begin(), expect.end());
        for (int k = 0; k < 3; ++k) EXPECT_NEAR(es.eigenvalues()[k], expect[k], 1e-10);
    }
}

TEST(Covariance, QuaternionSignInvariance) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const Vec4 q = random_quaternion(rng);
        const Vec2 s(0.1 + 0.01 * (trial % 7), 0.3);
        EXPECT_TRUE(covariance_from_params(q, s).isApprox(covariance_from_params(-q, s), 1e-14));
    }
}

TEST(Covariance, InPlaneRotationInvariantWhenIsotropic) {
    std::mt19937_64 rng(6);
    const double h = std::sqrt(0.5);
    const Vec4 about_normal(h, 0, 0, h);  // 90 degrees about the local z axis
    for (int trial = 0; trial < 100; ++trial) {
        const Vec4 q = random_quaternion(rng);
        const Vec2 s(0.2, 0.2);
        EXPECT_TRUE(covariance_from_params(q, s).isApprox(covariance_from_params(qmul(q, about_normal), s), 1e-12));
    }
}

TEST(Covariance, RejectsNonFinite) {
    EXPECT_THROW(covariance_from_params(Vec4(NAN, 0, 0, 1), Vec2(1, 1)), InvalidParameter);
    EXPECT_THROW(covariance_from_params(Vec4(1, 0, 0, 0), Vec2(INFINITY, 1)), InvalidParameter);
}

TEST(Gaussian, ClosedFormValues) {
    Surfel s;
    s.position = Vec3(1, 2, 3);
    s.rotation = Vec4(1, 0, 0, 0);
    s.scale = Vec2(0.5, 0.25);
    EXPECT_DOUBLE_EQ(evaluate_gaussian(s.position, s), 1.0);
    EXPECT_NEAR(evaluate_gaussian(s.position + Vec3(0.5, 0, 0), s), std::exp(-0.5), 1e-15);
    EXPECT_NEAR(evaluate_gaussian(s.position + Vec3(0.5, 0.25, 0), s), std::exp(-1.0), 1e-15);
}

TEST(Gaussian, DegenerateScaleIsLineSupport) {
    Surfel s;
    s.scale = Vec2(0.5, 0.0);
    EXPECT_GT(evaluate_gaussian(Vec3(0.2, 0, 0), s), 0.0);
    EXPECT_EQ(evaluate_gaussian(Vec3(0.2, 0.01, 0), s), 0.0);
}

TEST(Gaussian, RigidTransformInvariance) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int trial = 0; trial < 200; ++trial) {
        Surfel s;
        s.position = Vec3(u(rng), u(rng), u(rng));
        s.rotation = random_quaternion(rng);
        s.scale = Vec2(0.3 + 0.2 * u(rng), 0.3 + 0.2 * u(rng));
        const Vec3 x = s.position + 0.3 * Vec3(u(rng), u(rng), u(rng));
        const Vec4 g = random_quaternion(rng);
        const Mat3 G = quaternion_to_rotation(g);
        const Vec3 t(u(rng), u(rng), u(rng));
        Surfel moved = s;
        moved.position = G * s.position + t;
        moved.rotation = qmul(g, s.rotation);
        EXPECT_NEAR(evaluate_gaussian(x, s), evaluate_gaussian(G * x + t, moved), 1e-12);
    }
}

TEST(Gaussian, MonotoneInTangentDistance) {
    Surfel s;
    s.scale = Vec2(0.2, 0.1);
    double prev = 2.0;
    for (double r = 0.0; r < 1.0; r += 0.05) {
        const double v = evaluate_gaussian(Vec3(r, 0.5 * r, 0), s);
        EXPECT_LT(v, prev);
        prev = v;
    }
}

TEST(SphericalHarmonics, DegreeZeroConvention) {
    const std::vector<double> zero(3, 0.0);
    EXPECT_TRUE(sh_to_color(zero, 0, Vec3::UnitZ()).isApprox(Vec3::Constant(0.5)));
    const std::vector<double> c{1.0, -1.0, 0.5};
    const Vec3 a = sh_to_color(c, 0, Vec3::UnitX());
    EXPECT_EQ(a, sh_to_color(c, 0, Vec3(0, 0.6, 0.8)));
    EXPECT_NEAR(a.x(), 0.28209479177387814 + 0.5, 1e-15);
}

TEST(SphericalHarmonics, BandOneIsOdd) {
    std::vector<double> c(sh_coeff_count(1), 0.0);
    for (int k = 3; k < 12; ++k) c[k] = 0.1 * k;
    const Vec3 d = Vec3(0.3, -0.4, 0.5).normalized();
    const Vec3 band1_pos = sh_to_color(c, 1, d) - Vec3::Constant(0.5);
    const Vec3 band1_neg = sh_to_color(c, 1, -d) - Vec3::Constant(0.5);
    EXPECT_TRUE(band1_pos.isApprox(-band1_neg, 1e-14));
}

TEST(SphericalHarmonics, CoefficientCountChecked) {
    EXPECT_THROW(sh_to_color(std::vector<double>(3), 1, Vec3::UnitZ()), InvalidParameter);
    EXPECT_THROW(sh_to_color(std::vector<double>(3), 4, Vec3::UnitZ()), InvalidParameter);
}

TEST(Lidar, DefaultsCoverRange) {
    LidarConfig l;
    EXPECT_NO_THROW(l.validate());
    EXPECT_GE(l.n_bins * l.bin_width_m(), l.max_range_m);
    l.n_bins = 100;  // 100 * 6 mm < 1.5 m
    EXPECT_THROW(l.validate(), InvalidParameter);
}

TEST(Lidar, ConesTileTheFrustum) {
    const LidarConfig l;
    const CameraModel cam = make_rig_camera(l, 128, 128);
    double total = 0.0;
    for (int iy = 0; iy < l.ny; ++iy)
        for (int ix = 0; ix < l.nx; ++ix) {
            const Cone c = pixel_cone(l, cam, {ix, iy});
            total += rectangle_solid_angle(c.tan_min.x(), c.tan_max.x(), c.tan_min.y(), c.tan_max.y());
            if (ix + 1 < l.nx) {
                EXPECT_EQ(c.tan_max.x(), pixel_cone(l, cam, {ix + 1, iy}).tan_min.x());
            }
            if (iy + 1 < l.ny) {
                EXPECT_EQ(c.tan_max.y(), pixel_cone(l, cam, {ix, iy + 1}).tan_min.y());
            }
        }
    const double hx = std::tan(0.5 * l.fov_x_rad()), hy = std::tan(0.5 * l.fov_y_rad());
    EXPECT_NEAR(total, rectangle_solid_angle(-hx, hx, -hy, hy), 1e-12);
    // The frustum edges land on the image borders.
    EXPECT_NEAR(cam.fx * hx + cam.cx, cam.width, 1e-9);
}

TEST(Lidar, CenterZoneOfOddGridIsBoresight) {
    LidarConfig l;
    l.nx = 3;
    l.ny = 3;
    const CameraModel cam = look_at(Vec3(1, 2, 3), Vec3(0, 0, 0), Vec3::UnitZ(), make_rig_camera(l, 30, 30));
    const Cone c = pixel_cone(l, cam, {1, 1});
    EXPECT_TRUE(c.axis.isApprox((Vec3(0, 0, 0) - Vec3(1, 2, 3)).normalized(), 1e-12));
    EXPECT_TRUE(c.apex.isApprox(Vec3(1, 2, 3), 1e-12));
}

TEST(Lidar, CornerZonesSymmetric) {
    const LidarConfig l;
    const CameraModel cam = make_rig_camera(l, 128, 128);
    const Cone a = pixel_cone(l, cam, {0, 0});
    const Cone b = pixel_cone(l, cam, {7, 7});
    EXPECT_NEAR(std::acos(a.axis.z()), std::acos(b.axis.z()), 1e-14);
    EXPECT_NEAR(a.axis.x(), -b.axis.x(), 1e-14);
    EXPECT_NEAR(a.half_angle, b.half_angle, 1e-14);
    EXPECT_THROW(pixel_cone(l, cam, {8, 0}), InvalidParameter);
}

TEST(Camera, LookAtIsProperRotation) {
    const CameraModel cam = look_at(Vec3(0.3, -0.7, 0.5), Vec3(0, 0, 0.1), Vec3::UnitZ(), CameraModel{});
    EXPECT_NEAR(cam.rotation.determinant(), 1.0, 1e-12);
    EXPECT_TRUE((cam.rotation * cam.rotation.transpose()).isIdentity(1e-12));
    EXPECT_TRUE(cam.center().isApprox(Vec3(0.3, -0.7, 0.5), 1e-12));
    EXPECT_GT(cam.to_camera(Vec3(0, 0, 0.1)).z(), 0.0);
    CameraModel bad = cam;
    bad.rotation.col(0) *= -1.0;
    EXPECT_THROW(bad.validate(), InvalidParameter);
}

TEST(Surfel, Validation) {
    Surfel s;
    EXPECT_NO_THROW(validate_surfel(s, 0));
    s.opacity = 1.2;
    EXPECT_THROW(validate_surfel(s, 0), InvalidParameter);
    s.opacity = 0.5;
    s.color_coeffs.resize(5);
    EXPECT_THROW(validate_surfel(s, 0), InvalidParameter);
}
