#include "surfelfuse/core.hpp"

#include "surfelfuse/surfel_math.hpp"

#include <cmath>
#include <numbers>

namespace surfelfuse {

namespace {

bool finite(const auto& m) { return m.allFinite(); }

}  // namespace

void CameraModel::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidParameter("camera focal lengths must be positive");
    if (width < 1 || height < 1) throw InvalidParameter("camera resolution must be at least 1x1");
    if (!finite(rotation) || !finite(translation)) throw InvalidParameter("camera pose is not finite");
    const Mat3 should_be_identity = rotation * rotation.transpose();
    if ((should_be_identity - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 || rotation.determinant() < 0.0)
        throw InvalidParameter("camera rotation is not a proper rotation");
}

CameraModel look_at(const Vec3& eye, const Vec3& target, const Vec3& up, CameraModel intrinsics) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(up);
    if (right.norm() < 1e-9) throw InvalidParameter("look_at: up vector parallel to view direction");
    right.normalize();
    const Vec3 down = forward.cross(right);
    intrinsics.rotation.row(0) = right.transpose();
    intrinsics.rotation.row(1) = down.transpose();
    intrinsics.rotation.row(2) = forward.transpose();
    intrinsics.translation = -intrinsics.rotation * eye;
    return intrinsics;
}

double LidarConfig::fov_x_rad() const { return nx * ifov_deg * std::numbers::pi / 180.0; }
double LidarConfig::fov_y_rad() const { return ny * ifov_deg * std::numbers::pi / 180.0; }

void LidarConfig::validate() const {
    if (nx < 1 || ny < 1) throw InvalidParameter("lidar grid dimensions must be >= 1");
    if (!(ifov_deg > 0.0) || nx * ifov_deg >= 180.0 || ny * ifov_deg >= 180.0)
        throw InvalidParameter("lidar ifov must be positive and the total field of view below 180 degrees");
    if (!(bin_width_s > 0.0) || n_bins < 1) throw InvalidParameter("lidar bins must be positive");
    if (n_bins * bin_width_m() < max_range_m)
        throw InvalidParameter("lidar bins do not cover the maximum range");
    if (rays_per_cone < 1) throw InvalidParameter("rays_per_cone must be >= 1");
}

CameraModel make_rig_camera(const LidarConfig& lidar, int width, int height) {
    lidar.validate();
    if (width % lidar.nx != 0 || height % lidar.ny != 0)
        throw InvalidParameter("image size must be a multiple of the lidar grid");
    CameraModel cam;
    cam.width = width;
    cam.height = height;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    cam.fx = 0.5 * width / std::tan(0.5 * lidar.fov_x_rad());
    cam.fy = 0.5 * height / std::tan(0.5 * lidar.fov_y_rad());
    return cam;
}

double rectangle_solid_angle(double x0, double x1, double y0, double y1) {
    auto f = [](double x, double y) { return std::atan(x * y / std::sqrt(1.0 + x * x + y * y)); };
    return f(x1, y1) - f(x0, y1) - f(x1, y0) + f(x0, y0);
}

Cone pixel_cone(const LidarConfig& lidar, const CameraModel& pose, ZoneIndex zone) {
    if (zone.ix < 0 || zone.iy < 0 || zone.ix >= lidar.nx || zone.iy >= lidar.ny)
        throw InvalidParameter("zone index outside the lidar grid");
    const double half_x = std::tan(0.5 * lidar.fov_x_rad());
    const double half_y = std::tan(0.5 * lidar.fov_y_rad());
    const double step_x = 2.0 * half_x / lidar.nx;
    const double step_y = 2.0 * half_y / lidar.ny;

    Cone cone;
    cone.tan_min = {-half_x + zone.ix * step_x, -half_y + zone.iy * step_y};
    cone.tan_max = {-half_x + (zone.ix + 1) * step_x, -half_y + (zone.iy + 1) * step_y};
    cone.camera_to_world = pose.rotation.transpose();
    cone.apex = pose.center();
    const Vec2 mid = 0.5 * (cone.tan_min + cone.tan_max);
    cone.axis = (cone.camera_to_world * Vec3(mid.x(), mid.y(), 1.0)).normalized();
    const double omega =
        rectangle_solid_angle(cone.tan_min.x(), cone.tan_max.x(), cone.tan_min.y(), cone.tan_max.y());
    cone.half_angle = std::acos(1.0 - omega / (2.0 * std::numbers::pi));
    return cone;
}

Mat3 quaternion_to_rotation(const Vec4& q) {
    const double arr[4] = {q[0], q[1], q[2], q[3]};
    const auto r = math::rotation_from_quaternion(arr);
    Mat3 m;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m(i, j) = r[3 * i + j];
    return m;
}

Mat3 covariance_from_params(const Vec4& rotation, const Vec2& scale) {
    if (!rotation.allFinite() || !scale.allFinite())
        throw InvalidParameter("covariance_from_params: non-finite input");
    if (rotation.norm() < 1e-12) throw InvalidParameter("covariance_from_params: zero quaternion");
    if (scale.minCoeff() < 0.0) throw InvalidParameter("covariance_from_params: negative scale");
    const Mat3 R = quaternion_to_rotation(rotation);
    const Eigen::DiagonalMatrix<double, 3> S(scale.x(), scale.y(), 0.0);
    const Mat3 M = R * S;
    return M * M.transpose();
}

double evaluate_gaussian(const Vec3& x, const Surfel& surfel) {
    const Mat3 R = quaternion_to_rotation(surfel.rotation);
    const Vec3 d = x - surfel.position;
    const double a = R.col(0).dot(d);
    const double b = R.col(1).dot(d);
    double q = 0.0;
    // A zero scale collapses the support to a line (or a point): any offset along
    // the collapsed axis lies outside it.
    for (const auto& [offset, s] : {std::pair{a, surfel.scale.x()}, std::pair{b, surfel.scale.y()}}) {
        if (s > 0.0)
            q += offset * offset / (s * s);
        else if (std::abs(offset) > 0.0)
            return 0.0;
    }
    return std::exp(-0.5 * q);
}

Vec3 sh_to_color(std::span<const double> coeffs, int degree, const Vec3& view_dir) {
    if (degree < 0 || degree > 3) throw InvalidParameter("sh degree must be in [0, 3]");
    if (static_cast<int>(coeffs.size()) != sh_coeff_count(degree))
        throw InvalidParameter("sh coefficient count does not match degree " + std::to_string(degree));
    const double dir[3] = {view_dir.x(), view_dir.y(), view_dir.z()};
    const auto c = math::sh_color(coeffs.data(), degree, dir);
    return {c[0], c[1], c[2]};
}

void validate_surfel(const Surfel& s, int sh_degree) {
    if (!s.position.allFinite() || !s.rotation.allFinite() || !s.scale.allFinite() || !std::isfinite(s.opacity))
        throw InvalidParameter("surfel has non-finite parameters");
    if (s.rotation.norm() < 1e-12) throw InvalidParameter("surfel has a zero quaternion");
    if (s.scale.minCoeff() < 0.0) throw InvalidParameter("surfel scale must be non-negative");
    if (s.opacity < 0.0 || s.opacity > 1.0) throw InvalidParameter("surfel opacity must lie in [0, 1]");
    if (static_cast<int>(s.color_coeffs.size()) != sh_coeff_count(sh_degree))
        throw InvalidParameter("surfel color coefficient count does not match the sh degree");
}

}  // namespace surfelfuse
