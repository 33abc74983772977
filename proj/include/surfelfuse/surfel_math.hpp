#pragma once

// Scalar-generic surfel math. Instantiated with double for rendering and with
// ad::Var when the per-surfel parameter gradients are needed.

#include "surfelfuse/autodiff.hpp"
#include "surfelfuse/core.hpp"

#include <array>
#include <cmath>

namespace surfelfuse::math {

inline constexpr double kShC0 = 0.28209479177387814;
inline constexpr double kShC1 = 0.4886025119029199;
inline constexpr double kShC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                    -1.0925484305920792, 0.5462742152960396};
inline constexpr double kShC3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                    0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                    -0.5900435899266435};

/// Row-major rotation matrix from a (w, x, y, z) quaternion, normalized first.
template <class T>
std::array<T, 9> rotation_from_quaternion(const T (&q)[4]) {
    using std::sqrt;
    const T n = sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    const T w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    return {T(1.0) - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
            2.0 * (x * y + w * z), T(1.0) - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
            2.0 * (x * z - w * y), 2.0 * (y * z + w * x), T(1.0) - 2.0 * (x * x + y * y)};
}

/// Color for coefficient layout coeffs[3 * basis + channel].
template <class T>
std::array<T, 3> sh_color(const T* coeffs, int degree, const T (&dir)[3]) {
    std::array<T, 3> c;
    for (int ch = 0; ch < 3; ++ch) c[ch] = kShC0 * coeffs[ch] + 0.5;
    if (degree < 1) return c;
    const T &x = dir[0], &y = dir[1], &z = dir[2];
    T basis[16];
    basis[1] = -kShC1 * y;
    basis[2] = kShC1 * z;
    basis[3] = -kShC1 * x;
    int count = 4;
    if (degree >= 2) {
        const T xx = x * x, yy = y * y, zz = z * z;
        basis[4] = kShC2[0] * (x * y);
        basis[5] = kShC2[1] * (y * z);
        basis[6] = kShC2[2] * (2.0 * zz - xx - yy);
        basis[7] = kShC2[3] * (x * z);
        basis[8] = kShC2[4] * (xx - yy);
        count = 9;
        if (degree >= 3) {
            basis[9] = kShC3[0] * y * (3.0 * xx - yy);
            basis[10] = kShC3[1] * (x * y) * z;
            basis[11] = kShC3[2] * y * (4.0 * zz - xx - yy);
            basis[12] = kShC3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            basis[13] = kShC3[4] * x * (4.0 * zz - xx - yy);
            basis[14] = kShC3[5] * z * (xx - yy);
            basis[15] = kShC3[6] * x * (xx - 3.0 * yy);
            count = 16;
        }
    }
    for (int k = 1; k < count; ++k)
        for (int ch = 0; ch < 3; ++ch) c[ch] = c[ch] + basis[k] * coeffs[3 * k + ch];
    return c;
}

/// Everything the rasterizers need from one surfel under one camera.
template <class T>
struct SurfelTerms {
    std::array<T, 9> rotation;  // world, row-major; columns are tangent u, tangent v, normal
    std::array<T, 2> mean;      // projected center, pixels
    std::array<T, 3> cov;       // regularized image covariance (xx, xy, yy)
    std::array<T, 3> conic;     // its inverse
    std::array<T, 3> center;    // camera-space center
    std::array<T, 3> normal;    // camera-space normal facing the camera
    std::array<T, 3> color;
};

template <class T>
SurfelTerms<T> surfel_terms(const T (&pos)[3], const T (&quat)[4], const T (&scale)[2], const T* coeffs,
                            int degree, const CameraModel& cam, double cov_epsilon) {
    using std::sqrt;
    SurfelTerms<T> out;
    out.rotation = rotation_from_quaternion(quat);
    const auto& R = out.rotation;
    const Mat3& W = cam.rotation;

    for (int r = 0; r < 3; ++r)
        out.center[r] = W(r, 0) * pos[0] + W(r, 1) * pos[1] + W(r, 2) * pos[2] + cam.translation[r];
    const T& px = out.center[0];
    const T& py = out.center[1];
    const T& pz = out.center[2];

    const T inv_z = T(1.0) / pz;
    out.mean[0] = cam.fx * px * inv_z + cam.cx;
    out.mean[1] = cam.fy * py * inv_z + cam.cy;

    // Camera-space rotation columns.
    T axis[3][3];  // axis[k][r]: column k of W R
    for (int k = 0; k < 3; ++k)
        for (int r = 0; r < 3; ++r) axis[k][r] = W(r, 0) * R[k] + W(r, 1) * R[3 + k] + W(r, 2) * R[6 + k];

    // Affine projection Jacobian at the center, applied to the two scaled tangents.
    const T j00 = cam.fx * inv_z;
    const T j02 = -cam.fx * px * inv_z * inv_z;
    const T j11 = cam.fy * inv_z;
    const T j12 = -cam.fy * py * inv_z * inv_z;
    T a[2][2];
    for (int k = 0; k < 2; ++k) {
        a[k][0] = (j00 * axis[k][0] + j02 * axis[k][2]) * scale[k];
        a[k][1] = (j11 * axis[k][1] + j12 * axis[k][2]) * scale[k];
    }
    out.cov[0] = a[0][0] * a[0][0] + a[1][0] * a[1][0] + cov_epsilon;
    out.cov[1] = a[0][0] * a[0][1] + a[1][0] * a[1][1];
    out.cov[2] = a[0][1] * a[0][1] + a[1][1] * a[1][1] + cov_epsilon;
    const T inv_det = T(1.0) / (out.cov[0] * out.cov[2] - out.cov[1] * out.cov[1]);
    out.conic[0] = out.cov[2] * inv_det;
    out.conic[1] = -out.cov[1] * inv_det;
    out.conic[2] = out.cov[0] * inv_det;

    const double facing = value_of(axis[2][0]) * value_of(px) + value_of(axis[2][1]) * value_of(py) +
                          value_of(axis[2][2]) * value_of(pz);
    const double sign = facing > 0.0 ? -1.0 : 1.0;
    for (int r = 0; r < 3; ++r) out.normal[r] = sign * axis[2][r];

    if (degree == 0) {
        const T dummy[3] = {T(0.0), T(0.0), T(1.0)};
        out.color = sh_color(coeffs, 0, dummy);
    } else {
        const Vec3 eye = cam.center();
        T d[3] = {pos[0] - eye[0], pos[1] - eye[1], pos[2] - eye[2]};
        const T len = sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        for (auto& v : d) v = v / len;
        out.color = sh_color(coeffs, degree, d);
    }
    return out;
}

}  // namespace surfelfuse::math
