#pragma once

// Linear recoverability model y = A x on a 2D occupancy grid: rows are
// (view, pixel, range bin) measurements, columns are grid cells.

#include "surfelfuse/core.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace surfelfuse {

/// n x n cells covering the square [-side/2, side/2]^2.
struct VoxelGrid2D {
    int n = 30;
    double side = 1.0;

    int cell_count() const { return n * n; }
    double cell_size() const { return side / n; }
    Vec2 cell_center(int cell) const;
};

struct SensorPose2D {
    Vec2 position = Vec2::Zero();
    double heading = 0.0;  // radians, direction of the optical axis
};

struct ForwardModelConfig {
    int pixels_per_view = 8;
    double fov_rad = 8 * 4.9 * 3.14159265358979323846 / 180.0;  // pixel centers are fov / pixels apart
    double ifov_rad = 4.9 * 3.14159265358979323846 / 180.0;     // angular width of each pixel's wedge
    int bins = 64;
    double bin_width = 0.0;  // one-way distance per bin; 0 picks range / bins for the default orbit
};

struct ForwardMatrix {
    Eigen::MatrixXd A;
    struct Row {
        int view = 0;
        int pixel = 0;
        int bin = 0;
    };
    std::vector<Row> rows;
};

/// Distance covered by the bins when bin_width is left at 0: the far corner of the grid seen from the orbit.
double default_bin_width(const VoxelGrid2D& grid, int bins, double orbit_radius);

/// A[(v, p, b), c] = 1 when cell c's center lies in pixel p's wedge seen from
/// view v and its distance falls in bin b. Occlusion is ignored.
ForwardMatrix build_forward_matrix(const VoxelGrid2D& grid, const std::vector<SensorPose2D>& poses,
                                   const ForwardModelConfig& config);

/// Number of singular values above `tol`; tol < 0 picks max(m, n) * sigma_max * 2^-40.
int matrix_rank(const Eigen::MatrixXd& A, double tol = -1.0);

/// The first `count` views of a nested sequence on a circle (base-2 radical
/// inverse of the view index), all facing the grid center. Power-of-two counts
/// are exactly uniform.
std::vector<SensorPose2D> orbit_poses(int count, double radius);

struct RankPoint {
    std::string config;
    int views = 0;
    int rank = 0;
    double fraction = 0.0;  // rank / cell_count
};

struct RankSweepConfig {
    VoxelGrid2D grid;
    std::vector<int> view_counts = {1, 2, 4, 8, 16};
    ForwardModelConfig diffuse;
    double sparse_ratio = 50.0;  // sparse wedge = diffuse wedge / ratio
    double orbit_factor = 2.0;   // orbit radius in units of grid side
};

std::vector<RankPoint> rank_sweep(const RankSweepConfig& config);

}  // namespace surfelfuse
