#include "surfelfuse/analysis.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace surfelfuse {

Vec2 VoxelGrid2D::cell_center(int cell) const {
    const int ix = cell % n, iy = cell / n;
    const double h = cell_size();
    return {-0.5 * side + (ix + 0.5) * h, -0.5 * side + (iy + 0.5) * h};
}

double default_bin_width(const VoxelGrid2D& grid, int bins, double orbit_radius) {
    return (orbit_radius + grid.side * std::numbers::sqrt2 / 2.0) / bins;
}

ForwardMatrix build_forward_matrix(const VoxelGrid2D& grid, const std::vector<SensorPose2D>& poses,
                                   const ForwardModelConfig& cfg) {
    if (poses.empty()) throw InvalidParameter("build_forward_matrix: no views");
    if (!(cfg.ifov_rad > 0.0) || cfg.pixels_per_view < 1 || cfg.bins < 1 || !(cfg.bin_width > 0.0))
        throw InvalidParameter("build_forward_matrix: invalid sensor configuration");
    for (const auto& p : poses)
        if (!p.position.allFinite() || !std::isfinite(p.heading))
            throw InvalidParameter("build_forward_matrix: non-finite pose");

    const int P = cfg.pixels_per_view, B = cfg.bins, C = grid.cell_count();
    ForwardMatrix out;
    out.A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(poses.size()) * P * B, C);
    out.rows.reserve(static_cast<std::size_t>(out.A.rows()));
    for (int v = 0; v < static_cast<int>(poses.size()); ++v)
        for (int p = 0; p < P; ++p)
            for (int b = 0; b < B; ++b) out.rows.push_back({v, p, b});

    const double pitch = cfg.fov_rad / P;
    for (int v = 0; v < static_cast<int>(poses.size()); ++v) {
        const SensorPose2D& pose = poses[v];
        const double c = std::cos(pose.heading), s = std::sin(pose.heading);
        for (int cell = 0; cell < C; ++cell) {
            const Vec2 d = grid.cell_center(cell) - pose.position;
            const int b = static_cast<int>(std::floor(d.norm() / cfg.bin_width));
            if (b < 0 || b >= B) continue;
            const double bearing = std::atan2(-s * d.x() + c * d.y(), c * d.x() + s * d.y());
            for (int p = 0; p < P; ++p) {
                const double axis = (p - 0.5 * (P - 1)) * pitch;
                if (std::abs(bearing - axis) <= 0.5 * cfg.ifov_rad)
                    out.A((static_cast<Eigen::Index>(v) * P + p) * B + b, cell) = 1.0;
            }
        }
    }
    return out;
}

int matrix_rank(const Eigen::MatrixXd& A, double tol) {
    if (A.size() == 0) return 0;
    if (!A.allFinite()) throw InvalidParameter("matrix_rank: non-finite entries");
    // Zero rows contribute nothing; dropping them keeps the SVD small.
    std::vector<Eigen::Index> keep;
    for (Eigen::Index r = 0; r < A.rows(); ++r)
        if (A.row(r).cwiseAbs().maxCoeff() > 0.0) keep.push_back(r);
    if (keep.empty()) return 0;
    Eigen::MatrixXd B(static_cast<Eigen::Index>(keep.size()), A.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) B.row(static_cast<Eigen::Index>(i)) = A.row(keep[i]);
    const Eigen::BDCSVD<Eigen::MatrixXd> svd(B);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0) return 0;
    if (tol < 0.0)
        tol = static_cast<double>(std::max(A.rows(), A.cols())) * sv(0) * std::ldexp(1.0, -40);
    int rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > tol) ++rank;
    return rank;
}

std::vector<SensorPose2D> orbit_poses(int count, double radius) {
    std::vector<SensorPose2D> poses;
    for (int k = 0; k < count; ++k) {
        double inv = 0.0, f = 0.5;
        for (unsigned x = static_cast<unsigned>(k); x; x >>= 1, f *= 0.5)
            if (x & 1u) inv += f;
        const double angle = 2.0 * std::numbers::pi * inv;
        SensorPose2D p;
        p.position = radius * Vec2(std::cos(angle), std::sin(angle));
        p.heading = angle + std::numbers::pi;
        poses.push_back(p);
    }
    return poses;
}

std::vector<RankPoint> rank_sweep(const RankSweepConfig& cfg) {
    const double radius = cfg.orbit_factor * cfg.grid.side;
    ForwardModelConfig diffuse = cfg.diffuse;
    if (!(diffuse.bin_width > 0.0)) diffuse.bin_width = default_bin_width(cfg.grid, diffuse.bins, radius);
    ForwardModelConfig sparse = diffuse;
    sparse.ifov_rad = diffuse.ifov_rad / cfg.sparse_ratio;

    std::vector<RankPoint> out;
    for (const auto& [name, model] : {std::pair{"diffuse", diffuse}, std::pair{"sparse", sparse}}) {
        for (int views : cfg.view_counts) {
            RankPoint pt;
            pt.config = name;
            pt.views = views;
            if (views > 0) pt.rank = matrix_rank(build_forward_matrix(cfg.grid, orbit_poses(views, radius), model).A);
            pt.fraction = static_cast<double>(pt.rank) / cfg.grid.cell_count();
            out.push_back(pt);
        }
    }
    return out;
}

}  // namespace surfelfuse
