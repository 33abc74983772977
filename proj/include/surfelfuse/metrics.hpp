#pragma once

// Evaluation metrics for rendered test views.

#include "surfelfuse/core.hpp"
#include "surfelfuse/raster.hpp"

#include <optional>
#include <vector>

namespace surfelfuse {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) over all pixels and channels, capped at kPsnrCap.
double psnr(const Image& a, const Image& b);

struct ViewMetrics {
    double psnr = 0.0;
    double ssim = 0.0;
    std::optional<double> depth_mae;   // meters over jointly covered pixels
    std::optional<double> normal_mae;  // degrees over jointly covered pixels
    std::size_t covered = 0;
};

struct MetricsReport {
    std::vector<ViewMetrics> views;
    ViewMetrics mean;  // aggregate over views; depth/normal over views that have them
};

/// Color is clamped to [0, 1] before scoring. A pixel is covered when the
/// ground-truth depth is positive and the render's alpha reaches `coverage_epsilon`.
ViewMetrics compute_metrics(const RenderBuffers& pred, const Image& gt_rgb, const Image& gt_depth,
                            const Image& gt_normal, double coverage_epsilon = 1e-3);

MetricsReport aggregate(std::vector<ViewMetrics> views);

}  // namespace surfelfuse
