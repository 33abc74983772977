#pragma once

// Scene-adaptive training loss: per-patch RGB usefulness weights, weighted
// L1 + SSIM photometric term, transient KL term, depth-normal consistency and
// the sparse-LiDAR L1 baseline. Every term can also return its gradient with
// respect to the rendered quantities.

#include "surfelfuse/core.hpp"
#include "surfelfuse/gradient.hpp"
#include "surfelfuse/raster.hpp"

#include <string>
#include <vector>

namespace surfelfuse {

enum class LossMode {
    Fusion,
    RgbOnly,
    DiffuseOnly,
    SparseBaseline,    // RGB + L1 on the 8x8 zone-center depths
    SparseOnly,        // L1 on the zone-center depths alone
    FusionNoAdaptive,  // fusion with every w_p fixed at 0.5
};

LossMode parse_loss_mode(const std::string& name);
std::string to_string(LossMode mode);

bool uses_rgb(LossMode mode);
bool uses_transient(LossMode mode);
bool uses_sparse(LossMode mode);

struct LossConfig {
    double lambda_ssim = 0.2;
    double k = 50.0;
    double a = 0.01;
    double b = 0.002;
    double lambda_reg = 0.1;
    double lambda_lidar = 1.0;
    double lambda_sparse = 1.0;
    double snr_max = 1e3;
    double variance_floor = 1e-6;
    double discontinuity = 0.05;  // relative depth range that marks a 3x3 neighborhood as an edge
};

struct PatchStats {
    double mean = 0.0;
    double texture = 0.0;  // luminance variance
    double snr = 0.0;      // mean / max(variance, floor)
    bool saturated = false;  // variance hit the floor
};

/// Moments of the channel-mean luminance over [x0, x1) x [y0, y1).
PatchStats patch_stats(const Image& rgb, int x0, int y0, int x1, int y1, double variance_floor = 1e-6);

/// Sigmoid usefulness weight 1 / (1 + exp(-k (texture - (a snr + b)))).
double patch_weight(double texture, double snr, double a, double b, double k);

struct PatchWeightMap {
    int nx = 0;
    int ny = 0;
    int patch_w = 0;
    int patch_h = 0;
    std::vector<double> weights;  // [ny][nx]
    std::vector<double> snr;
    std::vector<double> texture;

    double at(int ix, int iy) const { return weights[static_cast<std::size_t>(iy) * nx + ix]; }
};

/// One patch per LiDAR zone; the image must divide evenly into nx x ny patches.
PatchWeightMap compute_patch_weights(const Image& gt_rgb, int nx, int ny, const LossConfig& config = {});

/// Same tiling with every weight set to `w`.
PatchWeightMap constant_patch_weights(int width, int height, int nx, int ny, double w);

/// Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5,
/// zero padding). When `grad_a` is non-null it receives d(SSIM)/d(a).
double ssim(const Image& a, const Image& b, Image* grad_a = nullptr);

struct RgbLossTerms {
    double l1 = 0.0;    // (1 - lambda) * sum_p w_p * mean|diff|
    double ssim = 0.0;  // lambda * (1 - SSIM) * mean_p w_p
};

/// `probe` records the sign pattern of the L1 residuals (the kinks of |.|).
RgbLossTerms rgb_loss(const Image& rendered, const Image& gt, const PatchWeightMap& weights, double lambda_ssim,
                      Image* grad = nullptr, StructureProbe* probe = nullptr);

/// KL(P || Q) of floored, normalized histograms.
double kl_divergence(std::span<const double> p, std::span<const double> q);

struct TransientLossTerms {
    double kl = 0.0;
    int empty = 0;  // zones skipped because one side had no mass
};

/// sum_p (1 - w_p) KL(rendered_p || gt_p). `grad` receives d/d(raw rendered counts).
TransientLossTerms transient_loss(const TransientImage& rendered, const TransientImage& gt,
                                  const PatchWeightMap& weights, TransientImage* grad = nullptr);

struct DepthNormalGrad {
    Image depth;
    Image normal;
};

/// lambda * mean over usable pixels of (1 - n_depth . N). Usable: interior,
/// whole 3x3 neighborhood covered, depth range within `discontinuity` of the center.
double depth_normal_reg(const RenderBuffers& buffers, const CameraModel& camera, double lambda_reg,
                        double coverage_epsilon, double discontinuity, DepthNormalGrad* grad = nullptr,
                        StructureProbe* probe = nullptr);

struct SparseLossTerms {
    double l1 = 0.0;
    int excluded = 0;  // rays without coverage or without a ground-truth value
};

/// sum over rays of |d_est - d_gt|. Rays with alpha below `coverage_epsilon`
/// or a non-positive ground truth are skipped.
SparseLossTerms sparse_lidar_loss(std::span<const PixelSample> rendered, std::span<const double> gt,
                                  double coverage_epsilon, std::vector<double>* grad = nullptr,
                                  StructureProbe* probe = nullptr);

struct LossBreakdown {
    double rgb_l1 = 0.0;
    double rgb_ssim = 0.0;
    double transient_kl = 0.0;
    double depth_normal_reg = 0.0;
    double sparse_l1 = 0.0;
    double total = 0.0;
    int empty_histograms = 0;
    int sparse_excluded = 0;

    double rgb() const { return rgb_l1 + rgb_ssim; }
    LossBreakdown& operator+=(const LossBreakdown& o);
};

/// total = rgb + lambda_lidar * transient + reg + lambda_sparse * sparse for the terms active in `mode`.
void finalize_total(LossBreakdown& b, LossMode mode, const LossConfig& config);

/// The RGB weights a mode trains with: the adaptive map, all 0.5, all 1 or all 0.
PatchWeightMap mode_weights(const PatchWeightMap& adaptive, LossMode mode);

struct ViewPrediction {
    RenderBuffers buffers;
    TransientImage transient;
    std::vector<PixelSample> sparse;
};

struct ViewTarget {
    Image rgb;
    TransientImage transient;
    std::vector<double> sparse_depth;
    PatchWeightMap weights;  // adaptive map from `rgb`
};

struct ViewLossGrad {
    RenderBuffers buffers;
    TransientImage transient;
    std::vector<double> sparse_depth;
};

/// Loss of one view in `mode`; fills `grad` with d(total)/d(prediction).
LossBreakdown view_loss(const ViewPrediction& pred, const ViewTarget& target, const CameraModel& camera,
                        LossMode mode, const LossConfig& config, const RasterConfig& raster,
                        ViewLossGrad* grad = nullptr, StructureProbe* probe = nullptr);

}  // namespace surfelfuse
