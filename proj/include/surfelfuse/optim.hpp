#pragma once

// Surfel optimization: loss + gradient for one training view, Adam-style
// updates with per-group rates, opacity pruning and the training loop.

#include "surfelfuse/core.hpp"
#include "surfelfuse/loss.hpp"
#include "surfelfuse/metrics.hpp"
#include "surfelfuse/raster.hpp"
#include "surfelfuse/sim.hpp"
#include "surfelfuse/transient.hpp"

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace surfelfuse {

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat parameter order per surfel: position(3), quaternion(4), scale(2), opacity(1), color.
struct ParamLayout {
    int color_count = 3;
    std::vector<std::size_t> offsets;  // one per surfel, plus the total at the end

    static constexpr int kPosition = 0;
    static constexpr int kRotation = 3;
    static constexpr int kScale = 7;
    static constexpr int kOpacity = 9;
    static constexpr int kColor = 10;

    std::size_t size() const { return offsets.empty() ? 0 : offsets.back(); }
};

ParamLayout make_layout(const Scene& scene);
std::vector<double> flatten(const Scene& scene);
/// Writes `params` into a copy of `shape` (which fixes the surfel count and SH degree).
Scene unflatten(std::span<const double> params, const Scene& shape);

/// Human-readable name of flat coordinate `i`, e.g. "surfel 3 scale[1]".
std::string describe_parameter(const ParamLayout& layout, std::size_t i);

struct OptimConfig {
    int iterations = 7000;
    int n_surfels = 2000;
    double init_scale_factor = 0.5;
    double lr_position = 2e-3;  // multiplied by the scene extent (bounds diagonal)
    double lr_rotation = 1e-3;
    double lr_scale = 5e-3;     // applied to log-scale
    double lr_opacity = 2.5e-2;
    double lr_color = 2.5e-3;
    double position_lr_final = 0.01;  // fraction of lr_position reached at the last iteration (exponential decay)
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-15;
    double prune_threshold = 0.02;
    int prune_every = 500;
    std::uint64_t seed = 1;
    LossMode mode = LossMode::Fusion;
    int rays_per_cone = 64;
    int log_every = 100;
    int eval_every = 0;  // 0: evaluate the test views only at the end
    LossConfig loss;
    RasterConfig raster;
    DepositWeight deposit = DepositWeight::Transmittance;
};

struct TrainView {
    CameraModel camera;
    ViewTarget target;
};

/// Builds training targets (with adaptive weights from the training RGB).
std::vector<TrainView> make_train_views(const DatasetBundle& bundle, const LossConfig& loss);

struct GradientResult {
    LossBreakdown loss;
    Scene gradient;  // same shape as the scene
};

/// Full render + loss + reverse pass for one view. `seed` drives the cone samples.
GradientResult loss_and_gradient(const Scene& scene, const TrainView& view, const LidarConfig& lidar,
                                 const OptimConfig& config, std::uint64_t seed, StructureProbe* probe = nullptr);

/// Loss only (same sampling as loss_and_gradient for the same seed).
LossBreakdown evaluate_loss(const Scene& scene, const TrainView& view, const LidarConfig& lidar,
                            const OptimConfig& config, std::uint64_t seed, StructureProbe* probe = nullptr);

struct GradCheckOptions {
    double step = 1e-6;        // absolute central-difference step for geometry and opacity
    double color_step = 1e-4;  // color enters nearly linearly; a larger step keeps round-off below tolerance
    double tolerance = 1e-3;   // relative error bound
    double abs_floor = 1e-9;   // denominators below this count as exact agreement near zero
};

struct GradCheckResult {
    std::size_t checked = 0;            // coordinates compared
    std::size_t passed = 0;
    std::size_t excluded_soft_bin = 0;  // stencil moved a ray hit across a bin boundary
    std::size_t excluded_other = 0;     // stencil changed a fragment set, order or coverage test
    double max_rel_error = 0.0;
    std::vector<std::string> failures;  // first few offenders, human readable
};

/// Analytic gradient of loss_and_gradient against fourth-order central
/// differences (steps +-h, +-2h) of evaluate_loss, coordinate by coordinate.
/// Coordinates whose stencil changes the render structure are excluded and counted.
GradCheckResult check_gradient(const Scene& scene, const TrainView& view, const LidarConfig& lidar,
                               const OptimConfig& config, std::uint64_t seed, const GradCheckOptions& options = {});

/// Throws NumericalError naming the first non-finite coordinate.
void check_finite(const Scene& gradient);

class AdamOptimizer {
public:
    AdamOptimizer(const Scene& scene, const OptimConfig& config, double scene_extent);

    /// One update. Quaternions are renormalized, opacity clamped to [0, 1], scale floored at 1e-6.
    void step(Scene& scene, const Scene& gradient, int iteration);

    /// Drops the moment estimates of surfels not in `keep` (indices ascending).
    void retain(const std::vector<std::size_t>& keep);

    double position_lr(int iteration) const;

private:
    OptimConfig config_;
    double extent_;
    std::vector<double> m_, v_;
    int color_count_;
    long long steps_ = 0;
};

/// Returns the indices kept (opacity >= threshold). Throws if nothing would remain.
std::vector<std::size_t> prune(Scene& scene, double opacity_threshold);

/// Uniform positions in [lo, hi], uniform rotations, isotropic scale
/// (|hi - lo| / cbrt(n)) * scale_factor, opacity 0.5, mid-gray color.
Scene init_scene(const Vec3& lo, const Vec3& hi, int n_surfels, std::uint64_t seed, int sh_degree = 0,
                 double scale_factor = 0.5);

struct TraceRow {
    int iteration = 0;
    LossBreakdown loss;
    std::size_t surfels = 0;
    std::optional<double> test_depth_mae;
};

struct OptimizeResult {
    Scene scene;
    std::vector<TraceRow> trace;
    MetricsReport metrics;  // on test views at the end
    bool diverged = false;
    int last_good_iteration = 0;
};

using CheckpointFn = std::function<void(int iteration, const Scene& scene, const std::vector<TraceRow>& trace)>;

/// init -> [loss_and_gradient -> step -> periodic prune] -> evaluate on test views.
OptimizeResult optimize(const DatasetBundle& bundle, const OptimConfig& config, const Vec3& lo, const Vec3& hi,
                        const CheckpointFn& on_checkpoint = {}, int checkpoint_every = 0);

/// Renders every test view and scores it against the clean ground truth.
MetricsReport evaluate_test_views(const Scene& scene, const DatasetBundle& bundle, const RasterConfig& raster);

}  // namespace surfelfuse
