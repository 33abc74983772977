#include "surfelfuse/optim.hpp"

#include "surfelfuse/gradient.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace surfelfuse {

ParamLayout make_layout(const Scene& scene) {
    ParamLayout layout;
    layout.color_count = sh_coeff_count(scene.sh_degree);
    layout.offsets.reserve(scene.size() + 1);
    std::size_t off = 0;
    for (const auto& s : scene.surfels) {
        layout.offsets.push_back(off);
        off += ParamLayout::kColor + s.color_coeffs.size();
    }
    layout.offsets.push_back(off);
    return layout;
}

std::vector<double> flatten(const Scene& scene) {
    std::vector<double> p;
    p.reserve(make_layout(scene).size());
    for (const auto& s : scene.surfels) {
        p.insert(p.end(), s.position.data(), s.position.data() + 3);
        p.insert(p.end(), s.rotation.data(), s.rotation.data() + 4);
        p.insert(p.end(), s.scale.data(), s.scale.data() + 2);
        p.push_back(s.opacity);
        p.insert(p.end(), s.color_coeffs.begin(), s.color_coeffs.end());
    }
    return p;
}

Scene unflatten(std::span<const double> params, const Scene& shape) {
    Scene out = shape;
    const ParamLayout layout = make_layout(shape);
    if (params.size() != layout.size()) throw InvalidParameter("unflatten: parameter count mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double* p = params.data() + layout.offsets[i];
        Surfel& s = out.surfels[i];
        s.position = Vec3(p[0], p[1], p[2]);
        s.rotation = Vec4(p[3], p[4], p[5], p[6]);
        s.scale = Vec2(p[7], p[8]);
        s.opacity = p[9];
        std::copy(p + ParamLayout::kColor, p + ParamLayout::kColor + s.color_coeffs.size(), s.color_coeffs.begin());
    }
    return out;
}

std::string describe_parameter(const ParamLayout& layout, std::size_t i) {
    const auto it = std::upper_bound(layout.offsets.begin(), layout.offsets.end(), i);
    const std::size_t surfel = static_cast<std::size_t>(it - layout.offsets.begin()) - 1;
    const std::size_t k = i - layout.offsets[surfel];
    std::string name;
    if (k < 3) name = "position[" + std::to_string(k) + "]";
    else if (k < 7) name = "rotation[" + std::to_string(k - 3) + "]";
    else if (k < 9) name = "scale[" + std::to_string(k - 7) + "]";
    else if (k == 9) name = "opacity";
    else name = "color[" + std::to_string(k - 10) + "]";
    return "surfel " + std::to_string(surfel) + " " + name;
}

std::vector<TrainView> make_train_views(const DatasetBundle& bundle, const LossConfig& loss) {
    std::vector<TrainView> out;
    const auto& lidar = bundle.config.lidar;
    for (const DatasetView* v : bundle.train_views()) {
        TrainView t;
        t.camera = v->gt.camera;
        t.target.rgb = v->rgb;
        t.target.transient = v->gt.transient;
        t.target.sparse_depth = v->gt.sparse_depth;
        t.target.weights = compute_patch_weights(v->rgb, lidar.nx, lidar.ny, loss);
        out.push_back(std::move(t));
    }
    return out;
}

namespace {

struct Forward {
    ViewPrediction pred;
    LidarConfig lidar;
    TransientConfig transient;
    std::vector<Vec2> points;
};

Forward run_forward(const Scene& scene, const TrainView& view, const LidarConfig& lidar, const OptimConfig& cfg,
                    std::uint64_t seed, StructureProbe* probe) {
    Forward f;
    f.lidar = lidar;
    f.lidar.rays_per_cone = cfg.rays_per_cone;
    f.transient.deposit = cfg.deposit;
    f.transient.raster = cfg.raster;
    f.pred.buffers = render_image(scene, view.camera, cfg.raster, probe);
    if (uses_transient(cfg.mode))
        f.pred.transient = render_transient_image(scene, f.lidar, view.camera, seed, f.transient, nullptr, probe);
    if (uses_sparse(cfg.mode)) {
        f.points = zone_center_points(lidar, view.camera);
        f.pred.sparse = render_points(scene, view.camera, f.points, cfg.raster, probe);
    }
    return f;
}

}  // namespace

LossBreakdown evaluate_loss(const Scene& scene, const TrainView& view, const LidarConfig& lidar,
                            const OptimConfig& cfg, std::uint64_t seed, StructureProbe* probe) {
    const Forward f = run_forward(scene, view, lidar, cfg, seed, probe);
    return view_loss(f.pred, view.target, view.camera, cfg.mode, cfg.loss, cfg.raster, nullptr, probe);
}

GradientResult loss_and_gradient(const Scene& scene, const TrainView& view, const LidarConfig& lidar,
                                 const OptimConfig& cfg, std::uint64_t seed, StructureProbe* probe) {
    const Forward f = run_forward(scene, view, lidar, cfg, seed, probe);
    ViewLossGrad g;
    GradientResult out;
    out.loss = view_loss(f.pred, view.target, view.camera, cfg.mode, cfg.loss, cfg.raster, &g, probe);

    std::vector<SurfelTermGrad> terms(scene.size());
    render_image_backward(scene, view.camera, cfg.raster, g.buffers, terms);
    if (uses_transient(cfg.mode))
        render_transient_backward(scene, f.lidar, view.camera, seed, f.transient, g.transient, terms);
    if (uses_sparse(cfg.mode))
        render_points_backward(scene, view.camera, f.points, g.sparse_depth, cfg.raster, terms);
    out.gradient = zero_gradient(scene);
    accumulate_parameter_gradients(scene, view.camera, cfg.raster, terms, out.gradient);
    return out;
}

GradCheckResult check_gradient(const Scene& scene, const TrainView& view, const LidarConfig& lidar,
                               const OptimConfig& cfg, std::uint64_t seed, const GradCheckOptions& opt) {
    const GradientResult analytic = loss_and_gradient(scene, view, lidar, cfg, seed);
    const std::vector<double> g = flatten(analytic.gradient);
    const std::vector<double> p0 = flatten(scene);
    const ParamLayout layout = make_layout(scene);

    StructureProbe base;
    evaluate_loss(scene, view, lidar, cfg, seed, &base);

    GradCheckResult out;
    std::vector<double> p = p0;
    for (std::size_t i = 0; i < p0.size(); ++i) {
        const std::size_t surfel =
            static_cast<std::size_t>(std::upper_bound(layout.offsets.begin(), layout.offsets.end(), i) -
                                     layout.offsets.begin()) - 1;
        const bool is_color = i - layout.offsets[surfel] >= static_cast<std::size_t>(ParamLayout::kColor);
        const double h = is_color ? opt.color_step : opt.step;
        double values[4];
        bool soft_bin_changed = false, other_changed = false;
        const double offsets[4] = {-2.0, -1.0, 1.0, 2.0};
        for (int k = 0; k < 4; ++k) {
            StructureProbe probe;
            p[i] = p0[i] + offsets[k] * h;
            values[k] = evaluate_loss(unflatten(p, scene), view, lidar, cfg, seed, &probe).total;
            soft_bin_changed |= probe.soft_bin != base.soft_bin;
            other_changed |= probe.other != base.other;
        }
        p[i] = p0[i];
        if (soft_bin_changed) {
            ++out.excluded_soft_bin;
            continue;
        }
        if (other_changed) {
            ++out.excluded_other;
            continue;
        }
        const double numeric = (values[0] - 8.0 * values[1] + 8.0 * values[2] - values[3]) / (12.0 * h);
        const double denom = std::max(std::abs(numeric), std::abs(g[i]));
        const double rel = denom < opt.abs_floor ? 0.0 : std::abs(numeric - g[i]) / denom;
        ++out.checked;
        out.max_rel_error = std::max(out.max_rel_error, rel);
        if (rel < opt.tolerance) {
            ++out.passed;
        } else if (out.failures.size() < 10) {
            char buf[96];
            std::snprintf(buf, sizeof buf, ": analytic %.6g numeric %.6g", g[i], numeric);
            out.failures.push_back(describe_parameter(layout, i) + buf);
        }
    }
    return out;
}

void check_finite(const Scene& gradient) {
    const auto flat = flatten(gradient);
    for (std::size_t i = 0; i < flat.size(); ++i)
        if (!std::isfinite(flat[i]))
            throw NumericalError("non-finite gradient at " + describe_parameter(make_layout(gradient), i));
}

AdamOptimizer::AdamOptimizer(const Scene& scene, const OptimConfig& config, double scene_extent)
    : config_(config), extent_(scene_extent), color_count_(sh_coeff_count(scene.sh_degree)) {
    if (!(config.lr_position > 0 && config.lr_rotation > 0 && config.lr_scale > 0 && config.lr_opacity > 0 &&
          config.lr_color > 0))
        throw InvalidParameter("learning rates must be positive");
    const std::size_t n = make_layout(scene).size();
    m_.assign(n, 0.0);
    v_.assign(n, 0.0);
}

double AdamOptimizer::position_lr(int iteration) const {
    const double base = config_.lr_position * extent_;
    if (config_.iterations <= 1) return base;
    const double t = std::clamp(static_cast<double>(iteration) / (config_.iterations - 1), 0.0, 1.0);
    return base * std::pow(config_.position_lr_final, t);
}

void AdamOptimizer::step(Scene& scene, const Scene& gradient, int iteration) {
    const std::size_t stride = ParamLayout::kColor + color_count_;
    if (m_.size() != scene.size() * stride || gradient.size() != scene.size())
        throw InvalidParameter("AdamOptimizer::step: shape mismatch");
    ++steps_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    const double lr_pos = position_lr(iteration);

    auto update = [&](std::size_t k, double g, double lr) {
        m_[k] = b1 * m_[k] + (1.0 - b1) * g;
        v_[k] = b2 * v_[k] + (1.0 - b2) * g * g;
        return lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + config_.adam_epsilon);
    };

    for (std::size_t i = 0; i < scene.size(); ++i) {
        Surfel& s = scene.surfels[i];
        const Surfel& g = gradient.surfels[i];
        const std::size_t base = i * stride;
        for (int k = 0; k < 3; ++k) s.position[k] -= update(base + k, g.position[k], lr_pos);
        for (int k = 0; k < 4; ++k) s.rotation[k] -= update(base + 3 + k, g.rotation[k], config_.lr_rotation);
        // Scale moves multiplicatively: Adam on log(s), whose gradient is g * s.
        for (int k = 0; k < 2; ++k)
            s.scale[k] *= std::exp(-update(base + 7 + k, g.scale[k] * s.scale[k], config_.lr_scale));
        s.opacity -= update(base + 9, g.opacity, config_.lr_opacity);
        for (int k = 0; k < color_count_; ++k)
            s.color_coeffs[k] -= update(base + 10 + k, g.color_coeffs[k], config_.lr_color);

        const double qn = s.rotation.norm();
        s.rotation = qn > 0.0 ? Vec4(s.rotation / qn) : Vec4(1.0, 0.0, 0.0, 0.0);
        s.opacity = std::clamp(s.opacity, 0.0, 1.0);
        s.scale = s.scale.cwiseMax(1e-6);
    }
}

void AdamOptimizer::retain(const std::vector<std::size_t>& keep) {
    const std::size_t stride = ParamLayout::kColor + color_count_;
    std::vector<double> m, v;
    m.reserve(keep.size() * stride);
    v.reserve(keep.size() * stride);
    for (std::size_t i : keep) {
        m.insert(m.end(), m_.begin() + i * stride, m_.begin() + (i + 1) * stride);
        v.insert(v.end(), v_.begin() + i * stride, v_.begin() + (i + 1) * stride);
    }
    m_ = std::move(m);
    v_ = std::move(v);
}

std::vector<std::size_t> prune(Scene& scene, double opacity_threshold) {
    if (!(opacity_threshold >= 0.0 && opacity_threshold < 1.0))
        throw InvalidParameter("prune: threshold must be in [0, 1)");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < scene.size(); ++i)
        if (scene.surfels[i].opacity >= opacity_threshold) keep.push_back(i);
    if (keep.empty()) throw NumericalError("prune would remove every surfel");
    if (keep.size() == scene.size()) return keep;
    std::vector<Surfel> kept;
    kept.reserve(keep.size());
    for (std::size_t i : keep) kept.push_back(std::move(scene.surfels[i]));
    scene.surfels = std::move(kept);
    return keep;
}

Scene init_scene(const Vec3& lo, const Vec3& hi, int n, std::uint64_t seed, int sh_degree, double scale_factor) {
    if (n < 1) throw InvalidParameter("init_scene: need at least one surfel");
    Scene scene;
    scene.sh_degree = sh_degree;
    std::mt19937_64 rng(StructureProbe::mix(seed));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double s = (hi - lo).norm() / std::cbrt(static_cast<double>(n)) * scale_factor;
    scene.surfels.resize(n);
    for (auto& surfel : scene.surfels) {
        for (int k = 0; k < 3; ++k) surfel.position[k] = lo[k] + u(rng) * (hi[k] - lo[k]);
        // Uniform random rotation (Shoemake).
        const double u1 = u(rng), u2 = u(rng), u3 = u(rng);
        const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
        const double t2 = 2.0 * std::numbers::pi * u2, t3 = 2.0 * std::numbers::pi * u3;
        surfel.rotation = Vec4(b * std::cos(t3), a * std::sin(t2), a * std::cos(t2), b * std::sin(t3));
        surfel.scale = Vec2(s, s);
        surfel.opacity = 0.5;
        surfel.color_coeffs.assign(sh_coeff_count(sh_degree), 0.0);
    }
    return scene;
}

MetricsReport evaluate_test_views(const Scene& scene, const DatasetBundle& bundle, const RasterConfig& raster) {
    std::vector<ViewMetrics> views;
    for (const DatasetView* v : bundle.test_views()) {
        const auto buffers = render_image(scene, v->gt.camera, raster);
        views.push_back(compute_metrics(buffers, v->gt.rgb, v->gt.depth, v->gt.normal, raster.coverage_epsilon));
    }
    return aggregate(std::move(views));
}

OptimizeResult optimize(const DatasetBundle& bundle, const OptimConfig& cfg, const Vec3& lo, const Vec3& hi,
                        const CheckpointFn& on_checkpoint, int checkpoint_every) {
    if (cfg.iterations < 1) throw InvalidParameter("iterations must be >= 1");
    const auto train = make_train_views(bundle, cfg.loss);
    if (train.empty()) throw InvalidParameter("dataset has no training views");

    OptimizeResult result;
    Scene scene = init_scene(lo, hi, cfg.n_surfels, cfg.seed, 0, cfg.init_scale_factor);
    AdamOptimizer adam(scene, cfg, (hi - lo).norm());
    Scene last_good = scene;

    for (int it = 0; it < cfg.iterations; ++it) {
        const TrainView& view = train[static_cast<std::size_t>(it) % train.size()];
        GradientResult g;
        bool ok = true;
        try {
            g = loss_and_gradient(scene, view, bundle.config.lidar, cfg, StructureProbe::combine(cfg.seed, it));
            if (!std::isfinite(g.loss.total)) throw NumericalError("non-finite loss");
            check_finite(g.gradient);
        } catch (const NumericalError&) {
            ok = false;
        }
        if (!ok) {
            result.diverged = true;
            scene = last_good;
            break;
        }
        last_good = scene;
        result.last_good_iteration = it;

        TraceRow row;
        row.iteration = it;
        row.loss = g.loss;
        adam.step(scene, g.gradient, it);
        if (cfg.prune_every > 0 && (it + 1) % cfg.prune_every == 0 && it + 1 < cfg.iterations)
            adam.retain(prune(scene, cfg.prune_threshold));
        row.surfels = scene.size();
        if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0)
            row.test_depth_mae = evaluate_test_views(scene, bundle, cfg.raster).mean.depth_mae;
        result.trace.push_back(row);
        if (on_checkpoint && checkpoint_every > 0 && (it + 1) % checkpoint_every == 0) on_checkpoint(it + 1, scene, result.trace);
    }
    if (!result.diverged) result.last_good_iteration = cfg.iterations;
    result.scene = std::move(scene);
    result.metrics = evaluate_test_views(result.scene, bundle, cfg.raster);
    return result;
}

}  // namespace surfelfuse
