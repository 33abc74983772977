#include "surfelfuse/raster.hpp"

#include "surfelfuse/surfel_math.hpp"
#include "view_prep.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace surfelfuse {
namespace detail {

namespace {

math::SurfelTerms<double> terms_for(const Surfel& s, int degree, const CameraModel& cam, double eps) {
    const double pos[3] = {s.position.x(), s.position.y(), s.position.z()};
    const double quat[4] = {s.rotation[0], s.rotation[1], s.rotation[2], s.rotation[3]};
    const double scale[2] = {s.scale.x(), s.scale.y()};
    return math::surfel_terms(pos, quat, scale, s.color_coeffs.data(), degree, cam, eps);
}

Box full_frame() {
    return {-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
            std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
}

}  // namespace

PreparedView prepare_view(const Scene& scene, const CameraModel& camera, const RasterConfig& config) {
    PreparedView view{camera, config, std::vector<Splat>(scene.size())};
    const double cut = config.cutoff_sigma;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const Surfel& s = scene.surfels[i];
        Splat& sp = view.splats[i];
        const auto t = terms_for(s, scene.sh_degree, camera, config.cov_epsilon);
        const auto& R = t.rotation;
        sp.position = s.position;
        sp.tangent_u = {R[0], R[3], R[6]};
        sp.tangent_v = {R[1], R[4], R[7]};
        sp.world_normal = {R[2], R[5], R[8]};
        sp.scale_u = s.scale.x();
        sp.scale_v = s.scale.y();
        sp.opacity = s.opacity;
        sp.center = {t.center[0], t.center[1], t.center[2]};
        sp.visible = sp.center.z() >= config.near_plane && std::isfinite(t.conic[0]) && std::isfinite(t.mean[0]);
        if (!sp.visible) continue;
        sp.mean = {t.mean[0], t.mean[1]};
        sp.conic[0] = t.conic[0];
        sp.conic[1] = t.conic[1];
        sp.conic[2] = t.conic[2];
        sp.normal = {t.normal[0], t.normal[1], t.normal[2]};
        sp.color = {t.color[0], t.color[1], t.color[2]};
        const double rx = cut * std::sqrt(t.cov[0]);
        const double ry = cut * std::sqrt(t.cov[2]);
        sp.splat_box = {sp.mean.x() - rx, sp.mean.y() - ry, sp.mean.x() + rx, sp.mean.y() + ry};

        // Bounding rectangle of the world-space cutoff ellipse, projected.
        Box box{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
        bool behind = false;
        for (int a = -1; a <= 1; a += 2) {
            for (int b = -1; b <= 1; b += 2) {
                const Vec3 corner =
                    s.position + (a * cut * sp.scale_u) * sp.tangent_u + (b * cut * sp.scale_v) * sp.tangent_v;
                const Vec3 pc = camera.to_camera(corner);
                if (pc.z() < config.near_plane) {
                    behind = true;
                    continue;
                }
                const double u = camera.fx * pc.x() / pc.z() + camera.cx;
                const double v = camera.fy * pc.y() / pc.z() + camera.cy;
                box.x0 = std::min(box.x0, u);
                box.x1 = std::max(box.x1, u);
                box.y0 = std::min(box.y0, v);
                box.y1 = std::max(box.y1, v);
            }
        }
        sp.ray_box = behind ? full_frame() : box;
    }
    return view;
}

TileBins bin_splats(const PreparedView& view, int tile_size) {
    TileBins bins;
    bins.tile_size = tile_size;
    bins.tiles_x = (view.camera.width + tile_size - 1) / tile_size;
    bins.tiles_y = (view.camera.height + tile_size - 1) / tile_size;
    const int n_tiles = bins.tiles_x * bins.tiles_y;
    std::vector<int> counts(n_tiles + 1, 0);

    auto tile_range = [&](const Box& b, int& tx0, int& ty0, int& tx1, int& ty1) {
        // Pixel centers sit at i + 0.5.
        const double px0 = std::ceil(b.x0 - 0.5), px1 = std::floor(b.x1 - 0.5);
        const double py0 = std::ceil(b.y0 - 0.5), py1 = std::floor(b.y1 - 0.5);
        if (px1 < 0 || py1 < 0 || px0 > view.camera.width - 1 || py0 > view.camera.height - 1 || px0 > px1 ||
            py0 > py1)
            return false;
        tx0 = static_cast<int>(std::max(0.0, px0)) / tile_size;
        ty0 = static_cast<int>(std::max(0.0, py0)) / tile_size;
        tx1 = static_cast<int>(std::min<double>(view.camera.width - 1, px1)) / tile_size;
        ty1 = static_cast<int>(std::min<double>(view.camera.height - 1, py1)) / tile_size;
        return true;
    };

    for (int pass = 0; pass < 2; ++pass) {
        std::vector<int> cursor;
        if (pass == 1) {
            for (int t = 0; t < n_tiles; ++t) counts[t + 1] += counts[t];
            bins.offsets = counts;
            bins.items.assign(counts[n_tiles], 0);
            cursor.assign(counts.begin(), counts.end() - 1);
        }
        for (std::size_t i = 0; i < view.splats.size(); ++i) {
            const Splat& sp = view.splats[i];
            if (!sp.visible) continue;
            int tx0, ty0, tx1, ty1;
            if (!tile_range(sp.splat_box, tx0, ty0, tx1, ty1)) continue;
            for (int ty = ty0; ty <= ty1; ++ty)
                for (int tx = tx0; tx <= tx1; ++tx) {
                    const int t = ty * bins.tiles_x + tx;
                    if (pass == 0)
                        ++counts[t + 1];
                    else
                        bins.items[cursor[t]++] = static_cast<int>(i);
                }
        }
    }
    return bins;
}

void gather_fragments(const PreparedView& view, double u, double v, std::span<const int> candidates,
                      std::vector<PixelFragment>& out) {
    out.clear();
    const auto& cfg = view.config;
    const double cut2 = cfg.cutoff_sigma * cfg.cutoff_sigma;
    const Vec3 ray = view.camera.pixel_ray(u, v);
    const double ray_norm = ray.norm();
    for (const int i : candidates) {
        const Splat& sp = view.splats[i];
        if (!sp.visible) continue;
        const double dx = u - sp.mean.x();
        const double dy = v - sp.mean.y();
        const double q = sp.conic[0] * dx * dx + 2.0 * sp.conic[1] * dx * dy + sp.conic[2] * dy * dy;
        if (!(q <= cut2)) continue;
        const double g = std::exp(-0.5 * q);
        const double alpha = sp.opacity * g;
        if (!(alpha > 0.0)) continue;
        PixelFragment f;
        f.alpha = alpha;
        f.gauss = g;
        f.index = i;
        const double den = sp.normal.dot(ray);
        if (std::abs(den) < cfg.parallel_epsilon * ray_norm) {
            f.depth = sp.center.z();
            f.fallback = true;
        } else {
            f.depth = sp.normal.dot(sp.center) / den;
        }
        if (!(f.depth >= cfg.near_plane)) continue;
        out.push_back(f);
    }
    std::sort(out.begin(), out.end(), [](const PixelFragment& a, const PixelFragment& b) {
        return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
    });
}

PixelSample blend(const PreparedView& view, std::span<const PixelFragment> frags) {
    const auto& cfg = view.config;
    PixelSample out;
    double T = 1.0;
    Vec3 c = Vec3::Zero(), n = Vec3::Zero();
    double d = 0.0;
    for (const auto& f : frags) {
        const Splat& sp = view.splats[f.index];
        const double w = T * f.alpha;
        c += w * sp.color;
        d += w * f.depth;
        n += w * sp.normal;
        T *= 1.0 - f.alpha;
        ++out.used;
        if (T < cfg.min_transmittance) break;
    }
    out.alpha_acc = 1.0 - T;
    out.color = c + T * cfg.background;
    if (out.alpha_acc >= cfg.coverage_epsilon) {
        out.depth = d / out.alpha_acc;
        out.normal = n / out.alpha_acc;
    }
    return out;
}

void blend_backward(const PreparedView& view, double u, double v, std::span<const PixelFragment> frags,
                    const PixelSample& fwd, const Vec3& g_color, double g_depth, const Vec3& g_normal,
                    double g_alpha, std::span<SurfelTermGrad> grads) {
    const int n = fwd.used;
    if (n == 0) return;
    const auto& cfg = view.config;
    const bool covered = fwd.alpha_acc >= cfg.coverage_epsilon;
    const double inv_a = covered ? 1.0 / fwd.alpha_acc : 0.0;

    // Transmittance in front of each used fragment.
    thread_local std::vector<double> trans;
    trans.resize(n);
    double T = 1.0;
    for (int k = 0; k < n; ++k) {
        trans[k] = T;
        T *= 1.0 - frags[k].alpha;
    }

    const Vec3 ray = view.camera.pixel_ray(u, v);
    double suffix = 0.0;
    for (int k = n - 1; k >= 0; --k) {
        const PixelFragment& f = frags[k];
        const Splat& sp = view.splats[f.index];
        SurfelTermGrad& g = grads[f.index];
        const double w = trans[k] * f.alpha;

        // d(loss)/d(w_k), with the outputs written as functions of the blend weights.
        double gw = g_color.dot(sp.color - cfg.background) + g_alpha;
        double g_frag_depth = 0.0;
        Vec3 g_frag_normal = Vec3::Zero();
        if (covered) {
            gw += g_depth * (f.depth - fwd.depth) * inv_a + g_normal.dot(sp.normal - fwd.normal) * inv_a;
            g_frag_depth = g_depth * w * inv_a;
            g_frag_normal = g_normal * (w * inv_a);
        }
        for (int c = 0; c < 3; ++c) {
            g.color[c] += g_color[c] * w;
            g.normal[c] += g_frag_normal[c];
        }

        const double g_alpha_k = trans[k] * (gw - suffix);
        suffix = gw * f.alpha + (1.0 - f.alpha) * suffix;

        g.opacity += g_alpha_k * f.gauss;
        const double dq = -0.5 * f.gauss * sp.opacity * g_alpha_k;
        const double dx = u - sp.mean.x();
        const double dy = v - sp.mean.y();
        g.conic[0] += dq * dx * dx;
        g.conic[1] += dq * 2.0 * dx * dy;
        g.conic[2] += dq * dy * dy;
        g.mean[0] -= dq * (2.0 * sp.conic[0] * dx + 2.0 * sp.conic[1] * dy);
        g.mean[1] -= dq * (2.0 * sp.conic[1] * dx + 2.0 * sp.conic[2] * dy);

        if (g_frag_depth != 0.0) {
            if (f.fallback) {
                g.center[2] += g_frag_depth;
            } else {
                const double den = sp.normal.dot(ray);
                for (int c = 0; c < 3; ++c) {
                    g.center[c] += g_frag_depth * sp.normal[c] / den;
                    g.normal[c] += g_frag_depth * (sp.center[c] - f.depth * ray[c]) / den;
                }
            }
        }
    }
}

std::uint64_t fragment_signature(std::span<const PixelFragment> frags, int used, bool covered) {
    std::uint64_t h = StructureProbe::mix(static_cast<std::uint64_t>(frags.size()) * 31 + used * 2 + covered);
    for (const auto& f : frags) h = StructureProbe::combine(h, static_cast<std::uint64_t>(f.index) * 2 + f.fallback);
    return h;
}

}  // namespace detail

using detail::PixelFragment;

std::optional<ProjectedSurfel> project_surfel(const Surfel& surfel, int sh_degree, const CameraModel& camera,
                                              const RasterConfig& config) {
    Scene one{sh_degree, {surfel}};
    const auto view = detail::prepare_view(one, camera, config);
    const auto& sp = view.splats[0];
    if (!sp.visible) return std::nullopt;
    ProjectedSurfel p;
    p.mean_2d = sp.mean;
    p.conic << sp.conic[0], sp.conic[1], sp.conic[1], sp.conic[2];
    const Mat2 reg = p.conic.inverse();
    p.cov_2d = reg - config.cov_epsilon * Mat2::Identity();
    p.cam_depth = sp.center.z();
    p.plane_point = sp.center;
    p.plane_normal = sp.normal;
    const Mat3 R = quaternion_to_rotation(surfel.rotation);
    p.camera_rotation = camera.rotation * R;
    p.color = sp.color;
    p.opacity = surfel.opacity;
    p.source = 0;
    return p;
}

double alpha_at(const Vec2& u, const ProjectedSurfel& proj, double opacity, const RasterConfig& config) {
    const Vec2 d = u - proj.mean_2d;
    const double q = d.dot(proj.conic * d);
    if (!(q <= config.cutoff_sigma * config.cutoff_sigma)) return 0.0;
    return opacity * std::exp(-0.5 * q);
}

RayDepth ray_surfel_depth(const Vec2& u, const ProjectedSurfel& proj, const CameraModel& camera,
                          const RasterConfig& config) {
    const Vec3 ray = camera.pixel_ray(u.x(), u.y());
    const double den = proj.plane_normal.dot(ray);
    if (std::abs(den) < config.parallel_epsilon * ray.norm()) return {proj.cam_depth, true};
    return {proj.plane_normal.dot(proj.plane_point) / den, false};
}

RayDepth ray_surfel_depth(const Vec2& u, const Surfel& surfel, const CameraModel& camera, const RasterConfig& config) {
    const Mat3 R = quaternion_to_rotation(surfel.rotation);
    const Vec3 p = camera.to_camera(surfel.position);
    const Vec3 n = camera.rotation * R.col(2);
    const Vec3 ray = camera.pixel_ray(u.x(), u.y());
    const double den = n.dot(ray);
    if (std::abs(den) < config.parallel_epsilon * ray.norm()) return {p.z(), true};
    return {n.dot(p) / den, false};
}

double linearized_surfel_depth(const Vec2& u, const ProjectedSurfel& proj, const CameraModel& camera) {
    const Vec3& p = proj.plane_point;
    const double iz = 1.0 / p.z();
    Eigen::Matrix<double, 2, 3> J;
    J << camera.fx * iz, 0.0, -camera.fx * p.x() * iz * iz, 0.0, camera.fy * iz, -camera.fy * p.y() * iz * iz;
    const Eigen::Matrix<double, 3, 2> tangents = proj.camera_rotation.leftCols<2>();
    const Mat2 j_pr = J * tangents;
    const Vec2 local = j_pr.inverse() * (u - proj.mean_2d);
    return proj.cam_depth + proj.camera_rotation.row(2).head<2>().dot(local);
}

PixelSample composite_fragments(std::span<const Fragment> sorted, const RasterConfig& config) {
    PixelSample out;
    double T = 1.0;
    Vec3 c = Vec3::Zero(), n = Vec3::Zero();
    double d = 0.0;
    for (const auto& f : sorted) {
        const double w = T * f.alpha;
        c += w * f.color;
        d += w * f.depth;
        n += w * f.normal;
        T *= 1.0 - f.alpha;
        ++out.used;
        if (T < config.min_transmittance) break;
    }
    out.alpha_acc = 1.0 - T;
    out.color = c + T * config.background;
    if (out.alpha_acc >= config.coverage_epsilon) {
        out.depth = d / out.alpha_acc;
        out.normal = n / out.alpha_acc;
    }
    return out;
}

PixelSample composite_pixel(const Vec2& u, std::span<const ProjectedSurfel> surfels, const CameraModel& camera,
                            const RasterConfig& config) {
    std::vector<Fragment> frags;
    for (std::size_t i = 0; i < surfels.size(); ++i) {
        const auto& p = surfels[i];
        const double a = alpha_at(u, p, p.opacity, config);
        if (!(a > 0.0)) continue;
        const RayDepth d = ray_surfel_depth(u, p, camera, config);
        if (!(d.depth >= config.near_plane)) continue;
        frags.push_back({a, d.depth, p.color, p.plane_normal, p.source >= 0 ? p.source : static_cast<int>(i)});
    }
    std::sort(frags.begin(), frags.end(), [](const Fragment& a, const Fragment& b) {
        return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
    });
    return composite_fragments(frags, config);
}

namespace {

void store(RenderBuffers& out, int x, int y, const PixelSample& s) {
    for (int c = 0; c < 3; ++c) {
        out.color.at(x, y, c) = s.color[c];
        out.normal.at(x, y, c) = s.normal[c];
    }
    out.depth.at(x, y) = s.depth;
    out.alpha.at(x, y) = s.alpha_acc;
}

}  // namespace

RenderBuffers render_image(const Scene& scene, const CameraModel& camera, const RasterConfig& config,
                           StructureProbe* probe) {
    camera.validate();
    const auto view = detail::prepare_view(scene, camera, config);
    const auto bins = detail::bin_splats(view, config.tile_size);
    RenderBuffers out(camera.width, camera.height);

#pragma omp parallel for schedule(dynamic, 1)
    for (int y = 0; y < camera.height; ++y) {
        std::vector<PixelFragment> frags;
        const int ty = y / bins.tile_size;
        for (int x = 0; x < camera.width; ++x) {
            const auto candidates = bins.tile(x / bins.tile_size, ty);
            detail::gather_fragments(view, x + 0.5, y + 0.5, candidates, frags);
            const PixelSample s = detail::blend(view, frags);
            store(out, x, y, s);
            if (probe) {
                const std::uint64_t sig = detail::fragment_signature(
                    std::span(frags).first(s.used), s.used, s.alpha_acc >= config.coverage_epsilon);
                probe->add_other(StructureProbe::combine(sig, static_cast<std::uint64_t>(y) * camera.width + x));
            }
        }
    }
    return out;
}

RenderBuffers render_image_reference(const Scene& scene, const CameraModel& camera, const RasterConfig& config) {
    camera.validate();
    const auto view = detail::prepare_view(scene, camera, config);
    std::vector<int> all(scene.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    RenderBuffers out(camera.width, camera.height);
    std::vector<PixelFragment> frags;
    for (int y = 0; y < camera.height; ++y)
        for (int x = 0; x < camera.width; ++x) {
            detail::gather_fragments(view, x + 0.5, y + 0.5, all, frags);
            store(out, x, y, detail::blend(view, frags));
        }
    return out;
}

namespace {

std::vector<int> point_candidates(const detail::PreparedView& view, double u, double v) {
    std::vector<int> c;
    for (std::size_t i = 0; i < view.splats.size(); ++i)
        if (view.splats[i].visible && view.splats[i].splat_box.contains(u, v)) c.push_back(static_cast<int>(i));
    return c;
}

}  // namespace

std::vector<PixelSample> render_points(const Scene& scene, const CameraModel& camera, std::span<const Vec2> points,
                                       const RasterConfig& config, StructureProbe* probe) {
    const auto view = detail::prepare_view(scene, camera, config);
    std::vector<PixelSample> out(points.size());
    std::vector<PixelFragment> frags;
    for (std::size_t k = 0; k < points.size(); ++k) {
        const auto cand = point_candidates(view, points[k].x(), points[k].y());
        detail::gather_fragments(view, points[k].x(), points[k].y(), cand, frags);
        out[k] = detail::blend(view, frags);
        if (probe)
            probe->add_other(StructureProbe::combine(
                detail::fragment_signature(std::span(frags).first(out[k].used), out[k].used,
                                           out[k].alpha_acc >= config.coverage_epsilon),
                0xabc000 + k));
    }
    return out;
}

void render_image_backward(const Scene& scene, const CameraModel& camera, const RasterConfig& config,
                           const RenderBuffers& upstream, std::span<SurfelTermGrad> grads) {
    const auto view = detail::prepare_view(scene, camera, config);
    const auto bins = detail::bin_splats(view, config.tile_size);

    // One private accumulator per tile row, summed in a fixed order so the
    // result does not depend on the thread count.
    const int chunks = bins.tiles_y;
    std::vector<std::vector<SurfelTermGrad>> partial(chunks, std::vector<SurfelTermGrad>(scene.size()));

#pragma omp parallel for schedule(dynamic, 1)
    for (int chunk = 0; chunk < chunks; ++chunk) {
        std::vector<PixelFragment> frags;
        auto& acc = partial[chunk];
        const int y_end = std::min(camera.height, (chunk + 1) * bins.tile_size);
        for (int y = chunk * bins.tile_size; y < y_end; ++y)
            for (int x = 0; x < camera.width; ++x) {
                const Vec3 gc(upstream.color.at(x, y, 0), upstream.color.at(x, y, 1), upstream.color.at(x, y, 2));
                const Vec3 gn(upstream.normal.at(x, y, 0), upstream.normal.at(x, y, 1),
                              upstream.normal.at(x, y, 2));
                const double gd = upstream.depth.at(x, y);
                const double ga = upstream.alpha.at(x, y);
                if (gc.isZero(0.0) && gn.isZero(0.0) && gd == 0.0 && ga == 0.0) continue;
                detail::gather_fragments(view, x + 0.5, y + 0.5, bins.tile(x / bins.tile_size, chunk), frags);
                const PixelSample s = detail::blend(view, frags);
                detail::blend_backward(view, x + 0.5, y + 0.5, frags, s, gc, gd, gn, ga, acc);
            }
    }
    for (const auto& acc : partial)
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += acc[i];
}

void render_points_backward(const Scene& scene, const CameraModel& camera, std::span<const Vec2> points,
                            std::span<const double> depth_grads, const RasterConfig& config,
                            std::span<SurfelTermGrad> grads) {
    const auto view = detail::prepare_view(scene, camera, config);
    std::vector<PixelFragment> frags;
    for (std::size_t k = 0; k < points.size(); ++k) {
        if (depth_grads[k] == 0.0) continue;
        const auto cand = point_candidates(view, points[k].x(), points[k].y());
        detail::gather_fragments(view, points[k].x(), points[k].y(), cand, frags);
        const PixelSample s = detail::blend(view, frags);
        detail::blend_backward(view, points[k].x(), points[k].y(), frags, s, Vec3::Zero(), depth_grads[k],
                               Vec3::Zero(), 0.0, grads);
    }
}

}  // namespace surfelfuse
