#include "surfelfuse/transient.hpp"

#include "view_prep.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace surfelfuse {

namespace {

int largest_divisor_at_most_sqrt(int n) {
    int best = 1;
    for (int d = 1; d * d <= n; ++d)
        if (n % d == 0) best = d;
    return best;
}

struct RayHit {
    double t = 0.0;
    double alpha = 0.0;
    double gauss = 0.0;
    double opacity = 0.0;
    double a = 0.0;
    double b = 0.0;
    int index = 0;
};

void gather_hits(const detail::PreparedView& view, const Vec3& origin, const Vec3& dir, const Vec2& pixel,
                 std::span<const int> candidates, std::vector<RayHit>& hits) {
    hits.clear();
    const auto& cfg = view.config;
    const double cut2 = cfg.cutoff_sigma * cfg.cutoff_sigma;
    for (const int i : candidates) {
        const detail::Splat& sp = view.splats[i];
        if (!sp.visible || !sp.ray_box.contains(pixel.x(), pixel.y())) continue;
        if (!(sp.scale_u > 0.0) || !(sp.scale_v > 0.0)) continue;
        const double den = sp.world_normal.dot(dir);
        if (std::abs(den) < cfg.parallel_epsilon) continue;
        const double t = sp.world_normal.dot(sp.position - origin) / den;
        if (!(t >= cfg.near_plane)) continue;
        const Vec3 offset = origin + t * dir - sp.position;
        const double a = sp.tangent_u.dot(offset);
        const double b = sp.tangent_v.dot(offset);
        const double q = a * a / (sp.scale_u * sp.scale_u) + b * b / (sp.scale_v * sp.scale_v);
        if (!(q <= cut2)) continue;
        const double g = std::exp(-0.5 * q);
        hits.push_back({t, sp.opacity * g, g, sp.opacity, a, b, i});
    }
    std::sort(hits.begin(), hits.end(), [](const RayHit& x, const RayHit& y) {
        return x.t < y.t || (x.t == y.t && x.index < y.index);
    });
}

double deposit_weight(const RayHit& h, double transmittance, DepositWeight mode) {
    return mode == DepositWeight::Transmittance ? transmittance * h.alpha : h.opacity;
}

/// Deposits one ray into `hist`; returns how many hits were used.
int deposit_ray(std::span<const RayHit> hits, double ray_weight, const LidarConfig& lidar,
                const TransientConfig& cfg, std::span<double> hist, TransientStats* stats) {
    double T = 1.0;
    int used = 0;
    for (const auto& h : hits) {
        const double kappa = ray_weight * deposit_weight(h, T, cfg.deposit);
        const BinAssignment bin = bin_index(h.t, lidar.bin_width_s, lidar.n_bins);
        double landed = 0.0;
        if (!bin.out_of_range) {
            hist[bin.lower_bin] += kappa * bin.w1;
            landed += kappa * bin.w1;
            if (bin.lower_bin + 1 < lidar.n_bins) {
                hist[bin.lower_bin + 1] += kappa * bin.w2;
                landed += kappa * bin.w2;
            }
        }
        if (stats) {
            stats->deposited += landed;
            stats->dropped += kappa - landed;
            if (kappa - landed > 0.0) ++stats->dropped_count;
        }
        ++used;
        if (cfg.deposit == DepositWeight::Transmittance) {
            T *= 1.0 - h.alpha;
            if (T < cfg.raster.min_transmittance) break;
        }
    }
    return used;
}

void deposit_ray_backward(const detail::PreparedView& view, std::span<const RayHit> hits, int used,
                          const Vec3& origin, const Vec3& dir, double ray_weight, const LidarConfig& lidar,
                          const TransientConfig& cfg, std::span<const double> upstream,
                          std::span<SurfelTermGrad> grads) {
    const double tau_per_meter = 2.0 / (kSpeedOfLight * lidar.bin_width_s);
    auto g_bin = [&](int b) { return b >= 0 && b < lidar.n_bins ? upstream[b] : 0.0; };
    const bool transmittance = cfg.deposit == DepositWeight::Transmittance;

    thread_local std::vector<double> trans;
    trans.resize(used);
    double T = 1.0;
    for (int k = 0; k < used; ++k) {
        trans[k] = T;
        T *= 1.0 - hits[k].alpha;
    }

    double suffix = 0.0;
    for (int k = used - 1; k >= 0; --k) {
        const RayHit& h = hits[k];
        const detail::Splat& sp = view.splats[h.index];
        SurfelTermGrad& g = grads[h.index];
        const BinAssignment bin = bin_index(h.t, lidar.bin_width_s, lidar.n_bins);
        double g_kappa = 0.0, g_t = 0.0;
        if (!bin.out_of_range) {
            const double lo = g_bin(bin.lower_bin), hi = g_bin(bin.lower_bin + 1);
            g_kappa = ray_weight * (lo * bin.w1 + hi * bin.w2);
            const double kappa = deposit_weight(h, trans[k], cfg.deposit);
            g_t = ray_weight * kappa * (hi - lo) * tau_per_meter;
        }

        double g_alpha = 0.0;
        if (transmittance) {
            g_alpha = trans[k] * (g_kappa - suffix);
            suffix = g_kappa * h.alpha + (1.0 - h.alpha) * suffix;
            g.opacity += g_alpha * h.gauss;
        } else {
            g.opacity += g_kappa;
        }

        // Footprint: q = a^2/su^2 + b^2/sv^2 with (a, b) the in-plane hit offset.
        const Vec3 offset = origin + h.t * dir - sp.position;
        double g_a = 0.0, g_b = 0.0;
        if (g_alpha != 0.0) {
            const double dq = -0.5 * h.gauss * sp.opacity * g_alpha;
            const double su2 = sp.scale_u * sp.scale_u, sv2 = sp.scale_v * sp.scale_v;
            g_a = dq * 2.0 * h.a / su2;
            g_b = dq * 2.0 * h.b / sv2;
            g.scale[0] += dq * (-2.0 * h.a * h.a / (su2 * sp.scale_u));
            g.scale[1] += dq * (-2.0 * h.b * h.b / (sv2 * sp.scale_v));
        }
        const Vec3 g_offset = g_a * sp.tangent_u + g_b * sp.tangent_v;
        const double g_t_total = g_t + g_offset.dot(dir);
        const double den = sp.world_normal.dot(dir);
        const Vec3 rel = sp.position - origin;
        Vec3 g_pos = -g_offset + g_t_total * sp.world_normal / den;
        const Vec3 g_n = g_t_total * (rel / den - h.t * dir / den);
        for (int r = 0; r < 3; ++r) {
            g.position[r] += g_pos[r];
            g.rotation[3 * r + 0] += g_a * offset[r];
            g.rotation[3 * r + 1] += g_b * offset[r];
            g.rotation[3 * r + 2] += g_n[r];
        }
    }
}

struct ZoneJob {
    ConeSampleSet rays;
    std::vector<int> candidates;
    std::vector<Vec2> pixels;
};

ZoneJob make_zone_job(const detail::PreparedView& view, const LidarConfig& lidar, ZoneIndex zone,
                      std::uint64_t seed, bool all_candidates) {
    ZoneJob job;
    const Cone cone = pixel_cone(lidar, view.camera, zone);
    job.rays = sample_cone(cone, lidar.rays_per_cone, zone_seed(seed, zone, lidar.nx));
    const auto& cam = view.camera;
    job.pixels.reserve(job.rays.image_points.size());
    for (const auto& p : job.rays.image_points) job.pixels.emplace_back(cam.fx * p.x() + cam.cx, cam.fy * p.y() + cam.cy);
    const double x0 = cam.fx * cone.tan_min.x() + cam.cx, x1 = cam.fx * cone.tan_max.x() + cam.cx;
    const double y0 = cam.fy * cone.tan_min.y() + cam.cy, y1 = cam.fy * cone.tan_max.y() + cam.cy;
    for (std::size_t i = 0; i < view.splats.size(); ++i) {
        const auto& sp = view.splats[i];
        if (sp.visible && (all_candidates || sp.ray_box.overlaps(x0, y0, x1, y1)))
            job.candidates.push_back(static_cast<int>(i));
    }
    return job;
}

void render_zone(const detail::PreparedView& view, const LidarConfig& lidar, ZoneIndex zone, std::uint64_t seed,
                 const TransientConfig& cfg, bool all_candidates, std::span<double> hist, TransientStats* stats,
                 StructureProbe* probe) {
    const ZoneJob job = make_zone_job(view, lidar, zone, seed, all_candidates);
    std::vector<RayHit> hits;
    for (std::size_t r = 0; r < job.rays.weights.size(); ++r) {
        gather_hits(view, job.rays.origins[r], job.rays.directions[r], job.pixels[r], job.candidates, hits);
        const int used = deposit_ray(hits, job.rays.weights[r], lidar, cfg, hist, stats);
        if (probe) {
            std::uint64_t order = StructureProbe::mix(used);
            std::uint64_t bins = order;
            for (int k = 0; k < used; ++k) {
                order = StructureProbe::combine(order, hits[k].index);
                bins = StructureProbe::combine(bins, bin_index(hits[k].t, lidar.bin_width_s, lidar.n_bins).lower_bin);
            }
            const std::uint64_t key = (static_cast<std::uint64_t>(zone.iy * lidar.nx + zone.ix) << 20) + r;
            probe->add_other(StructureProbe::combine(order, key));
            probe->add_soft_bin(StructureProbe::combine(bins, key));
        }
    }
}

}  // namespace

ConeSampleSet sample_cone(const Cone& cone, int n_rays, std::uint64_t seed) {
    if (n_rays < 1) throw InvalidParameter("sample_cone: n_rays must be >= 1");
    ConeSampleSet out;
    const int gx = largest_divisor_at_most_sqrt(n_rays);
    const int gy = n_rays / gx;
    const Vec2 extent = cone.tan_max - cone.tan_min;
    std::mt19937_64 rng(StructureProbe::mix(seed));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double total = 0.0;
    for (int j = 0; j < gy; ++j)
        for (int i = 0; i < gx; ++i) {
            const double jx = n_rays == 1 ? 0.5 : unit(rng);
            const double jy = n_rays == 1 ? 0.5 : unit(rng);
            const Vec2 p(cone.tan_min.x() + (i + jx) / gx * extent.x(), cone.tan_min.y() + (j + jy) / gy * extent.y());
            const double r2 = 1.0 + p.squaredNorm();
            const double w = 1.0 / (r2 * std::sqrt(r2));  // cos^3 of the off-axis angle
            out.image_points.push_back(p);
            out.origins.push_back(cone.apex);
            out.directions.push_back((cone.camera_to_world * Vec3(p.x(), p.y(), 1.0)).normalized());
            out.weights.push_back(w);
            total += w;
        }
    for (double& w : out.weights) w /= total;
    return out;
}

BinAssignment bin_index(double distance_m, double bin_width_s, int n_bins) {
    if (!(distance_m >= 0.0)) throw InvalidParameter("bin_index: distance must be non-negative");
    const double tau = 2.0 * distance_m / (kSpeedOfLight * bin_width_s);
    const double floor_tau = std::floor(tau);
    BinAssignment out;
    out.w2 = tau - floor_tau;
    out.w1 = 1.0 - out.w2;
    if (floor_tau >= n_bins) {
        out.out_of_range = true;
        out.lower_bin = n_bins;
        return out;
    }
    out.lower_bin = static_cast<int>(floor_tau);
    return out;
}

std::uint64_t zone_seed(std::uint64_t seed, ZoneIndex zone, int nx) {
    return StructureProbe::combine(StructureProbe::mix(seed), static_cast<std::uint64_t>(zone.iy) * nx + zone.ix + 1);
}

std::vector<double> render_transient(const Scene& scene, const LidarConfig& lidar, const CameraModel& pose,
                                     ZoneIndex zone, std::uint64_t seed, const TransientConfig& config,
                                     TransientStats* stats) {
    lidar.validate();
    const auto view = detail::prepare_view(scene, pose, config.raster);
    std::vector<double> hist(lidar.n_bins, 0.0);
    render_zone(view, lidar, zone, seed, config, false, hist, stats, nullptr);
    return hist;
}

TransientImage render_transient_image(const Scene& scene, const LidarConfig& lidar, const CameraModel& pose,
                                      std::uint64_t seed, const TransientConfig& config, TransientStats* stats,
                                      StructureProbe* probe) {
    lidar.validate();
    const auto view = detail::prepare_view(scene, pose, config.raster);
    TransientImage out(lidar.nx, lidar.ny, lidar.n_bins, lidar.bin_width_s);
    const int zones = lidar.nx * lidar.ny;
    std::vector<TransientStats> zone_stats(zones);
#pragma omp parallel for schedule(dynamic, 1)
    for (int z = 0; z < zones; ++z) {
        const ZoneIndex zi{z % lidar.nx, z / lidar.nx};
        render_zone(view, lidar, zi, seed, config, false, out.histogram(zi.ix, zi.iy), &zone_stats[z], probe);
    }
    if (stats)
        for (const auto& s : zone_stats) {
            stats->deposited += s.deposited;
            stats->dropped += s.dropped;
            stats->dropped_count += s.dropped_count;
        }
    return out;
}

TransientImage render_transient_image_reference(const Scene& scene, const LidarConfig& lidar,
                                                const CameraModel& pose, std::uint64_t seed,
                                                const TransientConfig& config) {
    lidar.validate();
    const auto view = detail::prepare_view(scene, pose, config.raster);
    TransientImage out(lidar.nx, lidar.ny, lidar.n_bins, lidar.bin_width_s);
    for (int iy = 0; iy < lidar.ny; ++iy)
        for (int ix = 0; ix < lidar.nx; ++ix)
            render_zone(view, lidar, {ix, iy}, seed, config, true, out.histogram(ix, iy), nullptr, nullptr);
    return out;
}

void render_transient_backward(const Scene& scene, const LidarConfig& lidar, const CameraModel& pose,
                               std::uint64_t seed, const TransientConfig& config, const TransientImage& upstream,
                               std::span<SurfelTermGrad> grads) {
    const auto view = detail::prepare_view(scene, pose, config.raster);
    const int zones = lidar.nx * lidar.ny;
    std::vector<std::vector<SurfelTermGrad>> partial(lidar.ny, std::vector<SurfelTermGrad>(scene.size()));
#pragma omp parallel for schedule(dynamic, 1)
    for (int iy = 0; iy < lidar.ny; ++iy) {
        std::vector<RayHit> hits;
        std::vector<double> scratch(lidar.n_bins);
        for (int ix = 0; ix < lidar.nx; ++ix) {
            const auto g_hist = upstream.histogram(ix, iy);
            if (std::all_of(g_hist.begin(), g_hist.end(), [](double v) { return v == 0.0; })) continue;
            const ZoneJob job = make_zone_job(view, lidar, {ix, iy}, seed, false);
            for (std::size_t r = 0; r < job.rays.weights.size(); ++r) {
                gather_hits(view, job.rays.origins[r], job.rays.directions[r], job.pixels[r], job.candidates, hits);
                const int used = deposit_ray(hits, job.rays.weights[r], lidar, config, scratch, nullptr);
                deposit_ray_backward(view, hits, used, job.rays.origins[r], job.rays.directions[r],
                                     job.rays.weights[r], lidar, config, g_hist, partial[iy]);
            }
        }
    }
    (void)zones;
    for (const auto& acc : partial)
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += acc[i];
}

NormalizedHistogram normalize_histogram(std::span<const double> h, double floor) {
    NormalizedHistogram out;
    out.p.resize(h.size());
    for (double v : h) {
        if (!(v >= 0.0)) throw InvalidParameter("normalize_histogram: negative or non-finite count");
        out.sum += v;
    }
    out.empty = !(out.sum > 0.0);
    const double total = out.sum + floor * static_cast<double>(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) out.p[i] = (h[i] + floor) / total;
    return out;
}

}  // namespace surfelfuse
