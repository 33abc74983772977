#include "surfelfuse/loss.hpp"

#include "surfelfuse/transient.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace surfelfuse {

LossMode parse_loss_mode(const std::string& name) {
    if (name == "fusion") return LossMode::Fusion;
    if (name == "rgb-only") return LossMode::RgbOnly;
    if (name == "diffuse-only") return LossMode::DiffuseOnly;
    if (name == "sparse-baseline") return LossMode::SparseBaseline;
    if (name == "sparse-only") return LossMode::SparseOnly;
    if (name == "fusion-no-adaptive") return LossMode::FusionNoAdaptive;
    throw InvalidParameter("unknown loss mode '" + name + "'");
}

std::string to_string(LossMode mode) {
    switch (mode) {
    case LossMode::Fusion: return "fusion";
    case LossMode::RgbOnly: return "rgb-only";
    case LossMode::DiffuseOnly: return "diffuse-only";
    case LossMode::SparseBaseline: return "sparse-baseline";
    case LossMode::SparseOnly: return "sparse-only";
    case LossMode::FusionNoAdaptive: return "fusion-no-adaptive";
    }
    return "?";
}

bool uses_rgb(LossMode m) {
    return m == LossMode::Fusion || m == LossMode::RgbOnly || m == LossMode::SparseBaseline ||
           m == LossMode::FusionNoAdaptive;
}
bool uses_transient(LossMode m) {
    return m == LossMode::Fusion || m == LossMode::DiffuseOnly || m == LossMode::FusionNoAdaptive;
}
bool uses_sparse(LossMode m) { return m == LossMode::SparseBaseline || m == LossMode::SparseOnly; }

PatchStats patch_stats(const Image& rgb, int x0, int y0, int x1, int y1, double variance_floor) {
    if (x1 <= x0 || y1 <= y0) throw InvalidParameter("patch_stats: empty patch");
    if (x0 < 0 || y0 < 0 || x1 > rgb.width || y1 > rgb.height) throw InvalidParameter("patch_stats: out of bounds");
    const double n = static_cast<double>(x1 - x0) * (y1 - y0);
    auto luminance = [&](int x, int y) {
        double s = 0.0;
        for (int c = 0; c < rgb.channels; ++c) s += rgb.at(x, y, c);
        return s / rgb.channels;
    };
    double mean = 0.0;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) mean += luminance(x, y);
    mean /= n;
    double var = 0.0;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            const double d = luminance(x, y) - mean;
            var += d * d;
        }
    var /= n;
    PatchStats s;
    s.mean = mean;
    s.texture = var;
    s.saturated = var < variance_floor;
    s.snr = mean / std::max(var, variance_floor);
    return s;
}

double patch_weight(double texture, double snr, double a, double b, double k) {
    if (!(k > 0.0)) throw InvalidParameter("patch_weight: k must be positive");
    const double x = -k * (texture - (a * snr + b));
    return 1.0 / (1.0 + std::exp(x));
}

PatchWeightMap constant_patch_weights(int width, int height, int nx, int ny, double w) {
    if (nx < 1 || ny < 1 || width % nx != 0 || height % ny != 0)
        throw InvalidParameter("patch grid must tile the image exactly");
    PatchWeightMap m;
    m.nx = nx;
    m.ny = ny;
    m.patch_w = width / nx;
    m.patch_h = height / ny;
    m.weights.assign(static_cast<std::size_t>(nx) * ny, w);
    m.snr.assign(m.weights.size(), 0.0);
    m.texture.assign(m.weights.size(), 0.0);
    return m;
}

PatchWeightMap compute_patch_weights(const Image& gt_rgb, int nx, int ny, const LossConfig& cfg) {
    PatchWeightMap m = constant_patch_weights(gt_rgb.width, gt_rgb.height, nx, ny, 0.0);
    for (int iy = 0; iy < ny; ++iy)
        for (int ix = 0; ix < nx; ++ix) {
            const auto s = patch_stats(gt_rgb, ix * m.patch_w, iy * m.patch_h, (ix + 1) * m.patch_w,
                                       (iy + 1) * m.patch_h, cfg.variance_floor);
            const double snr = std::min(s.snr, cfg.snr_max);
            const std::size_t i = static_cast<std::size_t>(iy) * nx + ix;
            m.snr[i] = snr;
            m.texture[i] = s.texture;
            m.weights[i] = patch_weight(s.texture, snr, cfg.a, cfg.b, cfg.k);
        }
    return m;
}

// ---------------------------------------------------------------------------
// SSIM

namespace {

constexpr int kWindow = 11;

std::array<double, kWindow> gaussian_window() {
    std::array<double, kWindow> g{};
    double sum = 0.0;
    for (int i = 0; i < kWindow; ++i) {
        const double d = i - kWindow / 2;
        g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        sum += g[i];
    }
    for (double& v : g) v /= sum;
    return g;
}

/// Separable "same" filtering with zero padding. The window is symmetric, so
/// this is also its own adjoint.
std::vector<double> filter(const std::vector<double>& in, int w, int h) {
    static const auto g = gaussian_window();
    constexpr int r = kWindow / 2;
    std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int k = -r; k <= r; ++k) {
                const int xx = x + k;
                if (xx >= 0 && xx < w) s += g[k + r] * in[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = s;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int k = -r; k <= r; ++k) {
                const int yy = y + k;
                if (yy >= 0 && yy < h) s += g[k + r] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            out[static_cast<std::size_t>(y) * w + x] = s;
        }
    return out;
}

}  // namespace

double ssim(const Image& a, const Image& b, Image* grad_a) {
    if (!a.same_shape(b)) throw InvalidParameter("ssim: shape mismatch");
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    const int w = a.width, h = a.height;
    const std::size_t n = a.pixel_count();
    if (grad_a) *grad_a = Image(w, h, a.channels);
    const double norm = 1.0 / (static_cast<double>(n) * a.channels);
    double total = 0.0;
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (int c = 0; c < a.channels; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = a.data[i * a.channels + c];
            y[i] = b.data[i * a.channels + c];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = filter(x, w, h), my = filter(y, w, h);
        const auto sxx = filter(xx, w, h), syy = filter(yy, w, h), sxy = filter(xy, w, h);
        std::vector<double> dmu, dvar, dcov;
        if (grad_a) {
            dmu.resize(n);
            dvar.resize(n);
            dcov.resize(n);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double vx = sxx[i] - mx[i] * mx[i];
            const double vy = syy[i] - my[i] * my[i];
            const double cxy = sxy[i] - mx[i] * my[i];
            const double n1 = 2.0 * mx[i] * my[i] + C1, n2 = 2.0 * cxy + C2;
            const double d1 = mx[i] * mx[i] + my[i] * my[i] + C1, d2 = vx + vy + C2;
            const double s = n1 * n2 / (d1 * d2);
            total += s;
            if (grad_a) {
                const double ds_dmu = s * (2.0 * my[i] / n1 - 2.0 * mx[i] / d1);
                const double ds_dvar = -s / d2;
                const double ds_dcov = 2.0 * s / n2;
                // Chain through var = E[x^2] - mu^2 and cov = E[xy] - mu_x mu_y.
                dmu[i] = norm * (ds_dmu - 2.0 * mx[i] * ds_dvar - my[i] * ds_dcov);
                dvar[i] = norm * ds_dvar;
                dcov[i] = norm * ds_dcov;
            }
        }
        if (grad_a) {
            const auto gmu = filter(dmu, w, h), gvar = filter(dvar, w, h), gcov = filter(dcov, w, h);
            for (std::size_t i = 0; i < n; ++i)
                grad_a->data[i * a.channels + c] = gmu[i] + 2.0 * x[i] * gvar[i] + y[i] * gcov[i];
        }
    }
    return total * norm;
}

// ---------------------------------------------------------------------------

RgbLossTerms rgb_loss(const Image& rendered, const Image& gt, const PatchWeightMap& weights, double lambda_ssim,
                      Image* grad, StructureProbe* probe) {
    if (!rendered.same_shape(gt)) throw InvalidParameter("rgb_loss: shape mismatch");
    if (weights.nx * weights.patch_w != gt.width || weights.ny * weights.patch_h != gt.height)
        throw InvalidParameter("rgb_loss: patch map does not tile the image");
    RgbLossTerms out;
    if (grad) *grad = Image(gt.width, gt.height, gt.channels);
    const double per_patch = 1.0 / (static_cast<double>(weights.patch_w) * weights.patch_h * gt.channels);
    double mean_w = 0.0;
    std::uint64_t signs = 0;
    for (int iy = 0; iy < weights.ny; ++iy)
        for (int ix = 0; ix < weights.nx; ++ix) {
            const double wp = weights.at(ix, iy);
            mean_w += wp;
            if (wp == 0.0) continue;
            double sum = 0.0;
            for (int y = iy * weights.patch_h; y < (iy + 1) * weights.patch_h; ++y)
                for (int x = ix * weights.patch_w; x < (ix + 1) * weights.patch_w; ++x)
                    for (int c = 0; c < gt.channels; ++c) {
                        const double d = rendered.at(x, y, c) - gt.at(x, y, c);
                        sum += std::abs(d);
                        if (probe)
                            signs = StructureProbe::combine(
                                signs, ((static_cast<std::uint64_t>(y) * gt.width + x) * gt.channels + c) * 3 +
                                           static_cast<std::uint64_t>(1 + (d > 0.0) - (d < 0.0)));
                        if (grad)
                            grad->at(x, y, c) += (1.0 - lambda_ssim) * wp * per_patch * ((d > 0.0) - (d < 0.0));
                    }
            out.l1 += wp * sum * per_patch;
        }
    out.l1 *= 1.0 - lambda_ssim;
    if (probe) probe->add_other(StructureProbe::combine(signs, 0x11));
    mean_w /= static_cast<double>(weights.weights.size());
    if (lambda_ssim > 0.0 && mean_w > 0.0) {
        Image g;
        const double s = ssim(rendered, gt, grad ? &g : nullptr);
        out.ssim = lambda_ssim * (1.0 - s) * mean_w;
        if (grad)
            for (std::size_t i = 0; i < g.data.size(); ++i) grad->data[i] -= lambda_ssim * mean_w * g.data[i];
    }
    return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw InvalidParameter("kl_divergence: size mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!(p[i] > 0.0) || !(q[i] > 0.0)) throw InvalidParameter("kl_divergence: inputs must be floored");
        kl += p[i] * std::log(p[i] / q[i]);
    }
    return std::max(kl, 0.0);
}

TransientLossTerms transient_loss(const TransientImage& rendered, const TransientImage& gt,
                                  const PatchWeightMap& weights, TransientImage* grad) {
    if (rendered.nx != gt.nx || rendered.ny != gt.ny || rendered.nt != gt.nt)
        throw InvalidParameter("transient_loss: shape mismatch");
    if (weights.nx != gt.nx || weights.ny != gt.ny) throw InvalidParameter("transient_loss: weight grid mismatch");
    TransientLossTerms out;
    if (grad) *grad = TransientImage(gt.nx, gt.ny, gt.nt, gt.bin_width_s);
    for (int iy = 0; iy < gt.ny; ++iy)
        for (int ix = 0; ix < gt.nx; ++ix) {
            const double lw = 1.0 - weights.at(ix, iy);
            const auto p = normalize_histogram(rendered.histogram(ix, iy));
            const auto q = normalize_histogram(gt.histogram(ix, iy));
            if (p.empty || q.empty) {
                ++out.empty;
                continue;
            }
            if (lw == 0.0) continue;
            const double kl = kl_divergence(p.p, q.p);
            out.kl += lw * kl;
            if (grad) {
                const double total = p.sum + kHistogramFloor * gt.nt;
                auto g = grad->histogram(ix, iy);
                for (int t = 0; t < gt.nt; ++t) g[t] = lw * (std::log(p.p[t] / q.p[t]) - kl) / total;
            }
        }
    return out;
}

double depth_normal_reg(const RenderBuffers& buf, const CameraModel& camera, double lambda_reg,
                        double coverage_epsilon, double discontinuity, DepthNormalGrad* grad,
                        StructureProbe* probe) {
    const int w = buf.depth.width, h = buf.depth.height;
    if (grad) {
        grad->depth = Image(w, h, 1);
        grad->normal = Image(w, h, 3);
    }
    if (lambda_reg == 0.0) return 0.0;

    auto usable = [&](int x, int y) {
        double lo = buf.depth.at(x, y), hi = lo;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (buf.alpha.at(x + dx, y + dy) < coverage_epsilon) return false;
                const double d = buf.depth.at(x + dx, y + dy);
                lo = std::min(lo, d);
                hi = std::max(hi, d);
            }
        return lo > 0.0 && hi - lo <= discontinuity * buf.depth.at(x, y);
    };
    auto point = [&](int x, int y) { return Vec3(camera.pixel_ray(x + 0.5, y + 0.5) * buf.depth.at(x, y)); };

    std::vector<unsigned char> mask(static_cast<std::size_t>(w) * h, 0);
    std::size_t count = 0;
    std::uint64_t signature = 0;
    for (int y = 1; y + 1 < h; ++y)
        for (int x = 1; x + 1 < w; ++x)
            if (usable(x, y)) {
                mask[static_cast<std::size_t>(y) * w + x] = 1;
                ++count;
                signature = StructureProbe::combine(signature, static_cast<std::uint64_t>(y) * w + x);
            }
    if (probe) probe->add_other(StructureProbe::combine(signature, 0xde9e00));
    if (count == 0) return 0.0;

    const double scale = lambda_reg / static_cast<double>(count);
    double sum = 0.0;
    for (int y = 1; y + 1 < h; ++y)
        for (int x = 1; x + 1 < w; ++x) {
            if (!mask[static_cast<std::size_t>(y) * w + x]) continue;
            Vec3 ta = Vec3::Zero(), tb = Vec3::Zero();
            for (int k = -1; k <= 1; ++k) {
                ta += point(x + 1, y + k) - point(x - 1, y + k);
                tb += point(x + k, y + 1) - point(x + k, y - 1);
            }
            const Vec3 m = tb.cross(ta);
            const double len = m.norm();
            if (!(len > 0.0)) continue;
            const Vec3 nd = m / len;
            const Vec3 nr(buf.normal.at(x, y, 0), buf.normal.at(x, y, 1), buf.normal.at(x, y, 2));
            sum += 1.0 - nd.dot(nr);
            if (!grad) continue;
            for (int c = 0; c < 3; ++c) grad->normal.at(x, y, c) -= scale * nd[c];
            const Vec3 gm = -scale * (nr - nd * nd.dot(nr)) / len;
            const Vec3 g_tb = ta.cross(gm);
            const Vec3 g_ta = gm.cross(tb);
            auto push = [&](int px, int py, const Vec3& gp) {
                grad->depth.at(px, py) += camera.pixel_ray(px + 0.5, py + 0.5).dot(gp);
            };
            for (int k = -1; k <= 1; ++k) {
                push(x + 1, y + k, g_ta);
                push(x - 1, y + k, -g_ta);
                push(x + k, y + 1, g_tb);
                push(x + k, y - 1, -g_tb);
            }
        }
    return sum * scale;
}

SparseLossTerms sparse_lidar_loss(std::span<const PixelSample> rendered, std::span<const double> gt,
                                  double coverage_epsilon, std::vector<double>* grad, StructureProbe* probe) {
    if (rendered.size() != gt.size()) throw InvalidParameter("sparse_lidar_loss: size mismatch");
    SparseLossTerms out;
    if (grad) grad->assign(gt.size(), 0.0);
    std::uint64_t signs = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (rendered[i].alpha_acc < coverage_epsilon || !(gt[i] > 0.0)) {
            ++out.excluded;
            continue;
        }
        const double d = rendered[i].depth - gt[i];
        out.l1 += std::abs(d);
        if (grad) (*grad)[i] = (d > 0.0) - (d < 0.0);
        signs = StructureProbe::combine(signs, i * 3 + static_cast<std::uint64_t>(1 + (d > 0.0) - (d < 0.0)));
    }
    if (probe) probe->add_other(StructureProbe::combine(signs, 0x5a));
    return out;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
    rgb_l1 += o.rgb_l1;
    rgb_ssim += o.rgb_ssim;
    transient_kl += o.transient_kl;
    depth_normal_reg += o.depth_normal_reg;
    sparse_l1 += o.sparse_l1;
    total += o.total;
    empty_histograms += o.empty_histograms;
    sparse_excluded += o.sparse_excluded;
    return *this;
}

void finalize_total(LossBreakdown& b, LossMode mode, const LossConfig& cfg) {
    b.total = b.depth_normal_reg;
    if (uses_rgb(mode)) b.total += b.rgb();
    if (uses_transient(mode)) b.total += cfg.lambda_lidar * b.transient_kl;
    if (uses_sparse(mode)) b.total += cfg.lambda_sparse * b.sparse_l1;
}

PatchWeightMap mode_weights(const PatchWeightMap& adaptive, LossMode mode) {
    PatchWeightMap m = adaptive;
    double fixed = -1.0;
    switch (mode) {
    case LossMode::Fusion: return m;
    case LossMode::FusionNoAdaptive: fixed = 0.5; break;
    case LossMode::RgbOnly:
    case LossMode::SparseBaseline: fixed = 1.0; break;
    case LossMode::DiffuseOnly:
    case LossMode::SparseOnly: fixed = 0.0; break;
    }
    std::fill(m.weights.begin(), m.weights.end(), fixed);
    return m;
}

LossBreakdown view_loss(const ViewPrediction& pred, const ViewTarget& target, const CameraModel& camera,
                        LossMode mode, const LossConfig& cfg, const RasterConfig& raster, ViewLossGrad* grad,
                        StructureProbe* probe) {
    LossBreakdown out;
    const PatchWeightMap weights = mode_weights(target.weights, mode);
    if (grad) {
        grad->buffers = RenderBuffers(camera.width, camera.height);
        grad->transient = TransientImage();
        grad->sparse_depth.clear();
    }

    if (uses_rgb(mode)) {
        const auto rgb = rgb_loss(pred.buffers.color, target.rgb, weights, cfg.lambda_ssim,
                                  grad ? &grad->buffers.color : nullptr, probe);
        out.rgb_l1 = rgb.l1;
        out.rgb_ssim = rgb.ssim;
    }
    if (uses_transient(mode)) {
        const auto tr = transient_loss(pred.transient, target.transient, weights, grad ? &grad->transient : nullptr);
        out.transient_kl = tr.kl;
        out.empty_histograms = tr.empty;
        if (grad)
            for (double& g : grad->transient.counts) g *= cfg.lambda_lidar;
    }
    if (uses_sparse(mode)) {
        const auto sp = sparse_lidar_loss(pred.sparse, target.sparse_depth, raster.coverage_epsilon,
                                          grad ? &grad->sparse_depth : nullptr, probe);
        out.sparse_l1 = sp.l1;
        out.sparse_excluded = sp.excluded;
        if (grad)
            for (double& g : grad->sparse_depth) g *= cfg.lambda_sparse;
    }
    DepthNormalGrad dn;
    out.depth_normal_reg = depth_normal_reg(pred.buffers, camera, cfg.lambda_reg, raster.coverage_epsilon,
                                            cfg.discontinuity, grad ? &dn : nullptr, probe);
    if (grad) {
        grad->buffers.depth = std::move(dn.depth);
        grad->buffers.normal = std::move(dn.normal);
    }
    finalize_total(out, mode, cfg);
    return out;
}

}  // namespace surfelfuse
