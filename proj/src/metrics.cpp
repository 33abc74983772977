#include "surfelfuse/metrics.hpp"

#include "surfelfuse/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace surfelfuse {

double psnr(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw InvalidParameter("psnr: shape mismatch");
    if (a.data.empty()) throw InvalidParameter("psnr: empty image");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

ViewMetrics compute_metrics(const RenderBuffers& pred, const Image& gt_rgb, const Image& gt_depth,
                            const Image& gt_normal, double coverage_epsilon) {
    if (!pred.color.same_shape(gt_rgb) || !pred.depth.same_shape(gt_depth) || !pred.normal.same_shape(gt_normal))
        throw InvalidParameter("compute_metrics: shape mismatch");
    ViewMetrics m;
    Image color = pred.color;
    for (double& v : color.data) v = std::clamp(v, 0.0, 1.0);
    m.psnr = psnr(color, gt_rgb);
    m.ssim = ssim(color, gt_rgb);

    double depth_sum = 0.0, angle_sum = 0.0;
    std::size_t normal_count = 0;
    for (int y = 0; y < gt_depth.height; ++y)
        for (int x = 0; x < gt_depth.width; ++x) {
            if (!(gt_depth.at(x, y) > 0.0) || pred.alpha.at(x, y) < coverage_epsilon) continue;
            ++m.covered;
            depth_sum += std::abs(pred.depth.at(x, y) - gt_depth.at(x, y));
            const Vec3 np(pred.normal.at(x, y, 0), pred.normal.at(x, y, 1), pred.normal.at(x, y, 2));
            const Vec3 ng(gt_normal.at(x, y, 0), gt_normal.at(x, y, 1), gt_normal.at(x, y, 2));
            if (np.norm() == 0.0 || ng.norm() == 0.0) continue;
            const double c = std::clamp(np.normalized().dot(ng.normalized()), -1.0, 1.0);
            angle_sum += std::acos(c) * 180.0 / std::numbers::pi;
            ++normal_count;
        }
    if (m.covered > 0) m.depth_mae = depth_sum / static_cast<double>(m.covered);
    if (normal_count > 0) m.normal_mae = angle_sum / static_cast<double>(normal_count);
    return m;
}

MetricsReport aggregate(std::vector<ViewMetrics> views) {
    MetricsReport r;
    r.views = std::move(views);
    if (r.views.empty()) return r;
    double d = 0.0, n = 0.0;
    int nd = 0, nn = 0;
    for (const auto& v : r.views) {
        r.mean.psnr += v.psnr;
        r.mean.ssim += v.ssim;
        r.mean.covered += v.covered;
        if (v.depth_mae) {
            d += *v.depth_mae;
            ++nd;
        }
        if (v.normal_mae) {
            n += *v.normal_mae;
            ++nn;
        }
    }
    r.mean.psnr /= static_cast<double>(r.views.size());
    r.mean.ssim /= static_cast<double>(r.views.size());
    if (nd) r.mean.depth_mae = d / nd;
    if (nn) r.mean.normal_mae = n / nn;
    return r;
}

}  // namespace surfelfuse
