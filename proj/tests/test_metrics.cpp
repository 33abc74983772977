#include "surfelfuse/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace surfelfuse;

namespace {

struct Fixture {
    RenderBuffers pred{4, 4};
    Image rgb{4, 4, 3}, depth{4, 4, 1}, normal{4, 4, 3};

    Fixture() {
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                depth.at(x, y) = 1.0 + 0.1 * x;
                normal.at(x, y, 2) = -1.0;
                pred.depth.at(x, y) = depth.at(x, y);
                pred.alpha.at(x, y) = 1.0;
                pred.normal.at(x, y, 2) = -1.0;
            }
    }
};

}  // namespace

TEST(Psnr, ClosedForm) {
    Image a(5, 3, 3), b(5, 3, 3);
    for (double& v : b.data) v = 0.1;
    EXPECT_NEAR(psnr(a, b), 20.0, 1e-12);
    EXPECT_EQ(psnr(a, a), kPsnrCap);
    for (std::size_t i = 0; i < b.data.size(); i += 2) b.data[i] = 0.0;  // MSE halves (roughly)
    const double mse = 0.01 * (b.data.size() / 2) / static_cast<double>(b.data.size());
    EXPECT_NEAR(psnr(a, b), -10.0 * std::log10(mse), 1e-12);
}

TEST(ComputeMetrics, PerfectPrediction) {
    Fixture f;
    const ViewMetrics m = compute_metrics(f.pred, f.rgb, f.depth, f.normal);
    EXPECT_EQ(m.covered, 16u);
    EXPECT_DOUBLE_EQ(*m.depth_mae, 0.0);
    EXPECT_NEAR(*m.normal_mae, 0.0, 1e-6);
    EXPECT_NEAR(m.ssim, 1.0, 1e-12);
}

TEST(ComputeMetrics, DepthAndNormalErrorsOverCoveredPixels) {
    Fixture f;
    const double tilt = 10.0 * std::numbers::pi / 180.0;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            f.pred.depth.at(x, y) += x < 2 ? 0.02 : -0.04;
            f.pred.normal.at(x, y, 0) = std::sin(tilt);
            f.pred.normal.at(x, y, 2) = -std::cos(tilt);
        }
    f.pred.alpha.at(3, 3) = 0.0;  // uncovered in the render
    f.depth.at(0, 0) = 0.0;       // background in the ground truth
    const ViewMetrics m = compute_metrics(f.pred, f.rgb, f.depth, f.normal);
    EXPECT_EQ(m.covered, 14u);
    EXPECT_NEAR(*m.depth_mae, (7 * 0.02 + 7 * 0.04) / 14.0, 1e-12);
    EXPECT_NEAR(*m.normal_mae, 10.0, 1e-9);

    for (double& a : f.pred.alpha.data) a = 0.0;
    const ViewMetrics none = compute_metrics(f.pred, f.rgb, f.depth, f.normal);
    EXPECT_FALSE(none.depth_mae);
    EXPECT_FALSE(none.normal_mae);
}

TEST(ComputeMetrics, ColorClampedBeforeScoring) {
    Fixture f;
    for (double& v : f.pred.color.data) v = 1.7;
    for (double& v : f.rgb.data) v = 1.0;
    EXPECT_EQ(compute_metrics(f.pred, f.rgb, f.depth, f.normal).psnr, kPsnrCap);
    EXPECT_THROW(compute_metrics(RenderBuffers(3, 3), f.rgb, f.depth, f.normal), InvalidParameter);
}

TEST(Aggregate, MeansSkipMissingDepth) {
    ViewMetrics a, b;
    a.psnr = 20;
    a.ssim = 0.5;
    a.depth_mae = 0.1;
    b.psnr = 30;
    b.ssim = 0.7;
    const MetricsReport r = aggregate({a, b});
    EXPECT_DOUBLE_EQ(r.mean.psnr, 25.0);
    EXPECT_DOUBLE_EQ(r.mean.ssim, 0.6);
    EXPECT_DOUBLE_EQ(*r.mean.depth_mae, 0.1);
    EXPECT_FALSE(r.mean.normal_mae);
    EXPECT_TRUE(aggregate({}).views.empty());
}
