#include "surfelfuse/gradient.hpp"

#include "surfelfuse/autodiff.hpp"
#include "surfelfuse/raster.hpp"
#include "surfelfuse/surfel_math.hpp"

#include <utility>

namespace surfelfuse {

SurfelTermGrad& SurfelTermGrad::operator+=(const SurfelTermGrad& o) {
    auto add = [](auto& a, const auto& b) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    add(mean, o.mean);
    add(conic, o.conic);
    add(center, o.center);
    add(normal, o.normal);
    add(color, o.color);
    add(rotation, o.rotation);
    add(position, o.position);
    add(scale, o.scale);
    opacity += o.opacity;
    return *this;
}

Scene zero_gradient(const Scene& scene) {
    Scene g;
    g.sh_degree = scene.sh_degree;
    g.surfels.resize(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) {
        Surfel& s = g.surfels[i];
        s.position.setZero();
        s.rotation.setZero();
        s.scale.setZero();
        s.opacity = 0.0;
        s.color_coeffs.assign(scene.surfels[i].color_coeffs.size(), 0.0);
    }
    return g;
}

namespace {

bool is_zero(const SurfelTermGrad& g) {
    auto z = [](const auto& a) {
        for (double v : a)
            if (v != 0.0) return false;
        return true;
    };
    return z(g.mean) && z(g.conic) && z(g.center) && z(g.normal) && z(g.color) && z(g.rotation) &&
           z(g.position) && z(g.scale) && g.opacity == 0.0;
}

}  // namespace

void accumulate_parameter_gradients(const Scene& scene, const CameraModel& camera, const RasterConfig& config,
                                    std::span<const SurfelTermGrad> terms, Scene& gradient) {
    using ad::Var;
    ad::Tape tape;
    std::vector<Var> coeffs;
    std::vector<std::pair<std::uint32_t, double>> seeds;

    for (std::size_t i = 0; i < scene.size(); ++i) {
        const SurfelTermGrad& g = terms[i];
        if (is_zero(g)) continue;
        const Surfel& s = scene.surfels[i];
        Surfel& out = gradient.surfels[i];
        tape.clear();

        Var pos[3], quat[4], scale[2];
        for (int k = 0; k < 3; ++k) pos[k] = Var(&tape, s.position[k]);
        for (int k = 0; k < 4; ++k) quat[k] = Var(&tape, s.rotation[k]);
        for (int k = 0; k < 2; ++k) scale[k] = Var(&tape, s.scale[k]);
        coeffs.clear();
        for (double c : s.color_coeffs) coeffs.emplace_back(&tape, c);

        const auto t = math::surfel_terms(pos, quat, scale, coeffs.data(), scene.sh_degree, camera,
                                          config.cov_epsilon);
        seeds.clear();
        auto seed = [&](const auto& vars, const auto& grads) {
            for (std::size_t k = 0; k < grads.size(); ++k)
                if (grads[k] != 0.0 && !vars[k].is_constant()) seeds.emplace_back(vars[k].index(), grads[k]);
        };
        seed(t.mean, g.mean);
        seed(t.conic, g.conic);
        seed(t.center, g.center);
        seed(t.normal, g.normal);
        seed(t.color, g.color);
        seed(t.rotation, g.rotation);
        tape.backward(seeds);

        for (int k = 0; k < 3; ++k) out.position[k] += tape.adjoint(pos[k].index()) + g.position[k];
        for (int k = 0; k < 4; ++k) out.rotation[k] += tape.adjoint(quat[k].index());
        for (int k = 0; k < 2; ++k) out.scale[k] += tape.adjoint(scale[k].index()) + g.scale[k];
        for (std::size_t k = 0; k < coeffs.size(); ++k) out.color_coeffs[k] += tape.adjoint(coeffs[k].index());
        out.opacity += g.opacity;
    }
}

}  // namespace surfelfuse
