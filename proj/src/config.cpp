#include "surfelfuse/config.hpp"

#include <cmath>
#include <limits>
#include <set>

namespace surfelfuse {

namespace {

class Reader {
public:
    Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j.is_object()) throw ConfigError(where_.empty() ? "<root>" : where_, "expected an object");
    }

    std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

    bool has(const std::string& key) const { return j_.contains(key); }

    const Json& at(const std::string& key) {
        used_.insert(key);
        return j_.at(key);
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!j_.contains(key)) return;
        used_.insert(key);
        const Json& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError(path(key), "expected a boolean");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) throw ConfigError(path(key), "expected an integer");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError(path(key), "expected a string");
            }
            out = v.get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(path(key), "wrong type");
        }
    }

    void number(const std::string& key, double& out) {
        if (!j_.contains(key)) return;
        used_.insert(key);
        out = number_from_json(j_.at(key), path(key));
    }

    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!used_.count(key)) throw ConfigError(path(key), "unknown field");
    }

private:
    const Json& j_;
    std::string where_;
    std::set<std::string> used_;
};

}  // namespace

Json number_to_json(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

double number_from_json(const Json& j, const std::string& field) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
    }
    throw ConfigError(field, "expected a number");
}

Json to_json(const LidarConfig& c) {
    return Json{{"nx", c.nx},
                {"ny", c.ny},
                {"ifov_deg", c.ifov_deg},
                {"bin_width_s", c.bin_width_s},
                {"n_bins", c.n_bins},
                {"max_range_m", c.max_range_m},
                {"rays_per_cone", c.rays_per_cone}};
}

LidarConfig lidar_from_json(const Json& j, const std::string& where) {
    Reader r(j, where);
    LidarConfig c;
    r.get("nx", c.nx);
    r.get("ny", c.ny);
    r.number("ifov_deg", c.ifov_deg);
    r.number("bin_width_s", c.bin_width_s);
    r.get("n_bins", c.n_bins);
    r.number("max_range_m", c.max_range_m);
    r.get("rays_per_cone", c.rays_per_cone);
    r.finish();
    try {
        c.validate();
    } catch (const InvalidParameter& e) {
        throw ConfigError(where, e.what());
    }
    return c;
}

Json to_json(const ProtocolConfig& c) {
    return Json{{"scene", c.scene},
                {"variant", to_string(c.variant)},
                {"n_train", c.n_train},
                {"n_test", c.n_test},
                {"snr_db", number_to_json(c.snr_db)},
                {"seed", c.seed},
                {"width", c.width},
                {"height", c.height},
                {"lidar", to_json(c.lidar)},
                {"gt_rays_per_cone", c.gt_rays_per_cone},
                {"albedo_scale", c.albedo_scale},
                {"orbit_radius", c.orbit_radius},
                {"elevation_deg", c.elevation_deg},
                {"poisson", c.poisson}};
}

ProtocolConfig protocol_from_json(const Json& j) {
    Reader r(j, "");
    ProtocolConfig c;
    r.get("scene", c.scene);
    if (r.has("variant")) {
        std::string v;
        r.get("variant", v);
        try {
            c.variant = parse_texture_variant(v);
        } catch (const InvalidParameter& e) {
            throw ConfigError("variant", e.what());
        }
    }
    r.get("n_train", c.n_train);
    r.get("n_test", c.n_test);
    r.number("snr_db", c.snr_db);
    r.get("seed", c.seed);
    r.get("width", c.width);
    r.get("height", c.height);
    if (r.has("lidar")) c.lidar = lidar_from_json(r.at("lidar"));
    r.get("gt_rays_per_cone", c.gt_rays_per_cone);
    r.number("albedo_scale", c.albedo_scale);
    r.number("orbit_radius", c.orbit_radius);
    r.number("elevation_deg", c.elevation_deg);
    r.get("poisson", c.poisson);
    r.finish();
    if (c.n_train < 1) throw ConfigError("n_train", "must be >= 1");
    if (c.n_test < 0) throw ConfigError("n_test", "must be >= 0");
    if (c.width < 1 || c.width % c.lidar.nx != 0) throw ConfigError("width", "must be a positive multiple of lidar.nx");
    if (c.height < 1 || c.height % c.lidar.ny != 0)
        throw ConfigError("height", "must be a positive multiple of lidar.ny");
    if (c.gt_rays_per_cone < 1) throw ConfigError("gt_rays_per_cone", "must be >= 1");
    try {
        make_scene(c.scene, c.variant);
    } catch (const InvalidParameter& e) {
        throw ConfigError("scene", e.what());
    }
    return c;
}

Json to_json(const OptimConfig& c) {
    const auto& l = c.loss;
    const auto& r = c.raster;
    return Json{{"iterations", c.iterations},
                {"n_surfels", c.n_surfels},
                {"init_scale_factor", c.init_scale_factor},
                {"lr_position", c.lr_position},
                {"lr_rotation", c.lr_rotation},
                {"lr_scale", c.lr_scale},
                {"lr_opacity", c.lr_opacity},
                {"lr_color", c.lr_color},
                {"position_lr_final", c.position_lr_final},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_epsilon", c.adam_epsilon},
                {"prune_threshold", c.prune_threshold},
                {"prune_every", c.prune_every},
                {"seed", c.seed},
                {"mode", to_string(c.mode)},
                {"rays_per_cone", c.rays_per_cone},
                {"log_every", c.log_every},
                {"eval_every", c.eval_every},
                {"deposit", c.deposit == DepositWeight::Transmittance ? "transmittance" : "opacity"},
                {"loss",
                 {{"lambda_ssim", l.lambda_ssim},
                  {"k", l.k},
                  {"a", l.a},
                  {"b", l.b},
                  {"lambda_reg", l.lambda_reg},
                  {"lambda_lidar", l.lambda_lidar},
                  {"lambda_sparse", l.lambda_sparse},
                  {"snr_max", l.snr_max},
                  {"variance_floor", l.variance_floor},
                  {"discontinuity", l.discontinuity}}},
                {"raster",
                 {{"cov_epsilon", r.cov_epsilon},
                  {"cutoff_sigma", r.cutoff_sigma},
                  {"near_plane", r.near_plane},
                  {"min_transmittance", r.min_transmittance},
                  {"coverage_epsilon", r.coverage_epsilon},
                  {"parallel_epsilon", r.parallel_epsilon},
                  {"background", {r.background.x(), r.background.y(), r.background.z()}},
                  {"tile_size", r.tile_size}}}};
}

OptimConfig optim_from_json(const Json& j, OptimConfig c) {
    Reader r(j, "");
    r.get("iterations", c.iterations);
    r.get("n_surfels", c.n_surfels);
    r.number("init_scale_factor", c.init_scale_factor);
    r.number("lr_position", c.lr_position);
    r.number("lr_rotation", c.lr_rotation);
    r.number("lr_scale", c.lr_scale);
    r.number("lr_opacity", c.lr_opacity);
    r.number("lr_color", c.lr_color);
    r.number("position_lr_final", c.position_lr_final);
    r.number("beta1", c.beta1);
    r.number("beta2", c.beta2);
    r.number("adam_epsilon", c.adam_epsilon);
    r.number("prune_threshold", c.prune_threshold);
    r.get("prune_every", c.prune_every);
    r.get("seed", c.seed);
    if (r.has("mode")) {
        std::string m;
        r.get("mode", m);
        try {
            c.mode = parse_loss_mode(m);
        } catch (const InvalidParameter& e) {
            throw ConfigError("mode", e.what());
        }
    }
    r.get("rays_per_cone", c.rays_per_cone);
    r.get("log_every", c.log_every);
    r.get("eval_every", c.eval_every);
    if (r.has("deposit")) {
        std::string d;
        r.get("deposit", d);
        if (d == "transmittance") c.deposit = DepositWeight::Transmittance;
        else if (d == "opacity") c.deposit = DepositWeight::Opacity;
        else throw ConfigError("deposit", "expected 'transmittance' or 'opacity'");
    }
    if (r.has("loss")) {
        Reader l(r.at("loss"), "loss");
        auto& o = c.loss;
        l.number("lambda_ssim", o.lambda_ssim);
        l.number("k", o.k);
        l.number("a", o.a);
        l.number("b", o.b);
        l.number("lambda_reg", o.lambda_reg);
        l.number("lambda_lidar", o.lambda_lidar);
        l.number("lambda_sparse", o.lambda_sparse);
        l.number("snr_max", o.snr_max);
        l.number("variance_floor", o.variance_floor);
        l.number("discontinuity", o.discontinuity);
        l.finish();
    }
    if (r.has("raster")) {
        Reader rr(r.at("raster"), "raster");
        auto& o = c.raster;
        rr.number("cov_epsilon", o.cov_epsilon);
        rr.number("cutoff_sigma", o.cutoff_sigma);
        rr.number("near_plane", o.near_plane);
        rr.number("min_transmittance", o.min_transmittance);
        rr.number("coverage_epsilon", o.coverage_epsilon);
        rr.number("parallel_epsilon", o.parallel_epsilon);
        if (rr.has("background")) {
            const Json& bg = rr.at("background");
            if (!bg.is_array() || bg.size() != 3) throw ConfigError("raster.background", "expected 3 numbers");
            for (int k = 0; k < 3; ++k) o.background[k] = number_from_json(bg[k], "raster.background");
        }
        rr.get("tile_size", o.tile_size);
        rr.finish();
    }
    r.finish();
    if (c.iterations < 1) throw ConfigError("iterations", "must be >= 1");
    if (c.n_surfels < 1) throw ConfigError("n_surfels", "must be >= 1");
    if (!(c.init_scale_factor > 0.0)) throw ConfigError("init_scale_factor", "must be positive");
    for (const auto& [name, v] : {std::pair{"lr_position", c.lr_position}, std::pair{"lr_rotation", c.lr_rotation},
                                  std::pair{"lr_scale", c.lr_scale}, std::pair{"lr_opacity", c.lr_opacity},
                                  std::pair{"lr_color", c.lr_color}})
        if (!(v > 0.0)) throw ConfigError(name, "learning rates must be positive");
    if (!(c.prune_threshold >= 0.0 && c.prune_threshold < 1.0))
        throw ConfigError("prune_threshold", "must be in [0, 1)");
    if (c.rays_per_cone < 1) throw ConfigError("rays_per_cone", "must be >= 1");
    if (!(c.loss.k > 0.0)) throw ConfigError("loss.k", "must be positive");
    if (c.raster.tile_size < 1) throw ConfigError("raster.tile_size", "must be >= 1");
    return c;
}

Json to_json(const CameraModel& c) {
    Json rot = Json::array();
    for (int r = 0; r < 3; ++r) rot.push_back({c.rotation(r, 0), c.rotation(r, 1), c.rotation(r, 2)});
    return Json{{"fx", c.fx},
                {"fy", c.fy},
                {"cx", c.cx},
                {"cy", c.cy},
                {"width", c.width},
                {"height", c.height},
                {"rotation", rot},
                {"translation", {c.translation.x(), c.translation.y(), c.translation.z()}}};
}

CameraModel camera_from_json(const Json& j) {
    Reader r(j, "camera");
    CameraModel c;
    r.number("fx", c.fx);
    r.number("fy", c.fy);
    r.number("cx", c.cx);
    r.number("cy", c.cy);
    r.get("width", c.width);
    r.get("height", c.height);
    if (r.has("rotation")) {
        const Json& rot = r.at("rotation");
        if (!rot.is_array() || rot.size() != 3) throw ConfigError("camera.rotation", "expected 3x3");
        for (int i = 0; i < 3; ++i) {
            if (!rot[i].is_array() || rot[i].size() != 3) throw ConfigError("camera.rotation", "expected 3x3");
            for (int k = 0; k < 3; ++k) c.rotation(i, k) = number_from_json(rot[i][k], "camera.rotation");
        }
    }
    if (r.has("translation")) {
        const Json& t = r.at("translation");
        if (!t.is_array() || t.size() != 3) throw ConfigError("camera.translation", "expected 3 numbers");
        for (int k = 0; k < 3; ++k) c.translation[k] = number_from_json(t[k], "camera.translation");
    }
    r.finish();
    try {
        c.validate();
    } catch (const InvalidParameter& e) {
        throw ConfigError("camera", e.what());
    }
    return c;
}

Json to_json(const Scene& s) {
    Json surfels = Json::array();
    for (const auto& x : s.surfels) {
        surfels.push_back({{"position", {x.position.x(), x.position.y(), x.position.z()}},
                           {"rotation", {x.rotation[0], x.rotation[1], x.rotation[2], x.rotation[3]}},
                           {"scale", {x.scale.x(), x.scale.y()}},
                           {"opacity", x.opacity},
                           {"color_coeffs", x.color_coeffs}});
    }
    return Json{{"sh_degree", s.sh_degree}, {"surfels", surfels}};
}

Scene scene_from_json(const Json& j) {
    Reader r(j, "scene");
    Scene s;
    r.get("sh_degree", s.sh_degree);
    if (s.sh_degree < 0 || s.sh_degree > 3) throw ConfigError("scene.sh_degree", "must be in [0, 3]");
    if (!r.has("surfels")) throw ConfigError("scene.surfels", "missing");
    const Json& arr = r.at("surfels");
    if (!arr.is_array()) throw ConfigError("scene.surfels", "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string where = "scene.surfels[" + std::to_string(i) + "]";
        Reader sr(arr[i], where);
        Surfel x;
        auto vec = [&](const char* key, auto& out, int n) {
            if (!sr.has(key)) return;
            const Json& v = sr.at(key);
            if (!v.is_array() || static_cast<int>(v.size()) != n)
                throw ConfigError(where + "." + key, "expected " + std::to_string(n) + " numbers");
            for (int k = 0; k < n; ++k) out[k] = number_from_json(v[k], where + "." + key);
        };
        vec("position", x.position, 3);
        vec("rotation", x.rotation, 4);
        vec("scale", x.scale, 2);
        sr.number("opacity", x.opacity);
        x.color_coeffs.assign(sh_coeff_count(s.sh_degree), 0.0);
        if (sr.has("color_coeffs")) {
            const Json& v = sr.at("color_coeffs");
            if (!v.is_array()) throw ConfigError(where + ".color_coeffs", "expected an array");
            x.color_coeffs.clear();
            for (const auto& e : v) x.color_coeffs.push_back(number_from_json(e, where + ".color_coeffs"));
        }
        sr.finish();
        try {
            validate_surfel(x, s.sh_degree);
        } catch (const InvalidParameter& e) {
            throw ConfigError(where, e.what());
        }
        s.surfels.push_back(std::move(x));
    }
    r.finish();
    return s;
}

namespace {

Json view_metrics_json(const ViewMetrics& v) {
    Json j{{"psnr", v.psnr}, {"ssim", v.ssim}, {"covered", v.covered}};
    j["depth_mae"] = v.depth_mae ? Json(*v.depth_mae) : Json(nullptr);
    j["normal_mae"] = v.normal_mae ? Json(*v.normal_mae) : Json(nullptr);
    return j;
}

ViewMetrics view_metrics_from(const Json& j, const std::string& where) {
    Reader r(j, where);
    ViewMetrics v;
    r.number("psnr", v.psnr);
    r.number("ssim", v.ssim);
    r.get("covered", v.covered);
    for (const char* key : {"depth_mae", "normal_mae"}) {
        if (!r.has(key)) continue;
        const Json& x = r.at(key);
        auto& slot = std::string(key) == "depth_mae" ? v.depth_mae : v.normal_mae;
        if (!x.is_null()) slot = number_from_json(x, where + "." + key);
    }
    r.finish();
    return v;
}

}  // namespace

Json to_json(const MetricsReport& rep) {
    Json views = Json::array();
    for (const auto& v : rep.views) views.push_back(view_metrics_json(v));
    return Json{{"mean", view_metrics_json(rep.mean)}, {"views", views}};
}

MetricsReport report_from_json(const Json& j) {
    Reader r(j, "report");
    MetricsReport rep;
    if (r.has("mean")) rep.mean = view_metrics_from(r.at("mean"), "report.mean");
    if (r.has("views")) {
        const Json& v = r.at("views");
        if (!v.is_array()) throw ConfigError("report.views", "expected an array");
        for (std::size_t i = 0; i < v.size(); ++i)
            rep.views.push_back(view_metrics_from(v[i], "report.views[" + std::to_string(i) + "]"));
    }
    r.finish();
    return rep;
}

}  // namespace surfelfuse
