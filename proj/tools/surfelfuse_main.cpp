// surfelfuse command line: simulate, reconstruct, eval, analyze-rank, export-ply.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
// SURFELFUSE_THREADS sets the OpenMP thread count.

#include "surfelfuse/analysis.hpp"
#include "surfelfuse/config.hpp"
#include "surfelfuse/io.hpp"
#include "surfelfuse/optim.hpp"
#include "surfelfuse/sim.hpp"

#include <CLI11.hpp>
#include <omp.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#ifndef SURFELFUSE_VERSION
#define SURFELFUSE_VERSION "unknown"
#endif

using namespace surfelfuse;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

Json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string(), "cannot open config file");
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string(), std::string("malformed JSON: ") + e.what());
    }
}

// Run manifest: everything needed to repeat the command, plus hashes of what it read and wrote.
class RunManifest {
public:
    RunManifest(std::string command, int argc, char** argv)
        : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {
        for (int i = 0; i < argc; ++i) argv_.push_back(argv[i]);
    }

    void config(const std::string& name, Json value) { config_[name] = std::move(value); }
    void input(const fs::path& path) { inputs_[path.string()] = sha256_file(path); }
    void output(const fs::path& root, const fs::path& path) {
        outputs_[fs::relative(path, root).generic_string()] = sha256_file(path);
    }

    void write(const fs::path& dir) const {
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        Json j{{"command", command_},
               {"argv", argv_},
               {"code_version", SURFELFUSE_VERSION},
               {"config", config_},
               {"inputs", inputs_},
               {"outputs", outputs_},
               {"threads", omp_get_max_threads()},
               {"wall_time_s", wall}};
        write_text_atomic(dir / "run.json", j.dump(2) + "\n");
    }

private:
    std::string command_;
    std::vector<std::string> argv_;
    Json config_ = Json::object();
    std::map<std::string, std::string> inputs_;
    std::map<std::string, std::string> outputs_;
    std::chrono::steady_clock::time_point start_;
};

void apply_thread_env() {
    if (const char* env = std::getenv("SURFELFUSE_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || n < 1) throw ConfigError("SURFELFUSE_THREADS", "expected a positive integer");
        omp_set_num_threads(static_cast<int>(n));
    }
}

// ---- simulate --------------------------------------------------------------

struct SimulateArgs {
    std::string config;
    std::string out;
};

int run_simulate(const SimulateArgs& a, int argc, char** argv) {
    RunManifest run("simulate", argc, argv);
    ProtocolConfig cfg = protocol_from_json(read_json_file(a.config));
    run.input(a.config);
    run.config("protocol", to_json(cfg));
    const DatasetBundle bundle = make_protocol_dataset(cfg);
    const fs::path out(a.out);
    save_dataset(bundle, out);
    run.output(out, out / "manifest.json");
    run.write(out);
    std::cout << "wrote " << bundle.views.size() << " views to " << out.string() << "\n";
    return 0;
}

// ---- reconstruct -----------------------------------------------------------

struct ReconstructArgs {
    std::string data;
    std::string out;
    std::string mode = "fusion";
    std::string config;
    std::optional<int> iterations;
    std::optional<int> n_surfels;
    std::optional<std::uint64_t> seed;
    std::optional<double> lambda_ssim, k, a, b, lambda_reg, lambda_lidar, lambda_sparse;
    int checkpoint_every = 0;
};

void write_scene_outputs(const fs::path& dir, const Scene& scene, RunManifest* run, const fs::path& root) {
    fs::create_directories(dir);
    write_text_atomic(dir / "scene.json", to_json(scene).dump() + "\n");
    write_ply(dir / "scene.ply", scene);
    if (run) {
        run->output(root, dir / "scene.json");
        run->output(root, dir / "scene.ply");
    }
}

void write_report(const fs::path& dir, const MetricsReport& report, RunManifest& run) {
    write_text_atomic(dir / "report.json", to_json(report).dump(2) + "\n");
    write_report_csv(dir / "report.csv", report);
    run.output(dir, dir / "report.json");
    run.output(dir, dir / "report.csv");
}

int run_reconstruct(const ReconstructArgs& a, int argc, char** argv) {
    RunManifest run("reconstruct", argc, argv);
    OptimConfig cfg;
    if (!a.config.empty()) {
        cfg = optim_from_json(read_json_file(a.config));
        run.input(a.config);
    }
    try {
        cfg.mode = parse_loss_mode(a.mode);
    } catch (const InvalidParameter& e) {
        throw ConfigError("mode", e.what());
    }
    if (a.iterations) cfg.iterations = *a.iterations;
    if (a.n_surfels) cfg.n_surfels = *a.n_surfels;
    if (a.seed) cfg.seed = *a.seed;
    if (a.lambda_ssim) cfg.loss.lambda_ssim = *a.lambda_ssim;
    if (a.k) cfg.loss.k = *a.k;
    if (a.a) cfg.loss.a = *a.a;
    if (a.b) cfg.loss.b = *a.b;
    if (a.lambda_reg) cfg.loss.lambda_reg = *a.lambda_reg;
    if (a.lambda_lidar) cfg.loss.lambda_lidar = *a.lambda_lidar;
    if (a.lambda_sparse) cfg.loss.lambda_sparse = *a.lambda_sparse;
    // Round-trip through the strict parser so flag overrides get the same validation as files.
    cfg = optim_from_json(to_json(cfg));

    const fs::path data(a.data);
    const DatasetBundle bundle = load_dataset(data);
    check_channels(bundle, cfg.mode);
    run.input(data / "manifest.json");  // lists a hash for every dataset file
    run.config("optim", to_json(cfg));
    run.config("dataset", to_json(bundle.config));

    const fs::path out(a.out);
    fs::create_directories(out);
    const auto [lo, hi] = scene_bounds(make_scene(bundle.config.scene, bundle.config.variant));

    // Adaptive weight maps of the training views, as the loss sees them.
    const auto train = bundle.train_views();
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto map = compute_patch_weights(train[i]->rgb, bundle.config.lidar.nx, bundle.config.lidar.ny, cfg.loss);
        const fs::path wdir = out / "weights";
        fs::create_directories(wdir);
        const std::string stem = "train_" + std::to_string(i);
        write_weight_map_csv(wdir / (stem + ".csv"), map);
        write_weight_map_png(wdir / (stem + ".png"), map);
        run.output(out, wdir / (stem + ".csv"));
        run.output(out, wdir / (stem + ".png"));
    }

    CheckpointFn checkpoint = [&](int iteration, const Scene& scene, const std::vector<TraceRow>& trace) {
        const fs::path cdir = out / "checkpoints" / ("iter_" + std::to_string(iteration));
        write_scene_outputs(cdir, scene, &run, out);
        Json m{{"iteration", iteration}, {"seed", cfg.seed}, {"config", to_json(cfg)}};
        write_text_atomic(cdir / "manifest.json", m.dump(2) + "\n");
        run.output(out, cdir / "manifest.json");
        write_trace_csv(cdir / "trace.csv", trace);
        run.output(out, cdir / "trace.csv");
        std::cout << "checkpoint " << iteration << "\n";
    };
    const OptimizeResult result = optimize(bundle, cfg, lo, hi, checkpoint, a.checkpoint_every);

    write_scene_outputs(out, result.scene, &run, out);
    write_trace_csv(out / "trace.csv", result.trace);
    run.output(out, out / "trace.csv");
    write_report(out, result.metrics, run);
    run.config("diverged", result.diverged);
    run.config("last_good_iteration", result.last_good_iteration);
    run.write(out);

    const auto& m = result.metrics.mean;
    std::cout << "psnr " << m.psnr << " ssim " << m.ssim << " depth_mae "
              << (m.depth_mae ? std::to_string(*m.depth_mae) : "n/a") << " normal_mae "
              << (m.normal_mae ? std::to_string(*m.normal_mae) : "n/a") << "\n";
    if (result.diverged) {
        std::cerr << "error: optimization diverged after iteration " << result.last_good_iteration
                  << "; outputs hold the last finite state\n";
        return kExitDivergence;
    }
    return 0;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string data;
    std::string scene;
    std::string out;
    bool save_renders = false;
};

Scene load_scene(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open scene " + path.string());
    try {
        return scene_from_json(Json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

int run_eval(const EvalArgs& a, int argc, char** argv) {
    RunManifest run("eval", argc, argv);
    const fs::path data(a.data);
    const DatasetBundle bundle = load_dataset(data);
    const Scene scene = load_scene(a.scene);
    run.input(data / "manifest.json");  // lists a hash for every dataset file
    run.input(a.scene);
    const fs::path out(a.out);
    fs::create_directories(out);
    const MetricsReport report = evaluate_test_views(scene, bundle, RasterConfig{});
    write_report(out, report, run);
    if (a.save_renders) {
        const auto test = bundle.test_views();
        for (std::size_t i = 0; i < test.size(); ++i) {
            const fs::path vdir = out / "renders" / std::to_string(i);
            fs::create_directories(vdir);
            const RenderBuffers b = render_image(scene, test[i]->gt.camera);
            write_png(vdir / "rgb.png", b.color);
            write_pfm(vdir / "depth.pfm", b.depth);
            write_pfm(vdir / "alpha.pfm", b.alpha);
            for (const char* f : {"rgb.png", "depth.pfm", "alpha.pfm"}) run.output(out, vdir / f);
        }
    }
    run.write(out);
    std::cout << "depth_mae " << (report.mean.depth_mae ? std::to_string(*report.mean.depth_mae) : "n/a") << "\n";
    return 0;
}

// ---- analyze-rank ----------------------------------------------------------

struct RankArgs {
    int grid = 30;
    int max_views = 20;
    std::vector<int> views;
    double sparse_ratio = 50.0;
    int pixels = 8;
    int bins = 64;
    std::string out;
};

int run_analyze_rank(const RankArgs& a) {
    RankSweepConfig cfg;
    if (a.grid < 1) throw ConfigError("grid", "must be >= 1");
    if (a.pixels < 1) throw ConfigError("pixels", "must be >= 1");
    if (a.bins < 1) throw ConfigError("bins", "must be >= 1");
    if (!(a.sparse_ratio > 0)) throw ConfigError("sparse-ratio", "must be positive");
    cfg.grid.n = a.grid;
    cfg.sparse_ratio = a.sparse_ratio;
    cfg.diffuse.pixels_per_view = a.pixels;
    cfg.diffuse.bins = a.bins;
    cfg.view_counts.clear();
    if (a.views.empty())
        for (int v = 1; v <= a.max_views; ++v) cfg.view_counts.push_back(v);
    else
        cfg.view_counts = a.views;
    for (int v : cfg.view_counts)
        if (v < 1) throw ConfigError("views", "view counts must be >= 1");

    std::ostringstream os;
    os << "# full_rank=" << cfg.grid.cell_count() << "\n";
    os << "config,views,rank,fraction\n";
    for (const auto& p : rank_sweep(cfg)) os << p.config << ',' << p.views << ',' << p.rank << ',' << p.fraction << '\n';
    if (a.out.empty()) {
        std::cout << os.str();
    } else {
        write_text_atomic(a.out, os.str());
    }
    return 0;
}

// ---- export-ply ------------------------------------------------------------

struct ExportArgs {
    std::string scene;
    std::string out;
};

int run_export_ply(const ExportArgs& a) {
    write_ply(a.out, load_scene(a.scene));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Surfel reconstruction from RGB and diffuse LiDAR transients.\n"
                 "Modes: rgb-only, sparse-baseline, diffuse-only, sparse-only, fusion, fusion-no-adaptive.\n"
                 "There is no monocular-depth baseline (it would need an external model)."};
    app.set_version_flag("--version", SURFELFUSE_VERSION);
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* c_sim = app.add_subcommand("simulate", "Render a protocol dataset from a JSON config");
    c_sim->add_option("--config", sim.config, "Protocol config JSON")->required();
    c_sim->add_option("--out", sim.out, "Output dataset directory")->required();

    ReconstructArgs rec;
    auto* c_rec = app.add_subcommand("reconstruct", "Optimize surfels against a dataset and score the test views");
    c_rec->add_option("--data", rec.data, "Dataset directory")->required();
    c_rec->add_option("--out", rec.out, "Output directory")->required();
    c_rec->add_option("--mode", rec.mode, "Loss mode");
    c_rec->add_option("--config", rec.config, "Optimizer config JSON (flags below override it)");
    c_rec->add_option("--iterations", rec.iterations);
    c_rec->add_option("--surfels", rec.n_surfels, "Initial surfel count");
    c_rec->add_option("--seed", rec.seed);
    c_rec->add_option("--lambda-ssim", rec.lambda_ssim);
    c_rec->add_option("--k", rec.k, "Sigmoid steepness of the adaptive weight");
    c_rec->add_option("--a", rec.a, "SNR slope of the adaptive threshold");
    c_rec->add_option("--b", rec.b, "Offset of the adaptive threshold");
    c_rec->add_option("--lambda-reg", rec.lambda_reg);
    c_rec->add_option("--lambda-lidar", rec.lambda_lidar);
    c_rec->add_option("--lambda-sparse", rec.lambda_sparse);
    c_rec->add_option("--checkpoint-every", rec.checkpoint_every, "Write scene + manifest every N iterations");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Score a saved scene on a dataset's test views");
    c_eval->add_option("--data", ev.data)->required();
    c_eval->add_option("--scene", ev.scene, "scene.json from reconstruct")->required();
    c_eval->add_option("--out", ev.out)->required();
    c_eval->add_flag("--save-renders", ev.save_renders, "Also write color, depth and alpha of every test view");

    RankArgs rank;
    auto* c_rank = app.add_subcommand("analyze-rank", "Rank of the linear LiDAR model versus view count");
    c_rank->add_option("--grid", rank.grid, "Cells per side");
    c_rank->add_option("--max-views", rank.max_views, "Sweep 1..N views when --views is absent");
    c_rank->add_option("--views", rank.views, "Explicit view counts");
    c_rank->add_option("--sparse-ratio", rank.sparse_ratio, "Diffuse wedge width over sparse wedge width");
    c_rank->add_option("--pixels", rank.pixels, "Pixels per view");
    c_rank->add_option("--bins", rank.bins, "Range bins");
    c_rank->add_option("--out", rank.out, "CSV path (stdout when absent)");

    ExportArgs ex;
    auto* c_ply = app.add_subcommand("export-ply", "Convert scene.json to PLY");
    c_ply->add_option("--scene", ex.scene)->required();
    c_ply->add_option("--out", ex.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        apply_thread_env();
        if (*c_sim) return run_simulate(sim, argc, argv);
        if (*c_rec) return run_reconstruct(rec, argc, argv);
        if (*c_eval) return run_eval(ev, argc, argv);
        if (*c_rank) return run_analyze_rank(rank);
        if (*c_ply) return run_export_ply(ex);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const InvalidParameter& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
