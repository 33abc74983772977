// Drives the built `surfelfuse` binary end to end.

#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

struct Outcome {
    int code = -1;
    std::string err;
};

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               (std::string("surfelfuse_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    Outcome run(const std::string& args) const {
        const fs::path err = dir_ / "stderr.txt";
        const std::string cmd = std::string(SURFELFUSE_CLI) + " " + args + " > " + (dir_ / "stdout.txt").string() +
                                " 2> " + err.string();
        const int status = std::system(cmd.c_str());
        Outcome r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.err = slurp(err);
        return r;
    }

    fs::path write(const std::string& name, const std::string& text) const {
        std::ofstream(dir_ / name) << text;
        return dir_ / name;
    }

    static std::string slurp(const fs::path& p) {
        std::ifstream in(p);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    fs::path dir_;
};

const char* kTinyProtocol = R"({"n_train": 2, "n_test": 1, "width": 16, "height": 16, "gt_rays_per_cone": 8,
  "orbit_radius": 0.5, "lidar": {"nx": 4, "ny": 4, "n_bins": 128, "max_range_m": 0.75}})";

}  // namespace

TEST_F(Cli, SimulateIsReproducible) {
    const fs::path cfg = write("sim.json", kTinyProtocol);
    ASSERT_EQ(run("simulate --config " + cfg.string() + " --out " + (dir_ / "a").string()).code, 0);
    ASSERT_EQ(run("simulate --config " + cfg.string() + " --out " + (dir_ / "b").string()).code, 0);
    const Json a = Json::parse(slurp(dir_ / "a" / "run.json"));
    const Json b = Json::parse(slurp(dir_ / "b" / "run.json"));
    EXPECT_EQ(a["command"], "simulate");
    EXPECT_FALSE(a["outputs"].empty());
    EXPECT_EQ(a["outputs"], b["outputs"]);
    EXPECT_EQ(a["config"], b["config"]);
    EXPECT_TRUE(fs::exists(dir_ / "a" / "views" / "0" / "rgb.png"));
    EXPECT_TRUE(fs::exists(dir_ / "a" / "manifest.json"));
}

TEST_F(Cli, MalformedConfigExitsTwoNamingTheField) {
    const fs::path bad = write("bad.json", R"({"n_train": "ten"})");
    const Outcome r = run("simulate --config " + bad.string() + " --out " + (dir_ / "x").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("n_train"), std::string::npos) << r.err;

    const Outcome unknown = run("simulate --config " + write("u.json", R"({"lidar": {"nz": 3}})").string() + " --out " +
                            (dir_ / "x").string());
    EXPECT_EQ(unknown.code, 2);
    EXPECT_NE(unknown.err.find("nz"), std::string::npos) << unknown.err;

    EXPECT_EQ(run("reconstruct --data " + dir_.string()).code, 2);  // --out missing
}

TEST_F(Cli, ReconstructEvalAndMissingChannels) {
    const fs::path cfg = write("sim.json", kTinyProtocol);
    const fs::path data = dir_ / "ds";
    ASSERT_EQ(run("simulate --config " + cfg.string() + " --out " + data.string()).code, 0);
    const fs::path out = dir_ / "rec";
    const Outcome r = run("reconstruct --data " + data.string() + " --out " + out.string() +
                      " --iterations 4 --surfels 40 --checkpoint-every 2");
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* f : {"scene.json", "scene.ply", "trace.csv", "report.json", "report.csv", "run.json",
                          "weights/train_0.csv", "weights/train_0.png", "checkpoints/iter_2/manifest.json"})
        EXPECT_TRUE(fs::exists(out / f)) << f;
    const Json run_json = Json::parse(slurp(out / "run.json"));
    EXPECT_EQ(run_json["config"]["optim"]["iterations"], 4);
    EXPECT_EQ(run_json["config"]["optim"]["loss"]["k"], 50.0);

    EXPECT_EQ(run("eval --data " + data.string() + " --scene " + (out / "scene.json").string() + " --out " +
                  (dir_ / "ev").string() + " --save-renders")
                  .code,
              0);
    EXPECT_TRUE(fs::exists(dir_ / "ev" / "renders" / "0" / "depth.pfm"));

    EXPECT_EQ(run("reconstruct --data " + data.string() + " --out " + out.string() + " --mode bogus").code, 2);

    fs::remove(data / "views" / "0" / "transient.bin");
    const Outcome missing = run("reconstruct --data " + data.string() + " --out " + (dir_ / "r2").string() +
                            " --iterations 2 --mode diffuse-only");
    EXPECT_EQ(missing.code, 3);
    EXPECT_NE(missing.err.find("transient.bin"), std::string::npos) << missing.err;
}

TEST_F(Cli, RankHeaderReportsFullRank) {
    const Outcome r = run("analyze-rank --grid 10 --views 1 2 --out " + (dir_ / "rank.csv").string());
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string csv = slurp(dir_ / "rank.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "# full_rank=100");
    EXPECT_NE(csv.find("config,views,rank,fraction"), std::string::npos);
    EXPECT_EQ(run("analyze-rank --grid 0").code, 2);
}
