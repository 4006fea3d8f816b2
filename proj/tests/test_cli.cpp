#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "evgs/config.hpp"
#include "evgs/events.hpp"
#include "evgs/image_io.hpp"
#include "evgs/rasterizer.hpp"
#include "evgs/scene.hpp"
#include "evgs/trainer.hpp"

namespace fs = std::filesystem;
using namespace evgs;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "evgs_cli_test";

struct Result {
    int code;
    std::string output;
};

Result run(const std::string& args) {
    const fs::path log = kRoot / "last_output.txt";
    const std::string cmd = std::string(EVGS_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream is(log);
    std::stringstream ss;
    ss << is.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

const char* kConfig = R"({
  "seed": 4,
  "scene": {"n_gaussians": 60, "nn_sample": 60},
  "camera": {"width": 24, "height": 20, "n_poses": 30, "duration_us": 30000},
  "gt_scene": {"n": 6},
  "trainer": {"iterations": 6, "max_window": 5, "checkpoint_every": 2}
})";

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        fs::remove_all(kRoot);
        fs::create_directories(kRoot);
        std::ofstream(kRoot / "cfg.json") << kConfig;
    }
    static void TearDownTestSuite() { fs::remove_all(kRoot); }
    static std::string cfg() { return "--config " + (kRoot / "cfg.json").string(); }
    static fs::path dir(const std::string& name) { return kRoot / name; }

    static void simulate_once() {
        if (fs::exists(dir("data") / "meta.json")) return;
        const Result r = run("simulate " + cfg() + " --out " + dir("data").string());
        ASSERT_EQ(r.code, 0) << r.output;
    }
};

}  // namespace

TEST_F(Cli, SimulateWritesDatasetLayout) {
    simulate_once();
    const fs::path d = dir("data");
    for (const char* f : {"events.bin", "trajectory.txt", "meta.json", "gt.ckpt", "gt/frame_000000.png", "gt/frame_000029.png"})
        EXPECT_TRUE(fs::exists(d / f)) << f;
    const EventStream s = load_events((d / "events.bin").string());
    EXPECT_EQ(s.width, 24);
    EXPECT_EQ(s.height, 20);
    EXPECT_EQ(s.threshold, 0.25);
    EXPECT_FALSE(s.events.empty());
    EXPECT_EQ(load_trajectory((d / "trajectory.txt").string()).trajectory.poses.size(), 30u);
}

TEST_F(Cli, SimulateIsByteDeterministic) {
    simulate_once();
    const Result r = run("simulate " + cfg() + " --out " + dir("data2").string());
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* f : {"events.bin", "trajectory.txt", "meta.json", "gt/frame_000007.png"})
        EXPECT_EQ(slurp(dir("data") / f), slurp(dir("data2") / f)) << f;
}

TEST_F(Cli, SimulateOverridesAndFrameDirectory) {
    Result r = run("simulate " + cfg() + " --resolution 16x12 --threshold-A 0.5 --out " + dir("small").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const EventStream s = load_events((dir("small") / "events.bin").string());
    EXPECT_EQ(s.width, 16);
    EXPECT_EQ(s.threshold, 0.5);
    // re-simulate from the rendered frames and the written trajectory
    r = run("simulate " + cfg() + " --threshold-A 0.5 --trajectory " + (dir("small") / "trajectory.txt").string() + " --frames " +
            (dir("small") / "gt").string() + " --out " + dir("from_frames").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_FALSE(load_events((dir("from_frames") / "events.bin").string()).events.empty());
}

TEST_F(Cli, MissingTrajectoryIsUsageError) {
    const std::string missing = (kRoot / "nope" / "trajectory.txt").string();
    const Result r = run("simulate " + cfg() + " --trajectory " + missing + " --out " + dir("x").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find(missing), std::string::npos) << r.output;
}

TEST_F(Cli, BadFlagsAndConfigKeys) {
    EXPECT_EQ(run("simulate --bogus").code, 2);
    EXPECT_EQ(run("").code, 2);
    std::ofstream(kRoot / "bad.json") << R"({"trainer": {"iteratons": 3}})";
    simulate_once();
    const Result r = run("train --config " + (kRoot / "bad.json").string() + " --data " + dir("data").string() + " --out " +
                         dir("bad").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("iteratons"), std::string::npos);
    EXPECT_EQ(run("simulate " + cfg() + " --resolution 12 --out " + dir("y").string()).code, 2);
    EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, TrainRenderEvalPipeline) {
    simulate_once();
    Result r = run("train " + cfg() + " --data " + dir("data").string() + " --out " + dir("run").string());
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* f : {"final.ckpt", "checkpoint.ckpt", "train_log.csv", "config.json"})
        EXPECT_TRUE(fs::exists(dir("run") / f)) << f;
    const Checkpoint ck = load_checkpoint((dir("run") / "final.ckpt").string());
    EXPECT_EQ(ck.iteration, 6u);
    EXPECT_EQ(ck.width, 24u);

    const std::string traj = (dir("data") / "trajectory.txt").string();
    r = run("render " + cfg() + " --checkpoint " + (dir("run") / "final.ckpt").string() + " --trajectory " + traj +
            " --every 10 --out " + dir("renders").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(dir("renders") / "frame_000020.png"));
    EXPECT_FALSE(fs::exists(dir("renders") / "frame_000001.png"));

    r = run("eval --renders " + dir("renders").string() + " --gt " + (dir("data") / "gt").string() +
            " --holdout-every 10 --out " + dir("eval").string());
    ASSERT_EQ(r.code, 0) << r.output;
    std::ifstream csv(dir("eval") / "eval.csv");
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "view,psnr_db,ssim");
    double sum = 0;
    int rows = 0;
    double mean = 0;
    while (std::getline(csv, line)) {
        const auto a = line.find(','), b = line.find(',', a + 1);
        const double v = std::stod(line.substr(a + 1, b - a - 1));
        if (line.rfind("mean,", 0) == 0) mean = v;
        else {
            sum += v;
            ++rows;
        }
    }
    EXPECT_EQ(rows, 3);
    EXPECT_NEAR(mean, sum / rows, 1e-9);

    // mismatched view counts
    EXPECT_EQ(run("eval --renders " + dir("renders").string() + " --gt " + (dir("data") / "gt").string()).code, 2);
}

TEST_F(Cli, EvalOfIdenticalDirectories) {
    simulate_once();
    const std::string gt = (dir("data") / "gt").string();
    const Result r = run("eval --renders " + gt + " --gt " + gt + " --out " + dir("same").string());
    ASSERT_EQ(r.code, 0) << r.output;
    std::ifstream csv(dir("same") / "eval.csv");
    std::string line;
    std::getline(csv, line);
    int identical = 0;
    while (std::getline(csv, line))
        if (line.find(",inf,1.0000000000") != std::string::npos) ++identical;
    EXPECT_EQ(identical, 30);
}

TEST_F(Cli, ZeroIterationCheckpointRendersLikeFreshInit) {
    simulate_once();
    Result r = run("train " + cfg() + " --iterations 0 --data " + dir("data").string() + " --out " + dir("zero").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const RunConfig c = load_config((kRoot / "cfg.json").string());
    const GaussianCloud init = init_random_cloud(c.scene.n_gaussians, c.scene.bounds, c.seed, c.scene.init);
    EXPECT_EQ(load_checkpoint((dir("zero") / "final.ckpt").string()).cloud, init);

    const std::string traj = (dir("data") / "trajectory.txt").string();
    r = run("render " + cfg() + " --format f64 --every 15 --checkpoint " + (dir("zero") / "final.ckpt").string() +
            " --trajectory " + traj + " --out " + dir("zero_r").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const TrajectoryFile tf = load_trajectory(traj);
    const Image expected = render(init, tf.trajectory.poses[15], tf.intrinsics).pixels;
    EXPECT_EQ(read_f64((dir("zero_r") / "frame_000015.f64").string()), expected);
}

TEST_F(Cli, RenderRejectsResolutionMismatch) {
    simulate_once();
    Result r = run("simulate " + cfg() + " --resolution 16x12 --out " + dir("other").string());
    ASSERT_EQ(r.code, 0);
    r = run("render --checkpoint " + (dir("data") / "gt.ckpt").string() + " --trajectory " +
            (dir("other") / "trajectory.txt").string() + " --out " + dir("mm").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("resolution"), std::string::npos);
}

TEST_F(Cli, ResumeAfterInterruption) {
    simulate_once();
    const std::string base = "train " + cfg() + " --data " + dir("data").string();
    ASSERT_EQ(run(base + " --out " + dir("full").string()).code, 0);

    // state of an interrupted run: a checkpoint at iteration 4 under the same config
    const RunConfig c = load_config((dir("full") / "config.json").string());
    Dataset ds;
    ds.events = load_events((dir("data") / "events.bin").string());
    const TrajectoryFile tf = load_trajectory((dir("data") / "trajectory.txt").string());
    ds.trajectory = tf.trajectory;
    ds.intrinsics = tf.intrinsics;
    Trainer t(init_random_cloud(c.scene.n_gaussians, c.scene.bounds, c.seed, c.scene.init), ds, c.trainer, c.loss, c.raster);
    for (int i = 0; i < 4; ++i) t.step();
    fs::create_directories(dir("cut"));
    save_checkpoint((dir("cut") / "checkpoint.ckpt").string(), t.checkpoint(config_hash(c)));

    Result r = run(base + " --resume " + (dir("cut") / "checkpoint.ckpt").string() + " --out " + dir("cut").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(slurp(dir("cut") / "final.ckpt"), slurp(dir("full") / "final.ckpt"));

    r = run(base + " --seed 99 --resume " + (dir("cut") / "checkpoint.ckpt").string() + " --out " + dir("cut2").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("different config"), std::string::npos);
}
