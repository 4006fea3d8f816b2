#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "evgs/dataset.hpp"
#include "evgs/trainer.hpp"
#include "test_util.hpp"

using namespace evgs;
using namespace evgs::testing;

namespace {

const SyntheticDataset& tiny_dataset() {
    static const SyntheticDataset ds = [] {
        AnalyticSceneConfig scfg;
        scfg.n = 6;
        const GaussianCloud gt = make_analytic_scene(3, scfg);
        const Trajectory traj = orbit_trajectory(4.0, 0.3, 30, 30000);
        return make_synthetic_dataset(gt, traj, Intrinsics::from_fov(16, 16, 0.7), 0.25, 4.8, 1e-5);
    }();
    return ds;
}

TrainConfig tiny_config(std::uint64_t iters) {
    TrainConfig c;
    c.iterations = iters;
    c.max_window = 5;
    c.seed = 11;
    return c;
}

GaussianCloud tiny_init() { return init_random_cloud(40, Box3{}, 2); }

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / ("evgs_" + name)) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST(PositionLr, EndpointsAndMidpoint) {
    const TrainConfig c;
    EXPECT_EQ(position_lr(0, c), 1.6e-4);
    EXPECT_EQ(position_lr(c.iterations, c), 1.6e-6);
    EXPECT_LE(std::abs(position_lr(c.iterations / 2, c) - 1.6e-5) / 1.6e-5, 1e-12);
    for (std::uint64_t i = 1; i <= c.iterations; i += 997) EXPECT_LT(position_lr(i, c), position_lr(i - 1, c));
    EXPECT_THROW(position_lr(c.iterations + 1, c), InvalidParameter);
}

TEST(PositionLr, DefaultRates) {
    const TrainConfig c;
    EXPECT_EQ(c.lr_intensity, 2.5e-3);
    EXPECT_EQ(c.lr_opacity, 5e-2);
    EXPECT_EQ(c.lr_scale, 5e-3);
    EXPECT_EQ(c.lr_rotation, 1e-3);
    EXPECT_EQ(c.iterations, 50000u);
    EXPECT_EQ(c.max_window, 50);
}

TEST(Adam, ZeroGradientLeavesCloud) {
    GaussianCloud c = make_analytic_scene(1);
    const GaussianCloud before = c;
    Adam adam(c.size(), 0.9, 0.999, 1e-15);
    CloudGradients g(c.size());
    adam.step(c, g, GroupRates{1, 1, 1, 1, 1});
    EXPECT_EQ(c, before);
}

TEST(Adam, FirstStepIsSignedRate) {
    GaussianCloud c;
    c.resize(1);
    c.rotations = {1, 0, 0, 0};
    Adam adam(1, 0.9, 0.999, 1e-15);
    CloudGradients g(1);
    g.opacity_logits[0] = 0.37;
    g.intensity[0] = -4e-3;
    adam.step(c, g, GroupRates{1e-3, 1e-3, 1e-3, 5e-2, 2.5e-3});
    // m_hat = g, v_hat = g^2, so the step is -lr g / (|g| + eps)
    EXPECT_NEAR(c.opacity_logits[0], -5e-2, 1e-15);
    EXPECT_NEAR(c.intensity[0], 2.5e-3, 1e-15);
}

TEST(Adam, RejectsNonFiniteGradientNamingGroup) {
    GaussianCloud c = make_analytic_scene(1);
    Adam adam(c.size(), 0.9, 0.999, 1e-15);
    CloudGradients g(c.size());
    g.log_scales[4] = NAN;
    try {
        adam.step(c, g, GroupRates{1, 1, 1, 1, 1});
        FAIL();
    } catch (const NonFiniteGradient& e) {
        EXPECT_EQ(e.group(), ParamGroup::scale);
        EXPECT_NE(std::string(e.what()).find("scale"), std::string::npos);
    }
}

TEST(Adam, RenormalisesUpdatedQuaternions) {
    GaussianCloud c = make_analytic_scene(1, AnalyticSceneConfig{.n = 3});
    c.rotation(2) *= 3.0;  // untouched below, stays unnormalised
    Adam adam(c.size(), 0.9, 0.999, 1e-15);
    CloudGradients g(c.size());
    g.rotations[0] = 0.5;
    adam.step(c, g, GroupRates{1, 0.1, 1, 1, 1});
    EXPECT_NEAR(c.rotation(0).norm(), 1.0, 1e-15);
    EXPECT_NEAR(c.rotation(2).norm(), 3.0, 1e-12);
}

TEST(DrawWindow, AvoidsHeldOutFrames) {
    TrainConfig c;
    c.max_window = 50;
    std::mt19937_64 rng(4);
    for (int i = 0; i < 5000; ++i) {
        const Window w = draw_window(200, c, rng);
        EXPECT_LT(w.from, w.to);
        EXPECT_LE(w.to - w.from, 50u);
        EXPECT_NE(w.to % 10, 0u);
        EXPECT_NE(w.from % 10, 0u);
    }
    c.holdout_every = 0;
    bool saw_zero = false;
    for (int i = 0; i < 5000; ++i) saw_zero |= draw_window(200, c, rng).from == 0;
    EXPECT_TRUE(saw_zero);
}

TEST(WindowBackward, MatchesFiniteDifferenceOfWindowLoss) {
    const Dataset& d = tiny_dataset().data;
    GaussianCloud c = smooth_random_scene(2, 4);
    // place the camera-space test scene in front of pose 7
    const Pose& p7 = d.trajectory.poses[7];
    const Mat3 rt = p7.rotation_matrix().transpose();
    for (std::size_t i = 0; i < c.size(); ++i) c.position(i) = rt * (Vec3(c.position(i)) - p7.translation);
    const Window w{4, 7};
    LossConfig lcfg;
    const RasterConfig rcfg;
    CloudGradients g(c.size());
    window_backward(c, d, w, lcfg, rcfg, g);
    const CloudGradients fd = finite_difference(
        c, [&](const GaussianCloud& p) { return window_loss(p, d, w, lcfg, rcfg).loss.total; }, 1e-5);
    const GradCheck r = compare_gradients(g, fd, 1e-4, 1e-7);
    EXPECT_TRUE(r.ok) << r.worst_where << " rel " << r.worst_rel << " abs " << r.worst_abs;
}

TEST(Trainer, IterationsZeroReturnsInitialisation) {
    const GaussianCloud init = tiny_init();
    Trainer t(init, tiny_dataset().data, tiny_config(0));
    const Checkpoint ck = train(t);
    EXPECT_EQ(ck.cloud, init);
    EXPECT_EQ(ck.iteration, 0u);
}

TEST(Trainer, DeterministicAndInvariantsHold) {
    auto run = [] {
        Trainer t(tiny_init(), tiny_dataset().data, tiny_config(15));
        std::vector<LogRow> rows;
        while (!t.done()) {
            rows.push_back(t.step());
            t.cloud().validate();
        }
        return std::make_pair(t.cloud(), rows);
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    ASSERT_EQ(a.second.size(), 15u);
    for (std::size_t i = 0; i < a.second.size(); ++i) {
        EXPECT_EQ(a.second[i].total, b.second[i].total);
        EXPECT_EQ(a.second[i].iter, i + 1);
        EXPECT_TRUE(std::isfinite(a.second[i].total));
    }
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
    TempDir dir("resume");
    TrainConfig cfg = tiny_config(12);
    cfg.checkpoint_every = 5;
    Trainer full(tiny_init(), tiny_dataset().data, cfg);
    train(full, {dir.path / "full", 0, {}});

    // crash after iteration 7: the last checkpoint is at iteration 5
    TrainOptions popts{dir.path / "part", 0, {}};
    TrainOptions crash_opts = popts;
    crash_opts.on_step = [](const LogRow& r) {
        if (r.iter == 7) throw std::runtime_error("simulated crash");
    };
    Trainer crash(tiny_init(), tiny_dataset().data, cfg);
    EXPECT_THROW(train(crash, crash_opts), std::runtime_error);
    const Checkpoint ck = load_checkpoint((dir.path / "part" / "checkpoint.ckpt").string());
    EXPECT_EQ(ck.iteration, 5u);
    Trainer resumed(tiny_init(), tiny_dataset().data, cfg);
    resumed.restore(ck);
    train(resumed, popts);

    EXPECT_EQ(resumed.cloud(), full.cloud());
    EXPECT_EQ(slurp(dir.path / "part" / "final.ckpt"), slurp(dir.path / "full" / "final.ckpt"));
    EXPECT_EQ(slurp(dir.path / "part" / "train_log.csv"), slurp(dir.path / "full" / "train_log.csv"));
}

TEST(Trainer, LogFormat) {
    TempDir dir("log");
    Trainer t(tiny_init(), tiny_dataset().data, tiny_config(3));
    train(t, {dir.path, 0, {}});
    std::ifstream is(dir.path / "train_log.csv");
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "iter,total,L_e,dssim,lr_pos,n_gaussians");
    int rows = 0;
    while (std::getline(is, line)) {
        ++rows;
        EXPECT_EQ(line.rfind(std::to_string(rows) + ",", 0), 0u);
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5);
    }
    EXPECT_EQ(rows, 3);
}

TEST(Trainer, PruningDropsTransparentGaussians) {
    GaussianCloud init = tiny_init();
    for (std::size_t i = 0; i < 10; ++i) init.opacity_logits[i] = -30.0;
    TrainConfig cfg = tiny_config(2);
    cfg.prune = true;
    cfg.prune_every = 2;
    Trainer t(init, tiny_dataset().data, cfg);
    train(t);
    EXPECT_EQ(t.cloud().size(), 30u);
    t.cloud().validate();
}

TEST(Trainer, DivergenceSavesStateAndThrows) {
    TempDir dir("diverge");
    GaussianCloud init = tiny_init();
    init.intensity[0] = NAN;
    Trainer good(tiny_init(), tiny_dataset().data, tiny_config(3));
    Checkpoint ck = good.checkpoint();
    ck.cloud = init;
    EXPECT_THROW(good.restore(ck), InvalidParameter);

    LossConfig lcfg;
    TrainConfig cfg = tiny_config(3);
    cfg.lr_position_init = cfg.lr_position_final = 1e300;
    cfg.lr_scale = 1e300;
    Trainer bad(tiny_init(), tiny_dataset().data, cfg, lcfg);
    EXPECT_ANY_THROW(train(bad, {dir.path, 0, {}}));
    EXPECT_TRUE(std::filesystem::exists(dir.path / "diverged.ckpt"));
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    c.validate();
    c.lr_opacity = 0;
    EXPECT_THROW(c.validate(), InvalidParameter);
    c = TrainConfig{};
    c.beta2 = 1.0;
    EXPECT_THROW(c.validate(), InvalidParameter);
    c = TrainConfig{};
    c.holdout_every = 1;
    EXPECT_THROW(c.validate(), InvalidParameter);
}

TEST(Dataset, ValidateChecksSensorSize) {
    Dataset d = tiny_dataset().data;
    d.validate();
    d.events.width = 17;
    EXPECT_THROW(d.validate(), InvalidParameter);
}
