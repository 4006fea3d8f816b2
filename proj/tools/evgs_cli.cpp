// evgs: simulate event datasets, train Gaussian clouds from events, render
// and evaluate.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "evgs/config.hpp"
#include "evgs/dataset.hpp"
#include "evgs/events.hpp"
#include "evgs/image_io.hpp"
#include "evgs/metrics.hpp"
#include "evgs/trainer.hpp"

namespace fs = std::filesystem;
using namespace evgs;

namespace {

// Usage or validation problem: exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
    std::int64_t iterations = -1;
    std::string resolution;
    double threshold = 0.0;
};

void require_file(const std::string& path, const char* what) {
    if (path.empty()) throw UsageError(std::string("missing ") + what + " path");
    if (!fs::exists(path)) throw UsageError(std::string(what) + " not found: " + path);
}

std::pair<int, int> parse_resolution(const std::string& s) {
    std::smatch m;
    static const std::regex re(R"((\d+)[xX](\d+))");
    if (!std::regex_match(s, m, re)) throw UsageError("--resolution expects WIDTHxHEIGHT, got " + s);
    return {std::stoi(m[1]), std::stoi(m[2])};
}

RunConfig resolve_config(const Common& c, const std::string& fallback = {}) {
    RunConfig cfg;
    if (!c.config.empty()) {
        require_file(c.config, "config");
        cfg = load_config(c.config);
    } else if (!fallback.empty() && fs::exists(fallback)) {
        cfg = load_config(fallback);
    }
    if (c.seed_set) {
        cfg.seed = c.seed;
        cfg.trainer.seed = c.seed;
    }
    if (c.iterations >= 0) cfg.trainer.iterations = static_cast<std::uint64_t>(c.iterations);
    if (!c.resolution.empty()) std::tie(cfg.camera.width, cfg.camera.height) = parse_resolution(c.resolution);
    if (c.threshold != 0.0) cfg.threshold = c.threshold;
    cfg.validate();
    return cfg;
}

std::string frame_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%06zu.png", i);
    return buf;
}

// frame_NNNNNN.png files of a directory, sorted by name.
std::vector<fs::path> list_frames(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir.string());
    static const std::regex re(R"(frame_\d{6}\.png)");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && std::regex_match(e.path().filename().string(), re)) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

std::size_t frame_index(const fs::path& p) { return std::stoul(p.stem().string().substr(6)); }

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw IoError("cannot write " + p.string());
    os << s;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Common& c, const std::string& traj_path, const std::string& frames_dir) {
    RunConfig cfg = resolve_config(c);
    const fs::path out(c.out);
    Trajectory traj;
    Intrinsics k;
    if (!traj_path.empty()) {
        require_file(traj_path, "trajectory file");
        const TrajectoryFile tf = load_trajectory(traj_path);
        traj = tf.trajectory;
        k = tf.intrinsics;
        if (!c.resolution.empty() && (k.width != cfg.camera.width || k.height != cfg.camera.height))
            throw UsageError("--resolution disagrees with the trajectory intrinsics");
    } else {
        traj = cfg.camera.trajectory();
        k = cfg.camera.intrinsics();
    }
    cfg.camera.width = k.width;
    cfg.camera.height = k.height;

    SyntheticDataset ds;
    std::optional<GaussianCloud> gt;
    if (!frames_dir.empty()) {
        const auto files = list_frames(frames_dir);
        if (files.size() != traj.poses.size())
            throw UsageError("frame directory holds " + std::to_string(files.size()) + " frames for " +
                             std::to_string(traj.poses.size()) + " poses");
        std::vector<std::int64_t> ts;
        for (std::size_t i = 0; i < files.size(); ++i) {
            ds.frames.push_back(read_png(files[i].string()));
            if (ds.frames.back().width != k.width || ds.frames.back().height != k.height)
                throw UsageError("frame " + files[i].string() + " does not match the camera resolution");
            ts.push_back(traj.poses[i].timestamp_us);
        }
        ds.data.events = simulate_events(ds.frames, ts, cfg.threshold, cfg.loss.gamma, cfg.loss.eps);
        ds.data.trajectory = traj;
        ds.data.intrinsics = k;
    } else {
        gt = make_analytic_scene(cfg.gt_seed, cfg.gt_scene);
        ds = make_synthetic_dataset(*gt, traj, k, cfg.threshold, cfg.loss.gamma, cfg.loss.eps, cfg.raster);
    }

    fs::create_directories(out / "gt");
    save_events((out / "events.bin").string(), ds.data.events);
    save_trajectory((out / "trajectory.txt").string(), traj, k);
    for (std::size_t i = 0; i < ds.frames.size(); ++i) write_png((out / "gt" / frame_name(i)).string(), ds.frames[i]);
    if (gt) {
        Checkpoint ck;
        ck.cloud = *gt;
        ck.config_hash = config_hash(cfg);
        ck.width = static_cast<std::uint32_t>(k.width);
        ck.height = static_cast<std::uint32_t>(k.height);
        save_checkpoint((out / "gt.ckpt").string(), ck);
    }
    write_text(out / "meta.json", dump_config(cfg));
    std::cout << "simulated " << ds.data.events.events.size() << " events over " << traj.poses.size() << " poses ("
              << k.width << "x" << k.height << ", A=" << cfg.threshold << ") -> " << out.string() << "\n";
    return 0;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& resume) {
    const fs::path data(data_dir);
    if (!fs::is_directory(data)) throw UsageError("dataset directory not found: " + data_dir);
    require_file((data / "events.bin").string(), "event file");
    require_file((data / "trajectory.txt").string(), "trajectory file");
    RunConfig cfg = resolve_config(c, (data / "meta.json").string());

    Dataset ds;
    ds.events = load_events((data / "events.bin").string());
    const TrajectoryFile tf = load_trajectory((data / "trajectory.txt").string());
    ds.trajectory = tf.trajectory;
    ds.intrinsics = tf.intrinsics;
    if (c.threshold != 0.0) ds.events.threshold = c.threshold;
    if (!c.resolution.empty() && (cfg.camera.width != ds.intrinsics.width || cfg.camera.height != ds.intrinsics.height))
        throw UsageError("--resolution disagrees with the dataset");
    cfg.camera.width = ds.intrinsics.width;
    cfg.camera.height = ds.intrinsics.height;
    ds.validate();

    const std::uint64_t hash = config_hash(cfg);
    GaussianCloud init = init_random_cloud(cfg.scene.n_gaussians, cfg.scene.bounds, cfg.seed, cfg.scene.init);
    Trainer trainer(std::move(init), std::move(ds), cfg.trainer, cfg.loss, cfg.raster);
    if (!resume.empty()) {
        require_file(resume, "checkpoint");
        const Checkpoint ck = load_checkpoint(resume);
        if (ck.config_hash != hash) throw UsageError("checkpoint " + resume + " was written under a different config");
        trainer.restore(ck);
    }

    const fs::path out(c.out);
    fs::create_directories(out);
    write_text(out / "config.json", dump_config(cfg));
    const std::uint64_t every = std::max<std::uint64_t>(1, cfg.trainer.iterations / 20);
    TrainOptions opts;
    opts.out_dir = out;
    opts.config_hash = hash;
    opts.on_step = [&](const LogRow& r) {
        if (r.iter % every == 0 || r.iter == cfg.trainer.iterations)
            std::fprintf(stderr, "iter %llu/%llu  loss %.6g  L_e %.6g  n=%zu\n", static_cast<unsigned long long>(r.iter),
                         static_cast<unsigned long long>(cfg.trainer.iterations), r.total, r.event, r.n_gaussians);
    };
    const Checkpoint final_ck = train(trainer, opts);
    std::cout << "trained " << final_ck.iteration << " iterations, " << final_ck.cloud.size() << " Gaussians -> "
              << (out / "final.ckpt").string() << "\n";
    return 0;
}

int cmd_render(const Common& c, const std::string& ckpt_path, const std::string& traj_path, const std::string& format,
               int every) {
    require_file(ckpt_path, "checkpoint");
    require_file(traj_path, "trajectory file");
    if (format != "png" && format != "pfm" && format != "f64") throw UsageError("--format must be png, pfm or f64");
    if (every < 1) throw UsageError("--every must be >= 1");
    RunConfig cfg = resolve_config(c);
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const TrajectoryFile tf = load_trajectory(traj_path);
    if (ck.width != 0 && (static_cast<int>(ck.width) != tf.intrinsics.width || static_cast<int>(ck.height) != tf.intrinsics.height))
        throw UsageError("checkpoint resolution " + std::to_string(ck.width) + "x" + std::to_string(ck.height) +
                         " does not match trajectory resolution " + std::to_string(tf.intrinsics.width) + "x" +
                         std::to_string(tf.intrinsics.height));
    const fs::path out(c.out);
    fs::create_directories(out);
    std::size_t n = 0;
    for (std::size_t i = 0; i < tf.trajectory.poses.size(); i += static_cast<std::size_t>(every)) {
        const Image img = render(ck.cloud, tf.trajectory.poses[i], tf.intrinsics, cfg.raster).pixels;
        const fs::path base = out / frame_name(i);
        if (format == "png") write_png(base.string(), img);
        else if (format == "pfm") write_pfm(fs::path(base).replace_extension(".pfm").string(), img);
        else write_f64(fs::path(base).replace_extension(".f64").string(), img);
        ++n;
    }
    std::cout << "rendered " << n << " views -> " << out.string() << "\n";
    return 0;
}

int cmd_eval(const Common& c, const std::string& renders_dir, const std::string& gt_dir, int holdout_every) {
    if (holdout_every < 0) throw UsageError("--holdout-every must be >= 0");
    auto renders = list_frames(renders_dir);
    auto truth = list_frames(gt_dir);
    if (holdout_every > 0)
        std::erase_if(truth, [&](const fs::path& p) { return frame_index(p) % static_cast<std::size_t>(holdout_every) != 0; });
    if (renders.size() != truth.size())
        throw UsageError("view count mismatch: " + std::to_string(renders.size()) + " renders vs " +
                         std::to_string(truth.size()) + " ground-truth frames");
    if (renders.empty()) throw UsageError("no frame_NNNNNN.png files to evaluate");
    std::vector<Image> r, t;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < renders.size(); ++i) {
        if (renders[i].filename() != truth[i].filename())
            throw UsageError("render " + renders[i].filename().string() + " has no ground-truth counterpart");
        r.push_back(read_png(renders[i].string()));
        t.push_back(read_png(truth[i].string()));
        names.push_back(renders[i].stem().string());
    }
    const EvalReport rep = evaluate(r, t, names);
    write_eval_table(std::cout, rep);
    if (!c.out.empty()) {
        fs::create_directories(c.out);
        std::ofstream csv(fs::path(c.out) / "eval.csv", std::ios::trunc);
        write_eval_csv(csv, rep);
        std::ofstream tab(fs::path(c.out) / "eval.txt", std::ios::trunc);
        write_eval_table(tab, rep);
        if (!csv || !tab) throw IoError("cannot write eval report under " + c.out);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Event-supervised 3D Gaussian splatting"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub, bool out_required) {
        sub->add_option("--config", common.config, "JSON run config");
        sub->add_option_function<std::uint64_t>(
            "--seed",
            [&](const std::uint64_t& s) {
                common.seed = s;
                common.seed_set = true;
            },
            "RNG seed");
        auto* o = sub->add_option("--out", common.out, "output directory");
        if (out_required) o->required();
    };

    auto* sim = app.add_subcommand("simulate", "render ground truth along a trajectory and simulate events");
    add_common(sim, true);
    std::string sim_traj, sim_frames;
    sim->add_option("--trajectory", sim_traj, "trajectory file (default: orbit from config)");
    sim->add_option("--frames", sim_frames, "directory of frame_NNNNNN.png to use instead of the analytic scene");
    sim->add_option("--resolution", common.resolution, "WIDTHxHEIGHT");
    sim->add_option("--threshold-A", common.threshold, "event contrast threshold");

    auto* tr = app.add_subcommand("train", "fit a Gaussian cloud to an event dataset");
    add_common(tr, true);
    std::string data_dir, resume;
    tr->add_option("--data", data_dir, "dataset directory")->required();
    tr->add_option("--iterations", common.iterations, "override trainer.iterations");
    tr->add_option("--resume", resume, "checkpoint to resume from");
    tr->add_option("--resolution", common.resolution, "WIDTHxHEIGHT (must match the dataset)");
    tr->add_option("--threshold-A", common.threshold, "override the event file's contrast threshold");

    auto* rd = app.add_subcommand("render", "render a checkpoint at every trajectory pose");
    add_common(rd, true);
    std::string ckpt, rd_traj, format = "png";
    int every = 1;
    rd->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    rd->add_option("--trajectory", rd_traj, "trajectory file")->required();
    rd->add_option("--format", format, "png, pfm or f64");
    rd->add_option("--every", every, "render every k-th pose only");

    auto* ev = app.add_subcommand("eval", "PSNR/SSIM of renders against ground truth");
    add_common(ev, false);
    std::string renders_dir, gt_dir;
    int holdout_every = 0;
    ev->add_option("--renders", renders_dir, "directory of rendered frames")->required();
    ev->add_option("--gt", gt_dir, "directory of ground-truth frames")->required();
    ev->add_option("--holdout-every", holdout_every, "keep only ground-truth frames with index % k == 0");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*sim) return cmd_simulate(common, sim_traj, sim_frames);
        if (*tr) return cmd_train(common, data_dir, resume);
        if (*rd) return cmd_render(common, ckpt, rd_traj, format, every);
        if (*ev) return cmd_eval(common, renders_dir, gt_dir, holdout_every);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const InvalidParameter& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
