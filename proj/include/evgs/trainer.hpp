#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "evgs/camera.hpp"
#include "evgs/events.hpp"
#include "evgs/loss.hpp"
#include "evgs/rasterizer.hpp"
#include "evgs/scene.hpp"

namespace evgs {

struct TrainConfig {
    std::uint64_t iterations = 50000;
    double lr_position_init = 1.6e-4;
    double lr_position_final = 1.6e-6;
    double position_lr_scale = 1.0;  ///< multiplies the position schedule (scene extent)
    double lr_intensity = 2.5e-3;    ///< "feature" rate
    double lr_opacity = 5e-2;
    double lr_scale = 5e-3;
    double lr_rotation = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-15;
    int max_window = 50;
    std::uint64_t seed = 0;
    std::uint64_t checkpoint_every = 0;  ///< 0: final checkpoint only
    bool prune = false;
    std::uint64_t prune_every = 1000;
    double prune_opacity = 0.005;
    int windows_per_step = 1;
    int holdout_every = 10;  ///< every k-th pose is reserved for evaluation; 0 disables

    void validate() const {
        for (double r : {lr_position_init, lr_position_final, position_lr_scale, lr_intensity, lr_opacity, lr_scale,
                         lr_rotation})
            if (!(r > 0) || !std::isfinite(r)) throw InvalidParameter("train: learning rates must be positive");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw InvalidParameter("train: Adam betas must be in [0,1)");
        if (!(adam_eps > 0)) throw InvalidParameter("train: Adam eps must be positive");
        if (max_window < 1) throw InvalidParameter("train: max window must be >= 1");
        if (windows_per_step < 1) throw InvalidParameter("train: windows_per_step must be >= 1");
        if (holdout_every < 0 || holdout_every == 1) throw InvalidParameter("train: holdout_every must be 0 or >= 2");
        if (prune && (prune_every == 0 || !(prune_opacity > 0 && prune_opacity < 1)))
            throw InvalidParameter("train: bad pruning settings");
    }
};

/// Exponential (log-linear) decay from the initial to the final position rate.
inline double position_lr(std::uint64_t iter, const TrainConfig& cfg) {
    if (iter > cfg.iterations) throw InvalidParameter("position_lr: iteration past the end of the run");
    if (iter == 0 || cfg.iterations == 0) return cfg.lr_position_init;
    if (iter == cfg.iterations) return cfg.lr_position_final;
    const double r = static_cast<double>(iter) / static_cast<double>(cfg.iterations);
    return std::exp((1.0 - r) * std::log(cfg.lr_position_init) + r * std::log(cfg.lr_position_final));
}

using GroupRates = std::array<double, 5>;  // indexed by ParamGroup

inline GroupRates group_rates(std::uint64_t iter, const TrainConfig& cfg) {
    return {position_lr(iter, cfg) * cfg.position_lr_scale, cfg.lr_rotation, cfg.lr_scale, cfg.lr_opacity, cfg.lr_intensity};
}

class NonFiniteGradient : public std::runtime_error {
public:
    explicit NonFiniteGradient(ParamGroup g)
        : std::runtime_error(std::string("non-finite gradient in parameter group ") + group_name(g)), group_(g) {}
    ParamGroup group() const { return group_; }

private:
    ParamGroup group_;
};

class Divergence : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam over the five parameter groups.
class Adam {
public:
    Adam() = default;
    Adam(std::size_t n, double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {
        state_.m1.resize(n);
        state_.m2.resize(n);
    }

    const OptimizerMoments& state() const { return state_; }
    void set_state(OptimizerMoments s) { state_ = std::move(s); }

    /// One update. Quaternions touched by the step are renormalised.
    void step(GaussianCloud& cloud, const CloudGradients& grads, const GroupRates& rates) {
        if (!grads.shape_matches(cloud) || !state_.m1.shape_matches(cloud) || !state_.m2.shape_matches(cloud))
            throw InvalidParameter("adam: shape mismatch between cloud, gradients and moments");
        for (ParamGroup g : kParamGroups)
            if (!all_finite(grads.group(g))) throw NonFiniteGradient(g);

        ++state_.step;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
        for (ParamGroup g : kParamGroups) {
            auto p = cloud.group(g);
            auto gr = grads.group(g);
            auto m = state_.m1.group(g);
            auto v = state_.m2.group(g);
            const double lr = rates[static_cast<int>(g)];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * gr[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * gr[i] * gr[i];
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                p[i] -= lr * mh / (std::sqrt(vh) + eps_);
            }
        }
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            const auto mi = Eigen::Map<const Vec4>(state_.m1.rotations.data() + 4 * i);
            if (mi.isZero(0.0)) continue;
            auto q = cloud.rotation(i);
            q /= q.norm();
        }
    }

    void compact(const std::vector<bool>& keep) {
        GaussianCloud a, b;
        static_cast<ParameterArrays&>(a) = state_.m1;
        static_cast<ParameterArrays&>(b) = state_.m2;
        a.compact(keep);
        b.compact(keep);
        state_.m1 = a;
        state_.m2 = b;
    }

private:
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-15;
    OptimizerMoments state_;
};

/// Everything the loop reads from disk.
struct Dataset {
    EventStream events;
    Trajectory trajectory;
    Intrinsics intrinsics;

    void validate() const {
        intrinsics.validate();
        trajectory.validate();
        if (events.width != intrinsics.width || events.height != intrinsics.height)
            throw InvalidParameter("dataset: event sensor size does not match the camera resolution");
        if (!(events.threshold > 0)) throw InvalidParameter("dataset: event stream lacks a contrast threshold");
    }
};

/// A supervised window: render at frames (from, to], compare with events in between.
struct Window {
    std::size_t from = 0;
    std::size_t to = 0;
    bool operator==(const Window&) const = default;
};

struct LogRow {
    std::uint64_t iter = 0;
    double total = 0, event = 0, dssim = 0, lr_pos = 0;
    std::size_t n_gaussians = 0;
};

inline void write_log_header(std::ostream& os) { os << "iter,total,L_e,dssim,lr_pos,n_gaussians\n"; }

inline void write_log_row(std::ostream& os, const LogRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%zu\n", static_cast<unsigned long long>(r.iter), r.total,
                  r.event, r.dssim, r.lr_pos, r.n_gaussians);
    os << buf;
}

struct WindowLoss {
    LossReport loss;
    RenderedImage i_t, i_tw;
};

/// Forward-only evaluation of the objective on one window.
inline WindowLoss window_loss(const GaussianCloud& cloud, const Dataset& data, const Window& w, const LossConfig& lcfg,
                              const RasterConfig& rcfg) {
    const auto& poses = data.trajectory.poses;
    WindowLoss out;
    out.i_t = render(cloud, poses[w.to], data.intrinsics, rcfg);
    out.i_tw = render(cloud, poses[w.from], data.intrinsics, rcfg);
    const Image e_pred = predicted_diff(out.i_t.pixels, out.i_tw.pixels, lcfg.gamma, lcfg.eps);
    const EventFrame frame = accumulate(data.events, poses[w.from].timestamp_us, poses[w.to].timestamp_us,
                                        data.intrinsics.width, data.intrinsics.height);
    const Image e_gt = event_target(frame, data.events.threshold, lcfg.units);
    out.loss = total_loss(e_pred, e_gt, lcfg);
    return out;
}

/// Adds d(total loss)/d(params) for one window into `grads`, scaled by `weight`.
inline LossReport window_backward(const GaussianCloud& cloud, const Dataset& data, const Window& w, const LossConfig& lcfg,
                                  const RasterConfig& rcfg, CloudGradients& grads, double weight = 1.0) {
    WindowLoss wl = window_loss(cloud, data, w, lcfg, rcfg);
    const Image d_t = log_image_grad(wl.i_t.pixels, lcfg.gamma, lcfg.eps);
    const Image d_tw = log_image_grad(wl.i_tw.pixels, lcfg.gamma, lcfg.eps);
    Image up_t(d_t.width, d_t.height), up_tw(d_t.width, d_t.height);
    for (std::size_t i = 0; i < up_t.size(); ++i) {
        up_t.data[i] = weight * wl.loss.grad.data[i] * d_t.data[i];
        up_tw.data[i] = -weight * wl.loss.grad.data[i] * d_tw.data[i];
    }
    const auto& poses = data.trajectory.poses;
    render_backward(cloud, poses[w.to], data.intrinsics, up_t, grads, rcfg);
    render_backward(cloud, poses[w.from], data.intrinsics, up_tw, grads, rcfg);
    return std::move(wl.loss);
}

inline bool is_holdout(std::size_t index, int holdout_every) { return holdout_every > 0 && index % holdout_every == 0; }

/// Draws a training window: end frame uniform over non-held-out frames with
/// index >= 1, length from sample_window; both endpoints avoid held-out frames.
template <class Rng>
Window draw_window(std::size_t n_frames, const TrainConfig& cfg, Rng& rng) {
    std::vector<std::size_t> ends;
    for (std::size_t i = 1; i < n_frames; ++i)
        if (!is_holdout(i, cfg.holdout_every)) ends.push_back(i);
    if (ends.empty()) throw InvalidParameter("draw_window: no trainable frames");
    std::uniform_int_distribution<std::size_t> pick(0, ends.size() - 1);
    for (int attempt = 0; attempt < 1024; ++attempt) {
        const std::size_t to = ends[pick(rng)];
        for (int k = 0; k < 8; ++k) {
            const int w = sample_window(to, cfg.max_window, rng);
            const std::size_t from = to - static_cast<std::size_t>(w);
            if (!is_holdout(from, cfg.holdout_every)) return {from, to};
        }
    }
    throw InvalidParameter("draw_window: could not find a window avoiding held-out frames");
}

/// Event-supervised optimisation loop. Each iteration derives its RNG from
/// (seed, iteration), so a run resumed from a checkpoint at iteration k
/// continues exactly as the uninterrupted run would.
class Trainer {
public:
    Trainer(GaussianCloud init, Dataset data, TrainConfig cfg, LossConfig lcfg = {}, RasterConfig rcfg = {})
        : cloud_(std::move(init)), data_(std::move(data)), cfg_(cfg), lcfg_(lcfg), rcfg_(rcfg),
          adam_(cloud_.size(), cfg.beta1, cfg.beta2, cfg.adam_eps) {
        cfg_.validate();
        lcfg_.validate();
        data_.validate();
        cloud_.validate();
    }

    /// Restores cloud, optimiser moments and iteration counter.
    void restore(const Checkpoint& ck) {
        ck.cloud.validate();
        cloud_ = ck.cloud;
        adam_ = Adam(cloud_.size(), cfg_.beta1, cfg_.beta2, cfg_.adam_eps);
        if (ck.optimizer) adam_.set_state(*ck.optimizer);
        iteration_ = ck.iteration;
        if (iteration_ > cfg_.iterations) throw InvalidParameter("checkpoint iteration exceeds the configured run length");
    }

    Checkpoint checkpoint(std::uint64_t config_hash = 0) const {
        Checkpoint ck;
        ck.cloud = cloud_;
        ck.config_hash = config_hash;
        ck.width = static_cast<std::uint32_t>(data_.intrinsics.width);
        ck.height = static_cast<std::uint32_t>(data_.intrinsics.height);
        ck.iteration = iteration_;
        ck.optimizer = adam_.state();
        return ck;
    }

    std::uint64_t iteration() const { return iteration_; }
    bool done() const { return iteration_ >= cfg_.iterations; }
    const GaussianCloud& cloud() const { return cloud_; }
    const Dataset& data() const { return data_; }
    const TrainConfig& config() const { return cfg_; }
    const LossConfig& loss_config() const { return lcfg_; }
    const RasterConfig& raster_config() const { return rcfg_; }

    /// One optimisation step; returns the logged row.
    LogRow step() {
        if (done()) throw InvalidParameter("trainer: run already complete");
        const std::uint64_t it = iteration_;
        std::mt19937_64 rng(mix64(cfg_.seed ^ mix64(it + 1)));
        CloudGradients grads(cloud_.size());
        LogRow row;
        row.iter = it + 1;
        const double weight = 1.0 / cfg_.windows_per_step;
        for (int k = 0; k < cfg_.windows_per_step; ++k) {
            const Window w = draw_window(data_.trajectory.poses.size(), cfg_, rng);
            const LossReport rep = window_backward(cloud_, data_, w, lcfg_, rcfg_, grads, weight);
            row.total += weight * rep.total;
            row.event += weight * rep.event;
            row.dssim += weight * rep.dssim_term;
        }
        if (!std::isfinite(row.total))
            throw Divergence("non-finite loss at iteration " + std::to_string(row.iter));
        const GroupRates rates = group_rates(it, cfg_);
        adam_.step(cloud_, grads, rates);
        try {
            cloud_.validate();
        } catch (const InvalidParameter& e) {
            throw Divergence("cloud invalid after iteration " + std::to_string(row.iter) + ": " + e.what());
        }
        row.lr_pos = rates[0];
        ++iteration_;
        if (cfg_.prune && iteration_ % cfg_.prune_every == 0) prune();
        row.n_gaussians = cloud_.size();
        return row;
    }

private:
    void prune() {
        std::vector<bool> keep(cloud_.size());
        std::size_t kept = 0;
        for (std::size_t i = 0; i < cloud_.size(); ++i) {
            keep[i] = sigmoid(cloud_.opacity_logits[i]) >= cfg_.prune_opacity;
            kept += keep[i];
        }
        if (kept == 0 || kept == cloud_.size()) return;  // never empty the cloud
        cloud_.compact(keep);
        adam_.compact(keep);
    }

    GaussianCloud cloud_;
    Dataset data_;
    TrainConfig cfg_;
    LossConfig lcfg_;
    RasterConfig rcfg_;
    Adam adam_;
    std::uint64_t iteration_ = 0;
};

struct TrainOptions {
    std::filesystem::path out_dir;  ///< empty: nothing written
    std::uint64_t config_hash = 0;
    std::function<void(const LogRow&)> on_step;
};

/// Runs the trainer to completion, writing `train_log.csv`, periodic
/// `checkpoint.ckpt` and `final.ckpt` under out_dir. When the trainer was
/// restored mid-run the log is appended to.
inline Checkpoint train(Trainer& trainer, const TrainOptions& opts = {}) {
    std::ofstream log;
    const bool write = !opts.out_dir.empty();
    auto save_atomic = [&](const std::string& name) {
        const auto tmp = opts.out_dir / (name + ".tmp");
        save_checkpoint(tmp.string(), trainer.checkpoint(opts.config_hash));
        std::filesystem::rename(tmp, opts.out_dir / name);
    };
    if (write) {
        std::filesystem::create_directories(opts.out_dir);
        const auto log_path = opts.out_dir / "train_log.csv";
        if (trainer.iteration() == 0) {
            log.open(log_path, std::ios::trunc);
            write_log_header(log);
        } else {
            // drop rows written after the checkpoint we resumed from
            std::vector<std::string> kept;
            std::ifstream in(log_path);
            std::string line;
            while (std::getline(in, line)) {
                if (kept.empty() || std::strtoull(line.c_str(), nullptr, 10) <= trainer.iteration()) kept.push_back(line);
            }
            in.close();
            log.open(log_path, std::ios::trunc);
            if (kept.empty()) write_log_header(log);
            for (const auto& l : kept) log << l << '\n';
        }
        if (!log) throw IoError("cannot open training log " + log_path.string());
    }
    while (!trainer.done()) {
        LogRow row;
        try {
            row = trainer.step();
        } catch (const Divergence&) {
            if (write) save_checkpoint((opts.out_dir / "diverged.ckpt").string(), trainer.checkpoint(opts.config_hash));
            throw;
        } catch (const NonFiniteGradient&) {
            if (write) save_checkpoint((opts.out_dir / "diverged.ckpt").string(), trainer.checkpoint(opts.config_hash));
            throw;
        }
        if (write) write_log_row(log, row);
        if (opts.on_step) opts.on_step(row);
        const auto every = trainer.config().checkpoint_every;
        if (write && every > 0 && trainer.iteration() % every == 0) {
            log.flush();
            save_atomic("checkpoint.ckpt");
        }
    }
    if (write) {
        log.flush();
        save_atomic("final.ckpt");
    }
    return trainer.checkpoint(opts.config_hash);
}

}  // namespace evgs
