#pragma once

// Run configuration as a JSON document. Every section is optional; missing
// keys keep their defaults and unknown keys are rejected.

#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"

#include "evgs/camera.hpp"
#include "evgs/loss.hpp"
#include "evgs/rasterizer.hpp"
#include "evgs/scene.hpp"
#include "evgs/trainer.hpp"

namespace evgs {

struct SceneInitConfig {
    std::size_t n_gaussians = 1000000;
    Box3 bounds;
    InitConfig init;
};

struct CameraConfig {
    int width = 64;
    int height = 64;
    double hfov_deg = 40.0;
    double orbit_radius = 4.0;
    double elevation_deg = 20.0;
    std::size_t n_poses = 1000;
    std::int64_t duration_us = 1000000;
    Vec3 target = Vec3::Zero();

    Intrinsics intrinsics() const { return Intrinsics::from_fov(width, height, hfov_deg * std::numbers::pi / 180.0); }
    Trajectory trajectory() const {
        return orbit_trajectory(orbit_radius, elevation_deg * std::numbers::pi / 180.0, n_poses, duration_us, target);
    }
};

struct RunConfig {
    std::uint64_t seed = 0;
    SceneInitConfig scene;
    CameraConfig camera;
    double threshold = 0.25;  ///< event contrast threshold A
    std::uint64_t gt_seed = 11;
    AnalyticSceneConfig gt_scene;
    LossConfig loss;
    TrainConfig trainer;
    RasterConfig raster;

    void validate() const;
};

class ConfigError : public InvalidParameter {
public:
    using InvalidParameter::InvalidParameter;
};

namespace detail {

using nlohmann::json;

class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config: " + where() + " must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config: bad value for " + path_ + key);
        }
    }

    void get_vec3(const char* key, Vec3& out) {
        std::array<double, 3> a{out.x(), out.y(), out.z()};
        get(key, a);
        out = Vec3(a[0], a[1], a[2]);
    }

    Reader section(const char* key) {
        seen_.insert(key);
        static const json empty = json::object();
        return Reader(j_.contains(key) ? j_.at(key) : empty, path_ + key + ".");
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("config: unknown key " + path_ + it.key());
    }

private:
    std::string where() const { return path_.empty() ? "document" : path_.substr(0, path_.size() - 1); }
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline std::string unit_name(UnitMode m) { return m == UnitMode::threshold ? "threshold" : "standardize"; }

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    auto v3 = [](const Vec3& v) { return std::array<double, 3>{v.x(), v.y(), v.z()}; };
    j["scene"] = {{"n_gaussians", c.scene.n_gaussians},
                  {"bounds_lo", v3(c.scene.bounds.lo)},
                  {"bounds_hi", v3(c.scene.bounds.hi)},
                  {"scale_fraction", c.scene.init.scale_fraction},
                  {"opacity", c.scene.init.opacity},
                  {"intensity", c.scene.init.intensity},
                  {"nn_sample", c.scene.init.nn_sample}};
    j["camera"] = {{"width", c.camera.width},           {"height", c.camera.height},
                   {"hfov_deg", c.camera.hfov_deg},     {"orbit_radius", c.camera.orbit_radius},
                   {"elevation_deg", c.camera.elevation_deg}, {"n_poses", c.camera.n_poses},
                   {"duration_us", c.camera.duration_us}, {"target", v3(c.camera.target)}};
    j["events"] = {{"threshold", c.threshold}};
    j["gt_scene"] = {{"seed", c.gt_seed},
                     {"n", c.gt_scene.n},
                     {"radius", c.gt_scene.radius},
                     {"scale_min", c.gt_scene.scale_min},
                     {"scale_max", c.gt_scene.scale_max},
                     {"opacity_min", c.gt_scene.opacity_min},
                     {"opacity_max", c.gt_scene.opacity_max},
                     {"intensity_min", c.gt_scene.intensity_min},
                     {"intensity_max", c.gt_scene.intensity_max}};
    j["loss"] = {{"gamma", c.loss.gamma},
                 {"eps", c.loss.eps},
                 {"linlog_b", c.loss.linlog_b},
                 {"lambda", c.loss.lambda},
                 {"units", detail::unit_name(c.loss.units)},
                 {"ssim_window", c.loss.ssim.window},
                 {"ssim_sigma", c.loss.ssim.sigma},
                 {"ssim_k1", c.loss.ssim.k1},
                 {"ssim_k2", c.loss.ssim.k2}};
    const TrainConfig& t = c.trainer;
    j["trainer"] = {{"iterations", t.iterations},
                    {"lr_position_init", t.lr_position_init},
                    {"lr_position_final", t.lr_position_final},
                    {"position_lr_scale", t.position_lr_scale},
                    {"lr_intensity", t.lr_intensity},
                    {"lr_opacity", t.lr_opacity},
                    {"lr_scale", t.lr_scale},
                    {"lr_rotation", t.lr_rotation},
                    {"beta1", t.beta1},
                    {"beta2", t.beta2},
                    {"adam_eps", t.adam_eps},
                    {"max_window", t.max_window},
                    {"windows_per_step", t.windows_per_step},
                    {"checkpoint_every", t.checkpoint_every},
                    {"prune", t.prune},
                    {"prune_every", t.prune_every},
                    {"prune_opacity", t.prune_opacity}};
    j["raster"] = {{"blur_floor", c.raster.projection.blur_floor},
                   {"near_plane", c.raster.projection.near_plane},
                   {"extent_sigma", c.raster.projection.extent_sigma},
                   {"alpha_clamp", c.raster.alpha_clamp},
                   {"min_alpha", c.raster.min_alpha},
                   {"transmittance_eps", c.raster.transmittance_eps},
                   {"max_condition", c.raster.max_condition},
                   {"tile_size", c.raster.tile_size}};
    j["eval"] = {{"holdout_every", t.holdout_every}};
    return j;
}

inline RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::Reader root(j, "");
    root.get("seed", c.seed);
    {
        auto s = root.section("scene");
        s.get("n_gaussians", c.scene.n_gaussians);
        s.get_vec3("bounds_lo", c.scene.bounds.lo);
        s.get_vec3("bounds_hi", c.scene.bounds.hi);
        s.get("scale_fraction", c.scene.init.scale_fraction);
        s.get("opacity", c.scene.init.opacity);
        s.get("intensity", c.scene.init.intensity);
        s.get("nn_sample", c.scene.init.nn_sample);
        s.finish();
    }
    {
        auto s = root.section("camera");
        s.get("width", c.camera.width);
        s.get("height", c.camera.height);
        s.get("hfov_deg", c.camera.hfov_deg);
        s.get("orbit_radius", c.camera.orbit_radius);
        s.get("elevation_deg", c.camera.elevation_deg);
        s.get("n_poses", c.camera.n_poses);
        s.get("duration_us", c.camera.duration_us);
        s.get_vec3("target", c.camera.target);
        s.finish();
    }
    {
        auto s = root.section("events");
        s.get("threshold", c.threshold);
        s.finish();
    }
    {
        auto s = root.section("gt_scene");
        s.get("seed", c.gt_seed);
        s.get("n", c.gt_scene.n);
        s.get("radius", c.gt_scene.radius);
        s.get("scale_min", c.gt_scene.scale_min);
        s.get("scale_max", c.gt_scene.scale_max);
        s.get("opacity_min", c.gt_scene.opacity_min);
        s.get("opacity_max", c.gt_scene.opacity_max);
        s.get("intensity_min", c.gt_scene.intensity_min);
        s.get("intensity_max", c.gt_scene.intensity_max);
        s.finish();
    }
    {
        auto s = root.section("loss");
        s.get("gamma", c.loss.gamma);
        s.get("eps", c.loss.eps);
        s.get("linlog_b", c.loss.linlog_b);
        s.get("lambda", c.loss.lambda);
        std::string units = detail::unit_name(c.loss.units);
        s.get("units", units);
        if (units == "threshold") c.loss.units = UnitMode::threshold;
        else if (units == "standardize") c.loss.units = UnitMode::standardize;
        else throw ConfigError("config: loss.units must be \"threshold\" or \"standardize\"");
        s.get("ssim_window", c.loss.ssim.window);
        s.get("ssim_sigma", c.loss.ssim.sigma);
        s.get("ssim_k1", c.loss.ssim.k1);
        s.get("ssim_k2", c.loss.ssim.k2);
        s.finish();
    }
    {
        auto s = root.section("trainer");
        TrainConfig& t = c.trainer;
        s.get("iterations", t.iterations);
        s.get("lr_position_init", t.lr_position_init);
        s.get("lr_position_final", t.lr_position_final);
        s.get("position_lr_scale", t.position_lr_scale);
        s.get("lr_intensity", t.lr_intensity);
        s.get("lr_opacity", t.lr_opacity);
        s.get("lr_scale", t.lr_scale);
        s.get("lr_rotation", t.lr_rotation);
        s.get("beta1", t.beta1);
        s.get("beta2", t.beta2);
        s.get("adam_eps", t.adam_eps);
        s.get("max_window", t.max_window);
        s.get("windows_per_step", t.windows_per_step);
        s.get("checkpoint_every", t.checkpoint_every);
        s.get("prune", t.prune);
        s.get("prune_every", t.prune_every);
        s.get("prune_opacity", t.prune_opacity);
        s.finish();
    }
    {
        auto s = root.section("raster");
        RasterConfig& r = c.raster;
        s.get("blur_floor", r.projection.blur_floor);
        s.get("near_plane", r.projection.near_plane);
        s.get("extent_sigma", r.projection.extent_sigma);
        s.get("alpha_clamp", r.alpha_clamp);
        s.get("min_alpha", r.min_alpha);
        s.get("transmittance_eps", r.transmittance_eps);
        s.get("max_condition", r.max_condition);
        s.get("tile_size", r.tile_size);
        s.finish();
    }
    {
        auto s = root.section("eval");
        s.get("holdout_every", c.trainer.holdout_every);
        s.finish();
    }
    root.finish();
    c.trainer.seed = c.seed;
    c.validate();
    return c;
}

inline void RunConfig::validate() const {
    try {
        if (scene.n_gaussians == 0) throw InvalidParameter("scene.n_gaussians must be >= 1");
        if (((scene.bounds.hi - scene.bounds.lo).array() <= 0).any()) throw InvalidParameter("scene bounds must have positive volume");
        if (!(scene.init.opacity > 0 && scene.init.opacity < 1)) throw InvalidParameter("scene.opacity must lie in (0,1)");
        if (!(scene.init.scale_fraction > 0)) throw InvalidParameter("scene.scale_fraction must be positive");
        if (scene.init.nn_sample == 0) throw InvalidParameter("scene.nn_sample must be >= 1");
        if (camera.width <= 0 || camera.height <= 0 || camera.width > 65535 || camera.height > 65535)
            throw InvalidParameter("camera resolution out of range");
        if (!(camera.hfov_deg > 0 && camera.hfov_deg < 180)) throw InvalidParameter("camera.hfov_deg must be in (0,180)");
        if (!(camera.orbit_radius > 0)) throw InvalidParameter("camera.orbit_radius must be positive");
        if (!(std::abs(camera.elevation_deg) < 90)) throw InvalidParameter("camera.elevation_deg must be in (-90,90)");
        if (camera.n_poses < 2) throw InvalidParameter("camera.n_poses must be >= 2");
        if (camera.duration_us < static_cast<std::int64_t>(camera.n_poses))
            throw InvalidParameter("camera.duration_us must be >= n_poses");
        if (!(threshold > 0) || !std::isfinite(threshold)) throw InvalidParameter("events.threshold must be positive");
        if (gt_scene.n == 0) throw InvalidParameter("gt_scene.n must be >= 1");
        if (!(gt_scene.scale_min > 0 && gt_scene.scale_min <= gt_scene.scale_max))
            throw InvalidParameter("gt_scene scale range invalid");
        if (!(gt_scene.opacity_min > 0 && gt_scene.opacity_min <= gt_scene.opacity_max && gt_scene.opacity_max < 1))
            throw InvalidParameter("gt_scene opacity range invalid");
        if (raster.tile_size < 1) throw InvalidParameter("raster.tile_size must be >= 1");
        if (!(raster.alpha_clamp > 0 && raster.alpha_clamp <= 1)) throw InvalidParameter("raster.alpha_clamp must be in (0,1]");
        if (!(raster.projection.near_plane > 0)) throw InvalidParameter("raster.near_plane must be positive");
        loss.validate();
        trainer.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const InvalidParameter& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline RunConfig parse_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config: malformed JSON: ") + e.what());
    }
    return from_json(j);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

inline std::string dump_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

/// Hash of the canonical dump; recorded in checkpoints.
inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a64(to_json(c).dump()); }

}  // namespace evgs
