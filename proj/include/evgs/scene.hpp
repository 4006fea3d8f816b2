#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "evgs/binary_io.hpp"
#include "evgs/common.hpp"

namespace evgs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

/// Learnable parameter groups, in storage order. The optimiser assigns one
/// learning rate per group.
enum class ParamGroup : int { position = 0, rotation, scale, opacity, intensity };

inline constexpr std::array<ParamGroup, 5> kParamGroups = {
    ParamGroup::position, ParamGroup::rotation, ParamGroup::scale, ParamGroup::opacity, ParamGroup::intensity};

constexpr int group_width(ParamGroup g) {
    switch (g) {
        case ParamGroup::position: return 3;
        case ParamGroup::rotation: return 4;
        case ParamGroup::scale: return 3;
        default: return 1;
    }
}

constexpr const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::position: return "position";
        case ParamGroup::rotation: return "rotation";
        case ParamGroup::scale: return "scale";
        case ParamGroup::opacity: return "opacity";
        case ParamGroup::intensity: return "intensity";
    }
    return "?";
}

/// Five flat per-Gaussian arrays. Shared layout for the cloud itself, its
/// gradients and optimiser moments.
///   positions      [N*3]  world units
///   rotations      [N*4]  quaternion (w, x, y, z), not necessarily unit
///   log_scales     [N*3]  log of per-axis standard deviation
///   opacity_logits [N]    pre-sigmoid opacity
///   intensity      [N]    grayscale coefficient, clamped to [0,1] when rendered
struct ParameterArrays {
    std::vector<double> positions;
    std::vector<double> rotations;
    std::vector<double> log_scales;
    std::vector<double> opacity_logits;
    std::vector<double> intensity;

    std::size_t size() const { return opacity_logits.size(); }

    void resize(std::size_t n) {
        positions.assign(3 * n, 0.0);
        rotations.assign(4 * n, 0.0);
        log_scales.assign(3 * n, 0.0);
        opacity_logits.assign(n, 0.0);
        intensity.assign(n, 0.0);
    }

    void set_zero() {
        for (ParamGroup g : kParamGroups) {
            auto s = group(g);
            std::fill(s.begin(), s.end(), 0.0);
        }
    }

    std::span<double> group(ParamGroup g) {
        switch (g) {
            case ParamGroup::position: return positions;
            case ParamGroup::rotation: return rotations;
            case ParamGroup::scale: return log_scales;
            case ParamGroup::opacity: return opacity_logits;
            case ParamGroup::intensity: return intensity;
        }
        return {};
    }
    std::span<const double> group(ParamGroup g) const { return const_cast<ParameterArrays*>(this)->group(g); }

    bool shape_matches(const ParameterArrays& o) const {
        return positions.size() == o.positions.size() && rotations.size() == o.rotations.size() &&
               log_scales.size() == o.log_scales.size() && opacity_logits.size() == o.opacity_logits.size() &&
               intensity.size() == o.intensity.size();
    }

    bool operator==(const ParameterArrays&) const = default;
};

struct GaussianCloud : ParameterArrays {
    Eigen::Map<Vec3> position(std::size_t i) { return Eigen::Map<Vec3>(positions.data() + 3 * i); }
    Eigen::Map<const Vec3> position(std::size_t i) const { return Eigen::Map<const Vec3>(positions.data() + 3 * i); }
    Eigen::Map<Vec4> rotation(std::size_t i) { return Eigen::Map<Vec4>(rotations.data() + 4 * i); }
    Eigen::Map<const Vec4> rotation(std::size_t i) const { return Eigen::Map<const Vec4>(rotations.data() + 4 * i); }
    Eigen::Map<Vec3> log_scale(std::size_t i) { return Eigen::Map<Vec3>(log_scales.data() + 3 * i); }
    Eigen::Map<const Vec3> log_scale(std::size_t i) const { return Eigen::Map<const Vec3>(log_scales.data() + 3 * i); }

    /// Throws InvalidParameter when any cloud invariant is broken.
    void validate() const;

    /// Keeps Gaussians whose `keep[i]` is true, preserving order.
    void compact(const std::vector<bool>& keep);
    bool operator==(const GaussianCloud&) const = default;
};

/// d(loss)/d(stored parameter), shape-matched to a cloud.
struct CloudGradients : ParameterArrays {
    CloudGradients() = default;
    explicit CloudGradients(std::size_t n) { resize(n); }
    bool all_finite() const {
        for (ParamGroup g : kParamGroups)
            for (double v : group(g))
                if (!std::isfinite(v)) return false;
        return true;
    }
};

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline void GaussianCloud::validate() const {
    const std::size_t n = size();
    if (n == 0) throw InvalidParameter("cloud must hold at least one Gaussian");
    if (positions.size() != 3 * n || rotations.size() != 4 * n || log_scales.size() != 3 * n || intensity.size() != n)
        throw InvalidParameter("cloud parameter arrays disagree in length");
    for (ParamGroup g : kParamGroups)
        if (!all_finite(group(g))) throw InvalidParameter(std::string("non-finite ") + group_name(g) + " parameter");
    for (std::size_t i = 0; i < n; ++i) {
        if (rotation(i).norm() == 0.0) throw InvalidParameter("zero quaternion at Gaussian " + std::to_string(i));
        if (!log_scale(i).array().exp().isFinite().all())
            throw InvalidParameter("scale overflows at Gaussian " + std::to_string(i));
    }
}

inline void GaussianCloud::compact(const std::vector<bool>& keep) {
    if (keep.size() != size()) throw InvalidParameter("compact: mask length mismatch");
    std::size_t out = 0;
    for (std::size_t i = 0; i < size(); ++i) {
        if (!keep[i]) continue;
        for (int k = 0; k < 3; ++k) positions[3 * out + k] = positions[3 * i + k];
        for (int k = 0; k < 4; ++k) rotations[4 * out + k] = rotations[4 * i + k];
        for (int k = 0; k < 3; ++k) log_scales[3 * out + k] = log_scales[3 * i + k];
        opacity_logits[out] = opacity_logits[i];
        intensity[out] = intensity[i];
        ++out;
    }
    positions.resize(3 * out);
    rotations.resize(4 * out);
    log_scales.resize(3 * out);
    opacity_logits.resize(out);
    intensity.resize(out);
}

// ---------------------------------------------------------------------------
// Activations

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Rotation matrix of a unit quaternion (w, x, y, z).
inline Mat3 quat_to_matrix(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

struct ActivatedGaussian {
    Vec3 position;
    Vec4 rotation;  ///< unit
    Vec3 scale;     ///< > 0
    double opacity; ///< in (0, 1)
    double intensity;  ///< clamped to [0, 1]
};

inline ActivatedGaussian activate(const GaussianCloud& cloud, std::size_t i) {
    ActivatedGaussian a;
    a.position = cloud.position(i);
    a.rotation = cloud.rotation(i) / cloud.rotation(i).norm();
    a.scale = cloud.log_scale(i).array().exp();
    a.opacity = sigmoid(cloud.opacity_logits[i]);
    a.intensity = std::clamp(cloud.intensity[i], 0.0, 1.0);
    return a;
}

inline std::vector<ActivatedGaussian> activate(const GaussianCloud& cloud) {
    std::vector<ActivatedGaussian> out(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) out[i] = activate(cloud, i);
    return out;
}

struct Covariance3 {
    Mat3 m = Mat3::Zero();
};

/// Sigma = R S S^T R^T for quaternion q (normalised here) and per-axis scale s.
inline Covariance3 build_covariance(const Vec4& q, const Vec3& s) {
    if (!q.allFinite() || !s.allFinite()) throw InvalidParameter("build_covariance: non-finite input");
    const double n = q.norm();
    if (n == 0.0) throw InvalidParameter("build_covariance: zero quaternion");
    if ((s.array() <= 0.0).any()) throw InvalidParameter("build_covariance: scale must be positive");
    const Mat3 m = quat_to_matrix(q / n) * s.asDiagonal();
    Covariance3 c;
    c.m = m * m.transpose();
    // exact symmetry
    c.m(1, 0) = c.m(0, 1);
    c.m(2, 0) = c.m(0, 2);
    c.m(2, 1) = c.m(1, 2);
    return c;
}

// ---------------------------------------------------------------------------
// Initialisation

struct Box3 {
    Vec3 lo = Vec3::Constant(-1.0);
    Vec3 hi = Vec3::Constant(1.0);
    double volume() const { return (hi - lo).prod(); }
};

struct InitConfig {
    double scale_fraction = 0.5;  ///< initial extent as a fraction of mean NN spacing
    double opacity = 0.1;
    double intensity = 0.5;
    std::size_t nn_sample = 1000;
};

namespace detail {

// Mean nearest-neighbour distance of a random subsample against the full set.
inline double mean_nn_distance(const std::vector<double>& pos, std::size_t n, std::size_t sample, std::mt19937_64& rng) {
    if (n < 2) return 0.0;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const std::size_t m = std::min(sample, n);
    for (std::size_t i = 0; i < m; ++i) {  // partial Fisher-Yates
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    std::vector<double> nn(m);
    parallel_for(m, [&](std::size_t k) {
        const std::size_t a = idx[k];
        const double ax = pos[3 * a], ay = pos[3 * a + 1], az = pos[3 * a + 2];
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t b = 0; b < n; ++b) {
            if (b == a) continue;
            const double dx = pos[3 * b] - ax, dy = pos[3 * b + 1] - ay, dz = pos[3 * b + 2] - az;
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        nn[k] = std::sqrt(best);
    });
    double sum = 0.0;
    for (double d : nn) sum += d;
    return sum / static_cast<double>(m);
}

}  // namespace detail

/// n Gaussians uniform in `bounds`, identity rotations, isotropic scale set
/// from the nearest-neighbour spacing. Deterministic for a fixed seed.
inline GaussianCloud init_random_cloud(std::size_t n, const Box3& bounds, std::uint64_t seed, const InitConfig& cfg = {}) {
    if (n == 0) throw InvalidParameter("init_random_cloud: n must be >= 1");
    const Vec3 extent = bounds.hi - bounds.lo;
    if (!extent.allFinite() || (extent.array() <= 0.0).any())
        throw InvalidParameter("init_random_cloud: bounds must have positive volume");
    if (!(cfg.opacity > 0.0 && cfg.opacity < 1.0)) throw InvalidParameter("init opacity must lie in (0,1)");
    if (!(cfg.scale_fraction > 0.0)) throw InvalidParameter("init scale fraction must be positive");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    GaussianCloud cloud;
    cloud.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) cloud.positions[3 * i + k] = bounds.lo[k] + unit(rng) * extent[k];

    double spacing = detail::mean_nn_distance(cloud.positions, n, cfg.nn_sample, rng);
    if (!(spacing > 0.0)) spacing = std::cbrt(bounds.volume());  // single point
    const double log_s = std::log(cfg.scale_fraction * spacing);
    const double opacity_logit = logit(cfg.opacity);
    for (std::size_t i = 0; i < n; ++i) {
        cloud.rotations[4 * i] = 1.0;
        for (int k = 0; k < 3; ++k) cloud.log_scales[3 * i + k] = log_s;
        cloud.opacity_logits[i] = opacity_logit;
        cloud.intensity[i] = cfg.intensity;
    }
    return cloud;
}

/// Ground-truth scene for synthetic datasets: n opaque-ish Gaussians with
/// random orientation inside a ball of the given radius.
struct AnalyticSceneConfig {
    std::size_t n = 20;
    double radius = 0.8;
    double scale_min = 0.08, scale_max = 0.25;
    double opacity_min = 0.7, opacity_max = 0.95;
    double intensity_min = 0.4, intensity_max = 1.0;
};

inline GaussianCloud make_analytic_scene(std::uint64_t seed, const AnalyticSceneConfig& cfg = {}) {
    if (cfg.n == 0) throw InvalidParameter("analytic scene needs at least one Gaussian");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    GaussianCloud c;
    c.resize(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        Vec3 p;
        do {
            p = Vec3(between(-1, 1), between(-1, 1), between(-1, 1));
        } while (p.squaredNorm() > 1.0);
        c.position(i) = cfg.radius * p;
        Vec4 q(normal(rng), normal(rng), normal(rng), normal(rng));
        c.rotation(i) = q.normalized();
        for (int k = 0; k < 3; ++k)
            c.log_scales[3 * i + k] = between(std::log(cfg.scale_min), std::log(cfg.scale_max));
        c.opacity_logits[i] = logit(between(cfg.opacity_min, cfg.opacity_max));
        c.intensity[i] = between(cfg.intensity_min, cfg.intensity_max);
    }
    return c;
}

// ---------------------------------------------------------------------------
// Checkpoint (binary, little-endian)
//
//   "EVGSCKPT" | u32 version | u64 N | u64 config_hash | u32 width | u32 height
//   | u64 iteration | f64 arrays: positions, rotations, log_scales,
//   opacity_logits, intensity | u8 has_optimizer
//   [ | u64 adam_step | moment1 arrays | moment2 arrays ]
//
// width/height record the resolution the cloud was trained at (0 = unknown).

struct OptimizerMoments {
    std::uint64_t step = 0;
    ParameterArrays m1;
    ParameterArrays m2;
    bool operator==(const OptimizerMoments&) const = default;
};

struct Checkpoint {
    GaussianCloud cloud;
    std::uint64_t config_hash = 0;
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint64_t iteration = 0;
    std::optional<OptimizerMoments> optimizer;
    bool operator==(const Checkpoint&) const = default;
};

inline constexpr char kCheckpointMagic[9] = "EVGSCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_arrays(std::ostream& os, const ParameterArrays& p) {
    for (ParamGroup g : kParamGroups)
        for (double v : p.group(g)) bin::put(os, v);
}
inline void get_arrays(std::istream& is, ParameterArrays& p, std::size_t n) {
    p.resize(n);
    for (ParamGroup g : kParamGroups)
        for (double& v : p.group(g)) v = bin::get<double>(is, group_name(g));
}
}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    bin::put_magic(os, kCheckpointMagic);
    bin::put<std::uint32_t>(os, kCheckpointVersion);
    bin::put<std::uint64_t>(os, ck.cloud.size());
    bin::put<std::uint64_t>(os, ck.config_hash);
    bin::put<std::uint32_t>(os, ck.width);
    bin::put<std::uint32_t>(os, ck.height);
    bin::put<std::uint64_t>(os, ck.iteration);
    detail::put_arrays(os, ck.cloud);
    bin::put<std::uint8_t>(os, ck.optimizer ? 1 : 0);
    if (ck.optimizer) {
        if (!ck.optimizer->m1.shape_matches(ck.cloud) || !ck.optimizer->m2.shape_matches(ck.cloud))
            throw InvalidParameter("optimizer moments do not match cloud shape");
        bin::put<std::uint64_t>(os, ck.optimizer->step);
        detail::put_arrays(os, ck.optimizer->m1);
        detail::put_arrays(os, ck.optimizer->m2);
    }
}

inline Checkpoint read_checkpoint(std::istream& is) {
    bin::expect_magic(is, kCheckpointMagic, "checkpoint");
    const auto version = bin::get<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), -1);
    Checkpoint ck;
    const auto n = bin::get<std::uint64_t>(is, "count");
    if (n == 0 || n > (1ULL << 32)) throw ParseError("implausible Gaussian count", -1);
    ck.config_hash = bin::get<std::uint64_t>(is, "config hash");
    ck.width = bin::get<std::uint32_t>(is, "width");
    ck.height = bin::get<std::uint32_t>(is, "height");
    ck.iteration = bin::get<std::uint64_t>(is, "iteration");
    detail::get_arrays(is, ck.cloud, n);
    const auto has_opt = bin::get<std::uint8_t>(is, "optimizer flag");
    if (has_opt > 1) throw ParseError("bad optimizer flag", -1);
    if (has_opt) {
        OptimizerMoments m;
        m.step = bin::get<std::uint64_t>(is, "adam step");
        detail::get_arrays(is, m.m1, n);
        detail::get_arrays(is, m.m2, n);
        ck.optimizer = std::move(m);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes after checkpoint", -1);
    try {
        ck.cloud.validate();
    } catch (const InvalidParameter& e) {
        throw ParseError(std::string("invalid cloud in checkpoint: ") + e.what(), -1);
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_checkpoint(os, ck);
    if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    return read_checkpoint(is);
}

}  // namespace evgs
