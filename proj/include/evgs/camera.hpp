#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "evgs/common.hpp"
#include "evgs/scene.hpp"

namespace evgs {

/// Pinhole intrinsics. Pixel (x, y) samples the image plane at integer
/// coordinates (x, y); the principal point is in the same convention.
struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;

    void validate() const {
        if (!(fx > 0 && fy > 0) || !std::isfinite(fx) || !std::isfinite(fy))
            throw InvalidParameter("intrinsics: focal lengths must be positive and finite");
        if (!std::isfinite(cx) || !std::isfinite(cy)) throw InvalidParameter("intrinsics: non-finite principal point");
        if (width <= 0 || height <= 0) throw InvalidParameter("intrinsics: resolution must be positive");
    }

    /// Square pixels, principal point at (width/2, height/2), given horizontal FOV.
    static Intrinsics from_fov(int width, int height, double hfov_rad) {
        Intrinsics k;
        k.width = width;
        k.height = height;
        k.fx = k.fy = 0.5 * width / std::tan(0.5 * hfov_rad);
        k.cx = 0.5 * width;
        k.cy = 0.5 * height;
        return k;
    }

    bool operator==(const Intrinsics&) const = default;
};

/// World-to-camera extrinsics: x_cam = R(rotation) * x_world + translation.
/// Camera axes: +x right, +y down, +z forward.
struct Pose {
    Vec4 rotation{1, 0, 0, 0};  ///< unit quaternion (w, x, y, z)
    Vec3 translation = Vec3::Zero();
    std::int64_t timestamp_us = 0;

    Mat3 rotation_matrix() const { return quat_to_matrix(rotation); }
    Vec3 camera_center() const { return -(rotation_matrix().transpose() * translation); }
    bool operator==(const Pose&) const = default;
};

struct Trajectory {
    std::vector<Pose> poses;
    bool loop = false;
    /// When looping, the wrap period: pose_at(t + period) == pose_at(t), and
    /// the interval [last timestamp, period) interpolates back to pose 0.
    std::int64_t period_us = 0;

    void validate() const {
        if (poses.size() < 2) throw InvalidParameter("trajectory needs at least 2 poses");
        for (std::size_t i = 0; i < poses.size(); ++i) {
            if (poses[i].timestamp_us < 0) throw InvalidParameter("trajectory: negative timestamp");
            if (i > 0 && poses[i].timestamp_us <= poses[i - 1].timestamp_us)
                throw InvalidParameter("trajectory: timestamps must be strictly increasing");
            if (std::abs(poses[i].rotation.norm() - 1.0) > 1e-9) throw InvalidParameter("trajectory: non-unit quaternion");
        }
        if (loop && period_us <= poses.back().timestamp_us - poses.front().timestamp_us)
            throw InvalidParameter("trajectory: loop period must exceed the pose span");
    }

    std::int64_t start() const { return poses.front().timestamp_us; }
    std::int64_t end() const { return poses.back().timestamp_us; }
    bool operator==(const Trajectory&) const = default;
};

// ---------------------------------------------------------------------------
// Projection

struct ProjectionConfig {
    double blur_floor = 0.3;   ///< px^2 added to the 2D covariance diagonal
    double near_plane = 0.01;  ///< camera-z below which a Gaussian is culled
    double extent_sigma = 3.0; ///< screen-space support radius in standard deviations
};

struct ProjectedGaussian {
    Vec2 mean2d;
    Mat2 cov2d;      ///< includes the blur floor
    double depth;    ///< camera-space z
    Vec3 view_pos;   ///< camera-space mean
    Eigen::Matrix<double, 2, 3> jacobian;  ///< d(pixel)/d(view_pos) at view_pos
    double radius;   ///< extent_sigma * sqrt(max eigenvalue of cov2d)
};

/// Returns std::nullopt when the Gaussian is culled (behind the near plane
/// or entirely outside the image by its screen-space extent).
inline std::optional<ProjectedGaussian> project_gaussian(const Vec3& mean, const Covariance3& cov, const Pose& pose,
                                                         const Intrinsics& k, const ProjectionConfig& cfg = {}) {
    if (!mean.allFinite() || !cov.m.allFinite() || !pose.rotation.allFinite() || !pose.translation.allFinite())
        throw InvalidParameter("project_gaussian: non-finite input");
    const Mat3 w = pose.rotation_matrix();
    const Vec3 v = w * mean + pose.translation;
    if (v.z() <= cfg.near_plane) return std::nullopt;

    ProjectedGaussian p;
    p.view_pos = v;
    p.depth = v.z();
    const double iz = 1.0 / v.z();
    p.mean2d = Vec2(k.fx * v.x() * iz + k.cx, k.fy * v.y() * iz + k.cy);
    p.jacobian << k.fx * iz, 0.0, -k.fx * v.x() * iz * iz,
                  0.0, k.fy * iz, -k.fy * v.y() * iz * iz;
    const Mat3 cov_view = w * cov.m * w.transpose();
    p.cov2d = p.jacobian * cov_view * p.jacobian.transpose();
    p.cov2d(1, 0) = p.cov2d(0, 1);
    p.cov2d(0, 0) += cfg.blur_floor;
    p.cov2d(1, 1) += cfg.blur_floor;

    const double a = p.cov2d(0, 0), b = p.cov2d(0, 1), c = p.cov2d(1, 1);
    const double mid = 0.5 * (a + c);
    const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - (a * c - b * b)));
    p.radius = cfg.extent_sigma * std::sqrt(lambda_max);
    if (p.mean2d.x() + p.radius < 0 || p.mean2d.x() - p.radius > k.width - 1 || p.mean2d.y() + p.radius < 0 ||
        p.mean2d.y() - p.radius > k.height - 1)
        return std::nullopt;
    return p;
}

// ---------------------------------------------------------------------------
// Trajectories

/// World-to-camera pose at `eye` looking at `target` with world +z up.
inline Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ()) {
    const Vec3 forward = (target - eye).normalized();
    const Vec3 right_raw = forward.cross(up);
    if (right_raw.norm() < 1e-12) throw InvalidParameter("look_at: view direction parallel to up vector");
    const Vec3 right = right_raw.normalized();
    const Vec3 down = forward.cross(right);
    Mat3 r;
    r.row(0) = right.transpose();
    r.row(1) = down.transpose();
    r.row(2) = forward.transpose();
    Eigen::Quaterniond q(r);
    q.normalize();
    Pose p;
    p.rotation = Vec4(q.w(), q.x(), q.y(), q.z());
    p.translation = -(quat_to_matrix(p.rotation) * eye);
    return p;
}

/// Orbit of `n_poses` cameras at equal azimuth steps over [0, 2pi) around
/// `target`, timestamps k * duration / n_poses. Closes on itself.
inline Trajectory orbit_trajectory(double radius, double elevation, std::size_t n_poses, std::int64_t duration_us,
                                   const Vec3& target = Vec3::Zero()) {
    if (n_poses < 2) throw InvalidParameter("orbit_trajectory: need at least 2 poses");
    if (!(radius > 0) || !std::isfinite(radius)) throw InvalidParameter("orbit_trajectory: radius must be positive");
    if (duration_us < static_cast<std::int64_t>(n_poses))
        throw InvalidParameter("orbit_trajectory: duration too short for distinct microsecond timestamps");
    if (!(std::abs(elevation) < 0.5 * std::numbers::pi)) throw InvalidParameter("orbit_trajectory: |elevation| must be < pi/2");

    Trajectory traj;
    traj.loop = true;
    traj.period_us = duration_us;
    traj.poses.reserve(n_poses);
    for (std::size_t k = 0; k < n_poses; ++k) {
        const double az = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n_poses);
        const Vec3 eye = target + radius * Vec3(std::cos(elevation) * std::cos(az), std::cos(elevation) * std::sin(az),
                                                std::sin(elevation));
        Pose p = look_at(eye, target);
        // integer division keeps 1000 poses over 1 s at exact 1000 us steps
        p.timestamp_us = static_cast<std::int64_t>(k) * duration_us / static_cast<std::int64_t>(n_poses);
        traj.poses.push_back(p);
    }
    return traj;
}

inline Vec4 slerp(const Vec4& a, const Vec4& b, double u) {
    Eigen::Quaterniond qa(a[0], a[1], a[2], a[3]), qb(b[0], b[1], b[2], b[3]);
    Eigen::Quaterniond q = qa.slerp(u, qb).normalized();
    return Vec4(q.w(), q.x(), q.y(), q.z());
}

/// Pose at arbitrary time: slerp on rotation, linear on translation between
/// the bracketing poses. Looping trajectories wrap t modulo the period.
inline Pose pose_at(const Trajectory& traj, std::int64_t t) {
    const auto& ps = traj.poses;
    if (ps.size() < 2) throw InvalidParameter("pose_at: trajectory needs at least 2 poses");
    if (traj.loop) {
        const std::int64_t rel = (t - traj.start()) % traj.period_us;
        t = traj.start() + (rel < 0 ? rel + traj.period_us : rel);
    } else if (t < traj.start() || t > traj.end()) {
        throw OutOfRange("pose_at: t=" + std::to_string(t) + " outside [" + std::to_string(traj.start()) + ", " +
                         std::to_string(traj.end()) + "]");
    }

    auto it = std::upper_bound(ps.begin(), ps.end(), t, [](std::int64_t v, const Pose& p) { return v < p.timestamp_us; });
    // it points to the first pose strictly after t
    const std::size_t hi = static_cast<std::size_t>(it - ps.begin());
    const Pose& a = ps[hi - 1];
    if (a.timestamp_us == t) return a;
    const Pose* b = nullptr;
    std::int64_t tb = 0;
    if (hi < ps.size()) {
        b = &ps[hi];
        tb = b->timestamp_us;
    } else {  // wrap segment on a loop
        b = &ps.front();
        tb = traj.start() + traj.period_us;
    }
    const double u = static_cast<double>(t - a.timestamp_us) / static_cast<double>(tb - a.timestamp_us);
    Pose out;
    out.rotation = slerp(a.rotation, b->rotation, u);
    out.translation = (1.0 - u) * a.translation + u * b->translation;
    out.timestamp_us = t;
    return out;
}

// ---------------------------------------------------------------------------
// Trajectory file
//
//   # evgs trajectory v1
//   intrinsics <fx> <fy> <cx> <cy> <width> <height>
//   loop <0|1> <period_us>
//   <timestamp_us> <qw> <qx> <qy> <qz> <tx> <ty> <tz>     (one line per pose)
//
// Reals are written with 17 significant digits so reading back is exact.

inline void write_trajectory(std::ostream& os, const Trajectory& traj, const Intrinsics& k) {
    os << "# evgs trajectory v1\n";
    os << std::setprecision(17);
    os << "intrinsics " << k.fx << ' ' << k.fy << ' ' << k.cx << ' ' << k.cy << ' ' << k.width << ' ' << k.height << '\n';
    os << "loop " << (traj.loop ? 1 : 0) << ' ' << traj.period_us << '\n';
    for (const Pose& p : traj.poses) {
        os << p.timestamp_us;
        for (int i = 0; i < 4; ++i) os << ' ' << p.rotation[i];
        for (int i = 0; i < 3; ++i) os << ' ' << p.translation[i];
        os << '\n';
    }
}

struct TrajectoryFile {
    Trajectory trajectory;
    Intrinsics intrinsics;
};

inline TrajectoryFile read_trajectory(std::istream& is) {
    TrajectoryFile out;
    std::string line;
    bool have_intr = false;
    std::int64_t record = 0;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        if (line.rfind("intrinsics", 0) == 0) {
            std::string tag;
            Intrinsics& k = out.intrinsics;
            if (!(ls >> tag >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height))
                throw ParseError("malformed intrinsics header", -1);
            have_intr = true;
            continue;
        }
        if (line.rfind("loop", 0) == 0) {
            std::string tag;
            int flag = 0;
            if (!(ls >> tag >> flag >> out.trajectory.period_us) || (flag != 0 && flag != 1))
                throw ParseError("malformed loop header", -1);
            out.trajectory.loop = flag == 1;
            continue;
        }
        Pose p;
        if (!(ls >> p.timestamp_us >> p.rotation[0] >> p.rotation[1] >> p.rotation[2] >> p.rotation[3] >>
              p.translation[0] >> p.translation[1] >> p.translation[2]))
            throw ParseError("malformed pose record", record);
        std::string extra;
        if (ls >> extra) throw ParseError("trailing fields in pose record", record);
        if (!out.trajectory.poses.empty() && p.timestamp_us <= out.trajectory.poses.back().timestamp_us)
            throw ParseError("pose timestamps must be strictly increasing", record);
        out.trajectory.poses.push_back(p);
        ++record;
    }
    if (!have_intr) throw ParseError("missing intrinsics header", -1);
    try {
        out.intrinsics.validate();
        out.trajectory.validate();
    } catch (const InvalidParameter& e) {
        throw ParseError(std::string("invalid trajectory file: ") + e.what(), -1);
    }
    return out;
}

inline void save_trajectory(const std::string& path, const Trajectory& traj, const Intrinsics& k) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_trajectory(os, traj, k);
    if (!os) throw IoError("write failed: " + path);
}

inline TrajectoryFile load_trajectory(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open trajectory " + path);
    return read_trajectory(is);
}

}  // namespace evgs
