#pragma once

#include <vector>

#include "evgs/camera.hpp"
#include "evgs/events.hpp"
#include "evgs/rasterizer.hpp"
#include "evgs/scene.hpp"
#include "evgs/trainer.hpp"

namespace evgs {

/// Renders the cloud at every pose of the trajectory.
inline std::vector<Image> render_trajectory(const GaussianCloud& cloud, const Trajectory& traj, const Intrinsics& k,
                                            const RasterConfig& rcfg = {}) {
    std::vector<Image> out;
    out.reserve(traj.poses.size());
    for (const Pose& p : traj.poses) out.push_back(render(cloud, p, k, rcfg).pixels);
    return out;
}

struct SyntheticDataset {
    Dataset data;
    std::vector<Image> frames;  ///< ground-truth renders, one per pose
};

/// Ground-truth frames along the trajectory and the idealised event stream
/// they produce. Brightness is mapped to log units with (gamma, eps).
inline SyntheticDataset make_synthetic_dataset(const GaussianCloud& gt, const Trajectory& traj, const Intrinsics& k,
                                               double threshold, double gamma, double eps, const RasterConfig& rcfg = {}) {
    traj.validate();
    k.validate();
    SyntheticDataset s;
    s.frames = render_trajectory(gt, traj, k, rcfg);
    std::vector<std::int64_t> ts;
    ts.reserve(traj.poses.size());
    for (const Pose& p : traj.poses) ts.push_back(p.timestamp_us);
    s.data.events = simulate_events(s.frames, ts, threshold, gamma, eps);
    s.data.trajectory = traj;
    s.data.intrinsics = k;
    return s;
}

}  // namespace evgs
