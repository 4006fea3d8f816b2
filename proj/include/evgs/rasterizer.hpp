#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "evgs/camera.hpp"
#include "evgs/common.hpp"
#include "evgs/scene.hpp"

namespace evgs {

struct RasterConfig {
    ProjectionConfig projection;
    double alpha_clamp = 0.99;          ///< per-Gaussian opacity ceiling
    double min_alpha = 1.0 / 255.0;     ///< contributions below are skipped
    double transmittance_eps = 1e-4;    ///< stop compositing below this
    double max_condition = 1e10;        ///< cov2d condition number above which a splat is skipped
    int tile_size = 16;
    bool record_weights = false;        ///< keep per-pixel blend weights (diagnostics)
};

struct RenderedImage {
    Image pixels;          ///< grayscale, [0, 1]
    Image transmittance;   ///< final per-pixel transmittance
    std::size_t n_culled = 0;
    std::size_t n_singular = 0;
    /// Per-pixel compositing weights alpha_i * prod_{j<i}(1 - alpha_j) in
    /// front-to-back order; filled only when RasterConfig::record_weights.
    std::vector<std::vector<double>> weights;
};

namespace detail {

struct Splat {
    std::uint32_t index;  ///< Gaussian index in the cloud
    ActivatedGaussian g;
    ProjectedGaussian proj;
    double conic_a, conic_b, conic_c;  ///< inverse of cov2d
};

struct RasterPlan {
    std::vector<Splat> splats;  ///< sorted by (depth, index)
    std::vector<std::vector<std::uint32_t>> tile_lists;  ///< splat ids per tile, front to back
    int tiles_x = 0, tiles_y = 0;
    std::size_t n_culled = 0, n_singular = 0;
};

inline RasterPlan plan_raster(const GaussianCloud& cloud, const Pose& pose, const Intrinsics& k, const RasterConfig& cfg) {
    if (cfg.tile_size < 1) throw InvalidParameter("tile size must be >= 1");
    RasterPlan plan;
    const std::size_t n = cloud.size();
    std::vector<std::optional<Splat>> slots(n);
    std::vector<std::uint8_t> singular(n, 0);
    parallel_for(n, [&](std::size_t i) {
        Splat s;
        s.index = static_cast<std::uint32_t>(i);
        s.g = activate(cloud, i);
        const Covariance3 cov = build_covariance(s.g.rotation, s.g.scale);
        auto proj = project_gaussian(s.g.position, cov, pose, k, cfg.projection);
        if (!proj) return;
        const double a = proj->cov2d(0, 0), b = proj->cov2d(0, 1), c = proj->cov2d(1, 1);
        const double det = a * c - b * b;
        const double mid = 0.5 * (a + c);
        const double disc = std::sqrt(std::max(0.0, mid * mid - det));
        const double lmin = mid - disc, lmax = mid + disc;
        if (!(det > 0.0) || !(lmin > 0.0) || lmax / lmin > cfg.max_condition || !std::isfinite(det)) {
            singular[i] = 1;
            return;
        }
        s.proj = *proj;
        s.conic_a = c / det;
        s.conic_b = -b / det;
        s.conic_c = a / det;
        slots[i] = s;
    });

    plan.splats.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (slots[i]) plan.splats.push_back(*slots[i]);
        else if (singular[i]) ++plan.n_singular;
        else ++plan.n_culled;
    }
    std::stable_sort(plan.splats.begin(), plan.splats.end(), [](const Splat& a, const Splat& b) {
        if (a.proj.depth != b.proj.depth) return a.proj.depth < b.proj.depth;
        return a.index < b.index;
    });

    const int ts = cfg.tile_size;
    plan.tiles_x = (k.width + ts - 1) / ts;
    plan.tiles_y = (k.height + ts - 1) / ts;
    plan.tile_lists.assign(static_cast<std::size_t>(plan.tiles_x) * plan.tiles_y, {});
    for (std::size_t s = 0; s < plan.splats.size(); ++s) {
        const auto& sp = plan.splats[s];
        const double r = sp.proj.radius;
        const int x0 = std::max(0, static_cast<int>(std::floor((sp.proj.mean2d.x() - r) / ts)));
        const int x1 = std::min(plan.tiles_x - 1, static_cast<int>(std::floor((sp.proj.mean2d.x() + r) / ts)));
        const int y0 = std::max(0, static_cast<int>(std::floor((sp.proj.mean2d.y() - r) / ts)));
        const int y1 = std::min(plan.tiles_y - 1, static_cast<int>(std::floor((sp.proj.mean2d.y() + r) / ts)));
        for (int ty = y0; ty <= y1; ++ty)
            for (int tx = x0; tx <= x1; ++tx)
                plan.tile_lists[static_cast<std::size_t>(ty) * plan.tiles_x + tx].push_back(static_cast<std::uint32_t>(s));
    }
    return plan;
}

struct Contribution {
    std::uint32_t slot;  ///< position within the tile list
    double alpha;        ///< effective opacity after clamp
    double gauss;        ///< exp(power)
    double t_before;     ///< transmittance in front of this splat
    double dx, dy;
    bool clamped;
};

/// Front-to-back compositing of one pixel. Calls emit(contribution) for every
/// splat that contributes; returns (color, final transmittance).
template <class Emit>
inline std::pair<double, double> composite_pixel(const RasterPlan& plan, const std::vector<std::uint32_t>& list, double px,
                                                 double py, const RasterConfig& cfg, Emit&& emit) {
    double color = 0.0;
    double t = 1.0;
    for (std::uint32_t slot = 0; slot < list.size(); ++slot) {
        const Splat& s = plan.splats[list[slot]];
        const double dx = px - s.proj.mean2d.x();
        const double dy = py - s.proj.mean2d.y();
        const double power = -0.5 * (s.conic_a * dx * dx + 2.0 * s.conic_b * dx * dy + s.conic_c * dy * dy);
        if (power > 0.0) continue;
        const double gauss = std::exp(power);
        double alpha = s.g.opacity * gauss;
        bool clamped = false;
        if (alpha > cfg.alpha_clamp) {
            alpha = cfg.alpha_clamp;
            clamped = true;
        }
        if (alpha < cfg.min_alpha) continue;
        const double next_t = t * (1.0 - alpha);
        if (next_t < cfg.transmittance_eps) break;
        emit(Contribution{slot, alpha, gauss, t, dx, dy, clamped});
        color += s.g.intensity * alpha * t;
        t = next_t;
    }
    return {color, t};
}

}  // namespace detail

/// Forward splatting: per-tile front-to-back alpha compositing of the
/// projected Gaussians over a black background.
inline RenderedImage render(const GaussianCloud& cloud, const Pose& pose, const Intrinsics& k, const RasterConfig& cfg = {}) {
    k.validate();
    const detail::RasterPlan plan = detail::plan_raster(cloud, pose, k, cfg);
    RenderedImage out;
    out.pixels = Image(k.width, k.height, 0.0);
    out.transmittance = Image(k.width, k.height, 1.0);
    out.n_culled = plan.n_culled;
    out.n_singular = plan.n_singular;
    if (cfg.record_weights) out.weights.assign(static_cast<std::size_t>(k.width) * k.height, {});

    const int ts = cfg.tile_size;
    parallel_for(plan.tile_lists.size(), [&](std::size_t tile) {
        const int tx = static_cast<int>(tile % plan.tiles_x), ty = static_cast<int>(tile / plan.tiles_x);
        const auto& list = plan.tile_lists[tile];
        for (int y = ty * ts; y < std::min(k.height, (ty + 1) * ts); ++y)
            for (int x = tx * ts; x < std::min(k.width, (tx + 1) * ts); ++x) {
                std::vector<double>* wts = cfg.record_weights ? &out.weights[static_cast<std::size_t>(y) * k.width + x] : nullptr;
                auto [c, t] = detail::composite_pixel(plan, list, x, y, cfg, [&](const detail::Contribution& ct) {
                    if (wts) wts->push_back(ct.alpha * ct.t_before);
                });
                out.pixels(x, y) = c;
                out.transmittance(x, y) = t;
            }
    });
    return out;
}

namespace detail {

struct Splat2dGrad {
    double mean_x = 0, mean_y = 0;
    double conic_xx = 0, conic_xy = 0, conic_yy = 0;  ///< symmetric-matrix gradient entries
    double opacity = 0;     ///< wrt activated opacity
    double intensity = 0;   ///< wrt clamped intensity
};

// Gradient of R(q) contracted with G, wrt the components of the unit quaternion.
inline Vec4 rotation_matrix_vjp(const Vec4& q, const Mat3& g) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Vec4 out;
    out[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    out[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) -
                  2 * x * g(2, 2));
    out[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) -
                  2 * y * g(2, 2));
    out[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
                  x * g(2, 0) + y * g(2, 1));
    return out;
}

// Chains screen-space gradients of one splat back to its stored parameters.
inline void chain_splat(const GaussianCloud& cloud, const Splat& s, const Splat2dGrad& g2, const Pose& pose,
                        const Intrinsics& k, CloudGradients& out) {
    const std::size_t i = s.index;
    const Mat3 w = pose.rotation_matrix();
    const auto& jac = s.proj.jacobian;

    // conic = cov2d^-1
    Mat2 g_conic;
    g_conic << g2.conic_xx, g2.conic_xy, g2.conic_xy, g2.conic_yy;
    Mat2 conic;
    conic << s.conic_a, s.conic_b, s.conic_b, s.conic_c;
    const Mat2 g_cov2d = -conic * g_conic * conic;

    // cov2d = J W Sigma W^T J^T + blur
    const Mat3 rot = quat_to_matrix(s.g.rotation);
    const Mat3 m = rot * s.g.scale.asDiagonal();
    const Mat3 sigma = m * m.transpose();
    const Mat3 cov_view = w * sigma * w.transpose();
    const Mat3 g_cov_view = jac.transpose() * g_cov2d * jac;
    const Eigen::Matrix<double, 2, 3> g_jac = 2.0 * g_cov2d * jac * cov_view;
    const Mat3 g_sigma = w.transpose() * g_cov_view * w;

    // Sigma = M M^T, M = R diag(s)
    const Mat3 g_m = 2.0 * g_sigma * m;
    const Mat3 g_rot = g_m * s.g.scale.asDiagonal();
    for (int a = 0; a < 3; ++a) {
        const double g_scale = g_m.col(a).dot(rot.col(a));
        out.log_scales[3 * i + a] += g_scale * s.g.scale[a];
    }
    const Vec4 g_unit = rotation_matrix_vjp(s.g.rotation, g_rot);
    const Vec4 q_raw = cloud.rotation(i);
    const double qn = q_raw.norm();
    const Vec4 g_raw = (g_unit - s.g.rotation * s.g.rotation.dot(g_unit)) / qn;
    for (int a = 0; a < 4; ++a) out.rotations[4 * i + a] += g_raw[a];

    // mean2d = (fx X/Z + cx, fy Y/Z + cy); J also depends on the view position
    const Vec3& v = s.proj.view_pos;
    const double iz = 1.0 / v.z(), iz2 = iz * iz, iz3 = iz2 * iz;
    Vec3 g_view = jac.transpose() * Vec2(g2.mean_x, g2.mean_y);
    g_view.x() += g_jac(0, 2) * (-k.fx * iz2);
    g_view.y() += g_jac(1, 2) * (-k.fy * iz2);
    g_view.z() += g_jac(0, 0) * (-k.fx * iz2) + g_jac(0, 2) * (2.0 * k.fx * v.x() * iz3) + g_jac(1, 1) * (-k.fy * iz2) +
                  g_jac(1, 2) * (2.0 * k.fy * v.y() * iz3);
    const Vec3 g_pos = w.transpose() * g_view;
    for (int a = 0; a < 3; ++a) out.positions[3 * i + a] += g_pos[a];

    out.opacity_logits[i] += g2.opacity * s.g.opacity * (1.0 - s.g.opacity);
    const double c_raw = cloud.intensity[i];
    if (c_raw >= 0.0 && c_raw <= 1.0) out.intensity[i] += g2.intensity;
}

}  // namespace detail

/// Analytic backward pass. Adds d(loss)/d(stored parameter) into `grads`
/// (which must be shape-matched to the cloud) given the upstream gradient
/// d(loss)/d(pixel). Recomputes the forward blend per tile.
inline void render_backward(const GaussianCloud& cloud, const Pose& pose, const Intrinsics& k, const Image& upstream,
                            CloudGradients& grads, const RasterConfig& cfg = {}) {
    k.validate();
    if (upstream.width != k.width || upstream.height != k.height)
        throw InvalidParameter("render_backward: upstream gradient shape does not match intrinsics");
    if (!grads.shape_matches(cloud)) throw InvalidParameter("render_backward: gradient buffer shape mismatch");

    const detail::RasterPlan plan = detail::plan_raster(cloud, pose, k, cfg);
    const int ts = cfg.tile_size;
    std::vector<std::vector<detail::Splat2dGrad>> tile_grads(plan.tile_lists.size());

    parallel_for(plan.tile_lists.size(), [&](std::size_t tile) {
        const int tx = static_cast<int>(tile % plan.tiles_x), ty = static_cast<int>(tile / plan.tiles_x);
        const auto& list = plan.tile_lists[tile];
        auto& acc = tile_grads[tile];
        acc.assign(list.size(), {});
        std::vector<detail::Contribution> contribs;
        for (int y = ty * ts; y < std::min(k.height, (ty + 1) * ts); ++y)
            for (int x = tx * ts; x < std::min(k.width, (tx + 1) * ts); ++x) {
                const double up = upstream(x, y);
                if (up == 0.0) continue;
                contribs.clear();
                detail::composite_pixel(plan, list, x, y, cfg,
                                        [&](const detail::Contribution& c) { contribs.push_back(c); });
                double suffix = 0.0;  // sum of c_j alpha_j T_j behind the current splat
                for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
                    const detail::Splat& s = plan.splats[list[it->slot]];
                    auto& g = acc[it->slot];
                    const double ci = s.g.intensity;
                    g.intensity += up * it->alpha * it->t_before;
                    const double g_alpha = up * (ci * it->t_before - suffix / (1.0 - it->alpha));
                    suffix += ci * it->alpha * it->t_before;
                    if (it->clamped) continue;
                    g.opacity += g_alpha * it->gauss;
                    const double g_power = g_alpha * it->alpha;
                    g.mean_x += g_power * (s.conic_a * it->dx + s.conic_b * it->dy);
                    g.mean_y += g_power * (s.conic_b * it->dx + s.conic_c * it->dy);
                    g.conic_xx += -0.5 * g_power * it->dx * it->dx;
                    g.conic_xy += -0.5 * g_power * it->dx * it->dy;
                    g.conic_yy += -0.5 * g_power * it->dy * it->dy;
                }
            }
    });

    // Reduce in tile order so results do not depend on the worker count.
    std::vector<detail::Splat2dGrad> splat_grads(plan.splats.size());
    for (std::size_t tile = 0; tile < plan.tile_lists.size(); ++tile) {
        const auto& list = plan.tile_lists[tile];
        for (std::size_t slot = 0; slot < list.size(); ++slot) {
            const auto& src = tile_grads[tile][slot];
            auto& dst = splat_grads[list[slot]];
            dst.mean_x += src.mean_x;
            dst.mean_y += src.mean_y;
            dst.conic_xx += src.conic_xx;
            dst.conic_xy += src.conic_xy;
            dst.conic_yy += src.conic_yy;
            dst.opacity += src.opacity;
            dst.intensity += src.intensity;
        }
    }
    // each splat writes only its own Gaussian's slots
    parallel_for(plan.splats.size(), [&](std::size_t s) {
        detail::chain_splat(cloud, plan.splats[s], splat_grads[s], pose, k, grads);
    });
}

}  // namespace evgs
