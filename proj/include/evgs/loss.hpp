#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "evgs/common.hpp"
#include "evgs/events.hpp"
#include "evgs/ssim.hpp"

namespace evgs {

/// How integer event counts are brought into log-brightness units.
enum class UnitMode {
    threshold,    ///< E_gt = A * counts
    standardize,  ///< both operands reduced to zero mean, unit deviation per frame
};

struct LossConfig {
    double gamma = 4.8;
    double eps = 1e-5;
    double linlog_b = 20.0;
    double lambda = 0.1;
    UnitMode units = UnitMode::threshold;
    SsimParams ssim;  ///< range stays 1: D-SSIM operands are rescaled to [0, 1]

    void validate() const {
        if (!(gamma > 0) || !(eps > 0)) throw InvalidParameter("loss: gamma and eps must be positive");
        if (!(linlog_b > 1)) throw InvalidParameter("loss: linlog threshold B must exceed 1");
        if (!(lambda >= 0)) throw InvalidParameter("loss: lambda must be non-negative");
        ssim.validate();
    }
};

/// log(I^g + eps). Negative pixels are rejected.
inline Image log_image(const Image& img, double gamma, double eps) { return log_gamma(img, gamma, eps); }

/// d log_image / dI, elementwise.
inline Image log_image_grad(const Image& img, double gamma, double eps) {
    Image out(img.width, img.height);
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = img.data[i];
        const double vg = std::pow(v, gamma);
        out.data[i] = v > 0.0 ? gamma * vg / (v * (vg + eps)) : 0.0;
    }
    return out;
}

inline Image predicted_diff(const Image& i_t, const Image& i_tw, double gamma, double eps) {
    require_same_shape(i_t, i_tw, "predicted_diff");
    Image a = log_image(i_t, gamma, eps);
    const Image b = log_image(i_tw, gamma, eps);
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] -= b.data[i];
    return a;
}

/// Linear below b (slope ln(b)/b), logarithmic above. Continuous at b.
inline double linlog(double u, double b) { return u < b ? u * std::log(b) / b : std::log(u); }

/// Odd extension sign(u) * linlog(|u|) for signed difference frames.
inline double signed_linlog(double u, double b) { return u < 0 ? -linlog(-u, b) : linlog(u, b); }

inline double signed_linlog_deriv(double u, double b) {
    const double a = std::abs(u);
    return a < b ? std::log(b) / b : 1.0 / a;
}

struct ScalarWithGrad {
    double value = 0.0;
    Image grad;  ///< wrt the first operand
};

/// Mean over pixels of (l(x) - l(y))^2 with l the signed linlog.
inline ScalarWithGrad event_loss(const Image& x, const Image& y, double b) {
    require_same_shape(x, y, "event_loss");
    if (x.size() == 0) throw InvalidParameter("event_loss: empty frame");
    ScalarWithGrad r;
    r.grad = Image(x.width, x.height);
    const double inv_n = 1.0 / static_cast<double>(x.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = signed_linlog(x.data[i], b) - signed_linlog(y.data[i], b);
        sum += d * d;
        r.grad.data[i] = 2.0 * d * signed_linlog_deriv(x.data[i], b) * inv_n;
    }
    r.value = sum * inv_n;
    return r;
}

/// SSIM of (x, y) after mapping both into [0, 1] with their shared min/max.
/// Gradient is wrt x and accounts for x's influence on the shared bounds.
inline ScalarWithGrad dssim(const Image& x, const Image& y, const SsimParams& params) {
    require_same_shape(x, y, "dssim");
    if (x.size() == 0) throw InvalidParameter("dssim: empty frame");
    std::size_t imin = 0, imax = 0;
    bool min_in_x = true, max_in_x = true;
    double lo = x.data[0], hi = x.data[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x.data[i] < lo) { lo = x.data[i]; imin = i; min_in_x = true; }
        if (x.data[i] > hi) { hi = x.data[i]; imax = i; max_in_x = true; }
    }
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y.data[i] < lo) { lo = y.data[i]; imin = i; min_in_x = false; }
        if (y.data[i] > hi) { hi = y.data[i]; imax = i; max_in_x = false; }
    }
    const double range = hi - lo;
    SsimParams p = params;
    p.range = 1.0;
    Image xs(x.width, x.height, 0.0), ys(y.width, y.height, 0.0);
    if (range > 0.0) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            xs.data[i] = (x.data[i] - lo) / range;
            ys.data[i] = (y.data[i] - lo) / range;
        }
    }
    const SsimResult s = ssim(xs, ys, p, true);
    ScalarWithGrad r;
    r.value = s.value;
    r.grad = Image(x.width, x.height, 0.0);
    if (!(range > 0.0)) return r;

    double t1 = 0.0, t2 = 0.0;  // sum(G), sum(G z')
    for (std::size_t i = 0; i < x.size(); ++i) {
        t1 += s.grad_x.data[i] + s.grad_y.data[i];
        t2 += s.grad_x.data[i] * xs.data[i] + s.grad_y.data[i] * ys.data[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) r.grad.data[i] = s.grad_x.data[i] / range;
    if (min_in_x) r.grad.data[imin] += (t2 - t1) / range;
    if (max_in_x) r.grad.data[imax] += -t2 / range;
    return r;
}

/// Converts an event frame into the target operand of the loss.
inline Image event_target(const EventFrame& frame, double threshold, UnitMode mode) {
    Image out(frame.counts.width, frame.counts.height);
    const double scale = mode == UnitMode::threshold ? threshold : 1.0;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = scale * frame.counts.data[i];
    return out;
}

namespace detail {

struct Standardized {
    Image z;
    double sigma = 1.0;
};

inline Standardized standardize(const Image& x) {
    const double n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x.data) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x.data) var += (v - mean) * (v - mean);
    var /= n;
    Standardized s;
    s.sigma = std::max(std::sqrt(var), 1e-12);
    s.z = Image(x.width, x.height);
    for (std::size_t i = 0; i < x.size(); ++i) s.z.data[i] = (x.data[i] - mean) / s.sigma;
    return s;
}

// Pulls a gradient wrt z = standardize(x) back to x.
inline Image standardize_backward(const Standardized& s, const Image& g) {
    const double n = static_cast<double>(g.size());
    double mean_g = 0.0, mean_gz = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        mean_g += g.data[i];
        mean_gz += g.data[i] * s.z.data[i];
    }
    mean_g /= n;
    mean_gz /= n;
    Image out(g.width, g.height);
    for (std::size_t i = 0; i < g.size(); ++i) out.data[i] = (g.data[i] - mean_g - s.z.data[i] * mean_gz) / s.sigma;
    return out;
}

}  // namespace detail

struct LossReport {
    double total = 0.0;
    double event = 0.0;      ///< L_e
    double ssim = 0.0;       ///< SSIM value; the D-SSIM term is lambda * (1 - ssim)
    double dssim_term = 0.0;
    Image grad;              ///< d total / d E_pred
    Image grad_event;        ///< d L_e / d E_pred
    Image grad_dssim;        ///< d (lambda (1 - ssim)) / d E_pred
};

/// total = L_e + lambda * (1 - SSIM), with gradients wrt E_pred.
inline LossReport total_loss(const Image& e_pred, const Image& e_gt, const LossConfig& cfg) {
    cfg.validate();
    require_same_shape(e_pred, e_gt, "total_loss");
    const Image* x = &e_pred;
    const Image* y = &e_gt;
    detail::Standardized sx, sy;
    if (cfg.units == UnitMode::standardize) {
        sx = detail::standardize(e_pred);
        sy = detail::standardize(e_gt);
        x = &sx.z;
        y = &sy.z;
    }

    LossReport r;
    ScalarWithGrad le = event_loss(*x, *y, cfg.linlog_b);
    r.event = le.value;
    r.grad_event = std::move(le.grad);
    ScalarWithGrad s = dssim(*x, *y, cfg.ssim);
    r.ssim = s.value;
    r.dssim_term = cfg.lambda * (1.0 - s.value);
    r.grad_dssim = std::move(s.grad);
    for (double& v : r.grad_dssim.data) v *= -cfg.lambda;
    r.total = r.event + r.dssim_term;
    r.grad = Image(e_pred.width, e_pred.height);
    for (std::size_t i = 0; i < r.grad.size(); ++i) r.grad.data[i] = r.grad_event.data[i] + r.grad_dssim.data[i];

    if (cfg.units == UnitMode::standardize) {
        r.grad = detail::standardize_backward(sx, r.grad);
        r.grad_event = detail::standardize_backward(sx, r.grad_event);
        r.grad_dssim = detail::standardize_backward(sx, r.grad_dssim);
    }
    return r;
}

}  // namespace evgs
