#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "evgs/common.hpp"

namespace evgs {

/// Gaussian-windowed SSIM. Windows are evaluated only where they fit inside
/// the frame ("valid" placement) and averaged over all placements.
struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double range = 1.0;  ///< dynamic range L of the inputs

    double c1() const { return (k1 * range) * (k1 * range); }
    double c2() const { return (k2 * range) * (k2 * range); }

    void validate() const {
        if (window < 3 || window % 2 == 0) throw InvalidParameter("SSIM window must be odd and >= 3");
        if (!(sigma > 0) || !(range > 0) || !(k1 > 0) || !(k2 > 0)) throw InvalidParameter("SSIM constants must be positive");
    }
};

struct SsimResult {
    double value = 0.0;
    Image grad_x;  ///< d(value)/dx, filled when requested
    Image grad_y;  ///< d(value)/dy, filled when requested
};

namespace detail {

inline std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(size);
    const int half = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        const double d = i - half;
        k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
}

// Separable valid correlation: out(px,py) = sum_ab k[a]k[b] in(px+a, py+b).
inline Image correlate_valid(const Image& in, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    const int ow = in.width - n + 1, oh = in.height - n + 1;
    Image rows(ow, in.height);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int a = 0; a < n; ++a) s += k[a] * in(x + a, y);
            rows(x, y) = s;
        }
    Image out(ow, oh);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int b = 0; b < n; ++b) s += k[b] * rows(x, y + b);
            out(x, y) = s;
        }
    return out;
}

// Adjoint of correlate_valid: scatters a valid-size map back to full size.
inline Image correlate_valid_adjoint(const Image& map, const std::vector<double>& k, int width, int height) {
    const int n = static_cast<int>(k.size());
    Image cols(map.width, height, 0.0);
    for (int y = 0; y < map.height; ++y)
        for (int x = 0; x < map.width; ++x)
            for (int b = 0; b < n; ++b) cols(x, y + b) += k[b] * map(x, y);
    Image out(width, height, 0.0);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < map.width; ++x)
            for (int a = 0; a < n; ++a) out(x + a, y) += k[a] * cols(x, y);
    return out;
}

inline Image multiply(const Image& a, const Image& b) {
    Image out(a.width, a.height);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

}  // namespace detail

inline SsimResult ssim(const Image& x, const Image& y, const SsimParams& p = {}, bool want_grad = false) {
    p.validate();
    require_same_shape(x, y, "ssim");
    if (x.width < p.window || x.height < p.window)
        throw InvalidParameter("ssim: frame smaller than the " + std::to_string(p.window) + "px window");

    const auto k = detail::gaussian_kernel(p.window, p.sigma);
    const Image mx = detail::correlate_valid(x, k);
    const Image my = detail::correlate_valid(y, k);
    const Image exx = detail::correlate_valid(detail::multiply(x, x), k);
    const Image eyy = detail::correlate_valid(detail::multiply(y, y), k);
    const Image exy = detail::correlate_valid(detail::multiply(x, y), k);
    const double c1 = p.c1(), c2 = p.c2();
    const std::size_t count = mx.size();
    const double inv_count = 1.0 / static_cast<double>(count);

    SsimResult r;
    // per placement: d/d(mu_x), d/d(sigma_x^2), d/d(sigma_xy) and the y counterparts
    Image d_mx, d_my, d_vx, d_vy, d_cxy;
    if (want_grad) {
        d_mx = d_my = d_vx = d_vy = d_cxy = Image(mx.width, mx.height, 0.0);
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double ux = mx.data[i], uy = my.data[i];
        const double vx = exx.data[i] - ux * ux;
        const double vy = eyy.data[i] - uy * uy;
        const double cxy = exy.data[i] - ux * uy;
        const double n1 = 2.0 * ux * uy + c1, n2 = 2.0 * cxy + c2;
        const double d1 = ux * ux + uy * uy + c1, d2 = vx + vy + c2;
        const double den = d1 * d2;
        const double s = n1 * n2 / den;
        sum += s;
        if (want_grad) {
            d_mx.data[i] = inv_count * (2.0 * uy * n2 / den - s * 2.0 * ux / d1);
            d_my.data[i] = inv_count * (2.0 * ux * n2 / den - s * 2.0 * uy / d1);
            d_vx.data[i] = inv_count * (-s / d2);
            d_vy.data[i] = d_vx.data[i];
            d_cxy.data[i] = inv_count * (2.0 * n1 / den);
        }
    }
    r.value = sum * inv_count;
    if (!want_grad) return r;

    // mu_x = K*x, sigma_x^2 = K*(x^2) - mu_x^2, sigma_xy = K*(xy) - mu_x mu_y
    auto grad_for = [&](const Image& self, const Image& other, const Image& d_mu_self, const Image& d_var_self,
                        const Image& mu_self, const Image& mu_other) {
        Image lin(d_mu_self.width, d_mu_self.height);
        for (std::size_t i = 0; i < count; ++i)
            lin.data[i] = d_mu_self.data[i] - 2.0 * d_var_self.data[i] * mu_self.data[i] - d_cxy.data[i] * mu_other.data[i];
        const Image g_lin = detail::correlate_valid_adjoint(lin, k, x.width, x.height);
        const Image g_var = detail::correlate_valid_adjoint(d_var_self, k, x.width, x.height);
        const Image g_cov = detail::correlate_valid_adjoint(d_cxy, k, x.width, x.height);
        Image g(x.width, x.height);
        for (std::size_t j = 0; j < g.size(); ++j)
            g.data[j] = g_lin.data[j] + 2.0 * self.data[j] * g_var.data[j] + other.data[j] * g_cov.data[j];
        return g;
    };
    r.grad_x = grad_for(x, y, d_mx, d_vx, mx, my);
    r.grad_y = grad_for(y, x, d_my, d_vy, my, mx);
    return r;
}

}  // namespace evgs
