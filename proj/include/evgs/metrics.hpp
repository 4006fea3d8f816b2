#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "evgs/common.hpp"
#include "evgs/ssim.hpp"

namespace evgs {

/// PSNR in dB for images in [0, 1] (peak 1). Identical images return +inf.
inline double psnr(const Image& x, const Image& y) {
    require_same_shape(x, y, "psnr");
    if (x.size() == 0) throw InvalidParameter("psnr: empty image");
    double se = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x.data[i] - y.data[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(x.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

inline double psnr_from_mse(double mse) { return mse == 0.0 ? std::numeric_limits<double>::infinity() : -10.0 * std::log10(mse); }

/// SSIM on [0, 1] images; same implementation as the training loss.
inline double ssim_index(const Image& x, const Image& y, const SsimParams& p = {}) { return ssim(x, y, p).value; }

struct ViewMetrics {
    std::string name;
    double psnr = 0.0;  ///< +inf when the view is identical to ground truth
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<ViewMetrics> views;
    double mean_psnr = 0.0;     ///< over views with finite PSNR; NaN if none
    double mean_ssim = 0.0;
    std::size_t n_identical = 0;

    std::size_t view_count() const { return views.size(); }

    void finalize() {
        double sp = 0.0, ss = 0.0;
        std::size_t finite = 0;
        n_identical = 0;
        for (const auto& v : views) {
            ss += v.ssim;
            if (std::isinf(v.psnr)) {
                ++n_identical;
            } else {
                sp += v.psnr;
                ++finite;
            }
        }
        mean_psnr = finite ? sp / static_cast<double>(finite) : std::numeric_limits<double>::quiet_NaN();
        mean_ssim = views.empty() ? std::numeric_limits<double>::quiet_NaN() : ss / static_cast<double>(views.size());
    }
};

inline EvalReport evaluate(const std::vector<Image>& renders, const std::vector<Image>& truth,
                           const std::vector<std::string>& names = {}, const SsimParams& p = {}) {
    if (renders.size() != truth.size())
        throw InvalidParameter("evaluate: " + std::to_string(renders.size()) + " renders vs " +
                               std::to_string(truth.size()) + " ground-truth views");
    if (renders.empty()) throw InvalidParameter("evaluate: no views");
    EvalReport r;
    r.views.resize(renders.size());
    parallel_for(renders.size(), [&](std::size_t i) {
        r.views[i].name = i < names.size() ? names[i] : std::to_string(i);
        r.views[i].psnr = psnr(renders[i], truth[i]);
        r.views[i].ssim = ssim_index(renders[i], truth[i], p);
    });
    r.finalize();
    return r;
}

/// CSV: header `view,psnr_db,ssim`, one row per view ("inf" for identical),
/// then a `mean` row.
inline void write_eval_csv(std::ostream& os, const EvalReport& r) {
    char buf[128];
    os << "view,psnr_db,ssim\n";
    for (const auto& v : r.views) {
        if (std::isinf(v.psnr)) std::snprintf(buf, sizeof buf, "inf,%.10f", v.ssim);
        else std::snprintf(buf, sizeof buf, "%.10f,%.10f", v.psnr, v.ssim);
        os << v.name << ',' << buf << '\n';
    }
    std::snprintf(buf, sizeof buf, "%.10f,%.10f", r.mean_psnr, r.mean_ssim);
    os << "mean," << buf << '\n';
}

inline void write_eval_table(std::ostream& os, const EvalReport& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-24s %12s %10s\n", "view", "PSNR [dB]", "SSIM");
    os << buf;
    for (const auto& v : r.views) {
        if (std::isinf(v.psnr)) std::snprintf(buf, sizeof buf, "%-24s %12s %10.4f\n", v.name.c_str(), "identical", v.ssim);
        else std::snprintf(buf, sizeof buf, "%-24s %12.3f %10.4f\n", v.name.c_str(), v.psnr, v.ssim);
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "%-24s %12.3f %10.4f\n", "mean", r.mean_psnr, r.mean_ssim);
    os << buf;
    std::snprintf(buf, sizeof buf, "%zu views, %zu identical (excluded from mean PSNR)\n", r.view_count(), r.n_identical);
    os << buf;
}

}  // namespace evgs
