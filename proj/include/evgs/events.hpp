#pragma once

#include <algorithm>
#include <climits>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "evgs/binary_io.hpp"
#include "evgs/common.hpp"

namespace evgs {

struct Event {
    std::int64_t t_us = 0;
    std::uint16_t x = 0;
    std::uint16_t y = 0;
    std::int8_t p = 1;  ///< +1 brighter, -1 darker

    bool operator==(const Event&) const = default;
};

inline bool event_order(const Event& a, const Event& b) {
    return std::tie(a.t_us, a.y, a.x, a.p) < std::tie(b.t_us, b.y, b.x, b.p);
}

struct EventStream {
    int width = 0;
    int height = 0;
    double threshold = 0.0;  ///< contrast threshold A used at generation
    std::vector<Event> events;

    void validate() const {
        if (width <= 0 || height <= 0 || width > 65535 || height > 65535)
            throw InvalidParameter("event stream: sensor size out of range");
        for (std::size_t i = 0; i < events.size(); ++i) {
            const Event& e = events[i];
            if (e.x >= width || e.y >= height)
                throw InvalidParameter("event " + std::to_string(i) + " out of bounds");
            if (e.p != 1 && e.p != -1) throw InvalidParameter("event " + std::to_string(i) + " has invalid polarity");
            if (i > 0 && e.t_us < events[i - 1].t_us) throw InvalidParameter("event timestamps decrease at " + std::to_string(i));
        }
    }
    bool operator==(const EventStream&) const = default;
};

/// Summed polarities over the half-open window (t_start, t_end].
struct EventFrame {
    Grid<std::int32_t> counts;
    std::int64_t t_start = 0;
    std::int64_t t_end = 0;
    bool operator==(const EventFrame&) const = default;
};

// ---------------------------------------------------------------------------
// Simulation

/// log(I^g + eps), elementwise. Shared with the loss.
inline Image log_gamma(const Image& img, double gamma, double eps) {
    if (!(gamma > 0) || !(eps > 0)) throw InvalidParameter("log_gamma: gamma and eps must be positive");
    Image out(img.width, img.height);
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = img.data[i];
        if (!(v >= 0.0)) throw InvalidParameter("log_gamma: negative or NaN pixel");
        out.data[i] = std::log(std::pow(v, gamma) + eps);
    }
    return out;
}

/// Idealised event camera on log-brightness frames. Between consecutive
/// frames each pixel's log brightness is linearly interpolated; every crossing
/// of reference +/- threshold emits one event at the crossing time (rounded
/// to the microsecond) and moves the reference by one threshold.
inline EventStream simulate_events_log(const std::vector<Image>& log_frames, const std::vector<std::int64_t>& timestamps,
                                       double threshold) {
    if (log_frames.size() < 2) throw InvalidParameter("simulate_events: need at least 2 frames");
    if (timestamps.size() != log_frames.size()) throw InvalidParameter("simulate_events: one timestamp per frame required");
    if (!(threshold > 0) || !std::isfinite(threshold)) throw InvalidParameter("simulate_events: threshold must be positive");
    const int w = log_frames[0].width, h = log_frames[0].height;
    if (w <= 0 || h <= 0 || w > 65535 || h > 65535) throw InvalidParameter("simulate_events: bad frame size");
    for (std::size_t f = 0; f < log_frames.size(); ++f) {
        if (log_frames[f].width != w || log_frames[f].height != h)
            throw InvalidParameter("simulate_events: frame " + std::to_string(f) + " has a different shape");
        if (f > 0 && timestamps[f] <= timestamps[f - 1])
            throw InvalidParameter("simulate_events: timestamps must be strictly increasing");
        if (!all_finite_grid(log_frames[f])) throw InvalidParameter("simulate_events: non-finite log brightness");
    }

    EventStream out;
    out.width = w;
    out.height = h;
    out.threshold = threshold;
    std::vector<double> ref(log_frames[0].data);
    for (std::size_t f = 0; f + 1 < log_frames.size(); ++f) {
        const Image& a = log_frames[f];
        const Image& b = log_frames[f + 1];
        const double t0 = static_cast<double>(timestamps[f]);
        const double dt = static_cast<double>(timestamps[f + 1] - timestamps[f]);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                const double la = a.data[i], lb = b.data[i];
                if (la == lb) continue;
                const double slope = lb - la;
                double& r = ref[i];
                if (lb > la) {
                    while (lb >= r + threshold) {
                        r += threshold;
                        const double u = std::clamp((r - la) / slope, 0.0, 1.0);
                        out.events.push_back({std::llround(t0 + u * dt), static_cast<std::uint16_t>(x),
                                              static_cast<std::uint16_t>(y), 1});
                    }
                } else {
                    while (lb <= r - threshold) {
                        r -= threshold;
                        const double u = std::clamp((r - la) / slope, 0.0, 1.0);
                        out.events.push_back({std::llround(t0 + u * dt), static_cast<std::uint16_t>(x),
                                              static_cast<std::uint16_t>(y), -1});
                    }
                }
            }
    }
    std::sort(out.events.begin(), out.events.end(), event_order);
    return out;
}

inline EventStream simulate_events(const std::vector<Image>& frames, const std::vector<std::int64_t>& timestamps,
                                   double threshold, double gamma, double eps) {
    std::vector<Image> logs;
    logs.reserve(frames.size());
    for (const Image& f : frames) logs.push_back(log_gamma(f, gamma, eps));
    return simulate_events_log(logs, timestamps, threshold);
}

// ---------------------------------------------------------------------------
// Accumulation and windows

/// Per-pixel polarity sum over events with t_start < t <= t_end.
inline EventFrame accumulate(const EventStream& stream, std::int64_t t_start, std::int64_t t_end, int width, int height) {
    if (!(t_start < t_end)) throw InvalidParameter("accumulate: t_start must be < t_end");
    if (width <= 0 || height <= 0) throw InvalidParameter("accumulate: bad frame size");
    EventFrame f;
    f.counts = Grid<std::int32_t>(width, height, 0);
    f.t_start = t_start;
    f.t_end = t_end;
    const auto& ev = stream.events;
    auto lo = std::upper_bound(ev.begin(), ev.end(), t_start, [](std::int64_t t, const Event& e) { return t < e.t_us; });
    auto hi = std::upper_bound(lo, ev.end(), t_end, [](std::int64_t t, const Event& e) { return t < e.t_us; });
    for (auto it = lo; it != hi; ++it) {
        if (it->x >= width || it->y >= height) throw InvalidParameter("accumulate: event outside frame");
        f.counts(it->x, it->y) += it->p;
    }
    return f;
}

/// Window length in frames, uniform on [1, min(max_window, t_index)].
template <class Rng>
int sample_window(std::size_t t_index, int max_window, Rng& rng) {
    if (t_index == 0) throw InvalidParameter("sample_window: no valid window before the first frame");
    if (max_window < 1) throw InvalidParameter("sample_window: max window must be >= 1");
    const int hi = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(max_window), t_index));
    std::uniform_int_distribution<int> dist(1, hi);
    return dist(rng);
}

// ---------------------------------------------------------------------------
// Binary file layout (little-endian):
//   header: "EVGSEVT\0" | u32 version=1 | u32 width | u32 height | f64 threshold | u64 count
//   record: u64 t_us | u16 x | u16 y | i8 p | u8 pad(0)         (14 bytes)
// CSV layout: header line "t_us,x,y,p", optional "# width=W height=H threshold=A"
// comment first, then one event per line.

inline constexpr char kEventMagic[9] = {'E', 'V', 'G', 'S', 'E', 'V', 'T', '\0', '\0'};
inline constexpr std::uint32_t kEventVersion = 1;

inline void write_events(std::ostream& os, const EventStream& s) {
    s.validate();
    bin::put_magic(os, kEventMagic);
    bin::put<std::uint32_t>(os, kEventVersion);
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.width));
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.height));
    bin::put<double>(os, s.threshold);
    bin::put<std::uint64_t>(os, s.events.size());
    for (const Event& e : s.events) {
        bin::put<std::uint64_t>(os, static_cast<std::uint64_t>(e.t_us));
        bin::put<std::uint16_t>(os, e.x);
        bin::put<std::uint16_t>(os, e.y);
        bin::put<std::int8_t>(os, e.p);
        bin::put<std::uint8_t>(os, 0);
    }
}

inline EventStream read_events(std::istream& is) {
    bin::expect_magic(is, kEventMagic, "event");
    const auto version = bin::get<std::uint32_t>(is, "version");
    if (version != kEventVersion) throw ParseError("unsupported event file version " + std::to_string(version), -1);
    EventStream s;
    s.width = static_cast<int>(bin::get<std::uint32_t>(is, "width"));
    s.height = static_cast<int>(bin::get<std::uint32_t>(is, "height"));
    s.threshold = bin::get<double>(is, "threshold");
    if (s.width <= 0 || s.height <= 0 || s.width > 65535 || s.height > 65535)
        throw ParseError("event header: sensor size out of range", -1);
    const auto count = bin::get<std::uint64_t>(is, "count");
    s.events.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, 1u << 26)));
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto rec = static_cast<std::int64_t>(i);
        Event e;
        const auto t = bin::get<std::uint64_t>(is, "t", rec);
        e.x = bin::get<std::uint16_t>(is, "x", rec);
        e.y = bin::get<std::uint16_t>(is, "y", rec);
        e.p = bin::get<std::int8_t>(is, "p", rec);
        const auto pad = bin::get<std::uint8_t>(is, "pad", rec);
        if (t > static_cast<std::uint64_t>(INT64_MAX)) throw ParseError("timestamp overflow", rec);
        e.t_us = static_cast<std::int64_t>(t);
        if (pad != 0) throw ParseError("non-zero pad byte", rec);
        if (e.p != 1 && e.p != -1) throw ParseError("polarity must be +1 or -1", rec);
        if (e.x >= s.width || e.y >= s.height) throw ParseError("coordinates out of bounds", rec);
        if (!s.events.empty() && e.t_us < s.events.back().t_us) throw ParseError("timestamps decrease", rec);
        s.events.push_back(e);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes after last record", -1);
    return s;
}

inline void write_events_csv(std::ostream& os, const EventStream& s) {
    s.validate();
    std::ostringstream th;
    th.precision(17);
    th << s.threshold;
    os << "# width=" << s.width << " height=" << s.height << " threshold=" << th.str() << '\n';
    os << "t_us,x,y,p\n";
    for (const Event& e : s.events) os << e.t_us << ',' << e.x << ',' << e.y << ',' << static_cast<int>(e.p) << '\n';
}

inline EventStream read_events_csv(std::istream& is) {
    EventStream s;
    std::string line;
    bool header = false;
    std::int64_t rec = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (std::sscanf(line.c_str(), "# width=%d height=%d threshold=%lf", &s.width, &s.height, &s.threshold) != 3)
                throw ParseError("malformed CSV metadata line", -1);
            continue;
        }
        if (!header) {
            if (line != "t_us,x,y,p") throw ParseError("missing CSV header t_us,x,y,p", -1);
            header = true;
            continue;
        }
        long long t;
        int x, y, p;
        char tail;
        if (std::sscanf(line.c_str(), "%lld,%d,%d,%d%c", &t, &x, &y, &p, &tail) != 4) throw ParseError("malformed CSV record", rec);
        if (p != 1 && p != -1) throw ParseError("polarity must be +1 or -1", rec);
        if (x < 0 || y < 0 || x >= s.width || y >= s.height) throw ParseError("coordinates out of bounds", rec);
        if (t < 0) throw ParseError("negative timestamp", rec);
        if (!s.events.empty() && t < s.events.back().t_us) throw ParseError("timestamps decrease", rec);
        s.events.push_back({t, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), static_cast<std::int8_t>(p)});
        ++rec;
    }
    if (!header) throw ParseError("missing CSV header t_us,x,y,p", -1);
    if (s.width <= 0 || s.height <= 0) throw ParseError("missing sensor size metadata", -1);
    return s;
}

inline bool has_suffix(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

/// Format chosen by extension: ".csv" is text, anything else binary.
inline void save_events(const std::string& path, const EventStream& s) {
    const bool csv = has_suffix(path, ".csv");
    std::ofstream os(path, csv ? std::ios::trunc : std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    if (csv) write_events_csv(os, s);
    else write_events(os, s);
    if (!os) throw IoError("write failed: " + path);
}

inline EventStream load_events(const std::string& path) {
    const bool csv = has_suffix(path, ".csv");
    std::ifstream is(path, csv ? std::ios::in : std::ios::binary);
    if (!is) throw IoError("cannot open event file " + path);
    return csv ? read_events_csv(is) : read_events(is);
}

}  // namespace evgs
