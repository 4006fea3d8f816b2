#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace evgs {

/// Raised when a caller violates an operation's preconditions.
class InvalidParameter : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a lookup falls outside the valid domain (time span, index).
class OutOfRange : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Raised by readers on malformed input. `record()` is the zero-based index
/// of the offending record, or -1 for header-level problems.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::int64_t record)
        : std::runtime_error(record >= 0 ? what + " (record " + std::to_string(record) + ")" : what),
          record_(record) {}

    std::int64_t record() const noexcept { return record_; }

private:
    std::int64_t record_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Row-major 2D grid. Used for images, gradient buffers and event frames.
template <class T>
struct Grid {
    int width = 0;
    int height = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {
        if (w < 0 || h < 0) throw InvalidParameter("grid dimensions must be non-negative");
    }

    T& operator()(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    const T& operator()(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Grid& o) const { return width == o.width && height == o.height; }
    bool operator==(const Grid&) const = default;
};

using Image = Grid<double>;

template <class T>
bool all_finite_grid(const Grid<T>& g) {
    for (const T& v : g.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <class A, class B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
    if (a.width != b.width || a.height != b.height)
        throw InvalidParameter(std::string(what) + ": shape mismatch (" + std::to_string(a.width) + "x" +
                               std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                               std::to_string(b.height) + ")");
}

/// Worker count: EVGS_NUM_THREADS if set, else hardware concurrency.
inline int thread_count() {
    if (const char* env = std::getenv("EVGS_NUM_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

/// Runs fn(i) for i in [0, n) split into contiguous chunks across workers.
/// Callers must write only to slots owned by index i for results to be
/// independent of the worker count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, int workers = thread_count()) {
    workers = std::max(1, std::min<int>(workers, static_cast<int>(n)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        std::size_t begin = w * chunk;
        std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end] {
            for (std::size_t i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

/// splitmix64 finaliser; used to derive independent RNG seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(const char* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace evgs
