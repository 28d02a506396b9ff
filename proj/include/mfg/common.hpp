#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfg {

/// Thrown on malformed inputs: bad arguments, broken invariants, unparsable files.
struct validation_error : std::runtime_error {
    explicit validation_error(const std::string& what) : std::runtime_error(what) {}
};

/// Thrown when an iterative method fails to reach its tolerance and cannot
/// return a usable best-effort result.
struct solver_error : std::runtime_error {
    explicit solver_error(const std::string& what) : std::runtime_error(what) {}
};

/// Thrown on filesystem / stream failures.
struct io_error : std::runtime_error {
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw validation_error(msg);
}

// ---------------------------------------------------------------------------
// Small dense-vector helpers. Points live in R^d with d small; they are stored
// flat (row-major) inside the bigger containers and touched through raw
// pointers in hot loops.
// ---------------------------------------------------------------------------

inline double dot(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += a[i] * b[i];
    return s;
}

inline double norm2_sq(const double* a, int d) { return dot(a, a, d); }

inline double norm2(const double* a, int d) { return std::sqrt(norm2_sq(a, d)); }

inline double dist2(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
        double t = a[i] - b[i];
        s += t * t;
    }
    return std::sqrt(s);
}

inline double sup_dist(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s = std::max(s, std::abs(a[i] - b[i]));
    return s;
}

inline bool all_finite(const double* a, int d) {
    for (int i = 0; i < d; ++i)
        if (!std::isfinite(a[i])) return false;
    return true;
}

/// Axis-aligned box in R^d.
struct Box {
    std::vector<double> lo;
    std::vector<double> hi;

    Box() = default;
    Box(std::vector<double> l, std::vector<double> h) : lo(std::move(l)), hi(std::move(h)) {
        require(lo.size() == hi.size() && !lo.empty(), "Box: corner dimension mismatch");
        for (size_t i = 0; i < lo.size(); ++i)
            require(lo[i] <= hi[i] && std::isfinite(lo[i]) && std::isfinite(hi[i]),
                    "Box: lo must be <= hi and finite");
    }

    int dim() const { return static_cast<int>(lo.size()); }

    bool contains(const double* x, double slack = 0.0) const {
        for (int i = 0; i < dim(); ++i)
            if (x[i] < lo[i] - slack || x[i] > hi[i] + slack) return false;
        return true;
    }

    void clamp(double* x) const {
        for (int i = 0; i < dim(); ++i) x[i] = std::clamp(x[i], lo[i], hi[i]);
    }

    Box inflated(double pad) const {
        Box b = *this;
        for (int i = 0; i < dim(); ++i) {
            b.lo[i] -= pad;
            b.hi[i] += pad;
        }
        return b;
    }

    double width(int axis) const { return hi[axis] - lo[axis]; }

    double max_width() const {
        double w = 0.0;
        for (int i = 0; i < dim(); ++i) w = std::max(w, width(i));
        return w;
    }
};

// ---------------------------------------------------------------------------
// Deterministic number formatting for CSV output. Shortest round-trip form,
// locale-independent, so byte-identical reports are reproducible.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

inline double parse_double(const std::string& s) {
    const char* b = s.data();
    const char* e = s.data() + s.size();
    while (b < e && (*b == ' ' || *b == '\t')) ++b;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc{}) throw validation_error("not a number: '" + s + "'");
    return v;
}

inline long parse_long(const std::string& s) {
    const char* b = s.data();
    const char* e = s.data() + s.size();
    while (b < e && (*b == ' ' || *b == '\t')) ++b;
    long v = 0;
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc{}) throw validation_error("not an integer: '" + s + "'");
    return v;
}

}  // namespace mfg
