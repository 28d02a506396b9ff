#pragma once

#include <cmath>
#include <vector>

#include "mfg/common.hpp"

namespace mfg {

/// Uniform time grid t_0 = 0 < t_1 < ... < t_{n_t} = T.
///
/// A single-step grid (n_t = 1) is valid: it is the one-shot game with a
/// straight-line strategy, and several degenerate tests exercise it.
class TimeGrid {
public:
    TimeGrid() = default;

    TimeGrid(double horizon, int steps) : horizon_(horizon), steps_(steps) {
        require(horizon > 0.0 && std::isfinite(horizon), "TimeGrid: horizon must be > 0");
        require(steps >= 1, "TimeGrid: need at least one step");
    }

    /// Reconstruct from explicit node times (e.g. parsed from a CSV). The
    /// nodes must be strictly increasing and uniformly spaced to within 1e-12
    /// relative tolerance.
    static TimeGrid from_nodes(const std::vector<double>& nodes) {
        require(nodes.size() >= 2, "TimeGrid: need at least two node times");
        require(std::abs(nodes.front()) <= 1e-12 * std::max(1.0, std::abs(nodes.back())),
                "TimeGrid: first node must be t=0");
        double T = nodes.back();
        int n = static_cast<int>(nodes.size()) - 1;
        TimeGrid g(T, n);
        double dt = T / n;
        for (int k = 0; k <= n; ++k) {
            require(k == 0 || nodes[k] > nodes[k - 1], "TimeGrid: nodes must increase");
            require(std::abs(nodes[k] - g.node(k)) <= 1e-12 * std::max(1.0, T) + 1e-15,
                    "TimeGrid: nodes are not uniformly spaced");
        }
        (void)dt;
        return g;
    }

    double horizon() const { return horizon_; }
    int steps() const { return steps_; }
    int nodes() const { return steps_ + 1; }
    double dt() const { return horizon_ / steps_; }
    double node(int k) const { return horizon_ * k / steps_; }

    bool same_as(const TimeGrid& o) const {
        return steps_ == o.steps_ &&
               std::abs(horizon_ - o.horizon_) <= 1e-12 * std::max(horizon_, o.horizon_);
    }

    /// Locate time t in [0, T]: returns (k, theta) with t = (1-theta)*t_k + theta*t_{k+1},
    /// k in [0, n_t-1], theta in [0, 1]. Throws if t is outside [0, T].
    std::pair<int, double> locate(double t) const {
        double tol = 1e-12 * std::max(1.0, horizon_);
        require(t >= -tol && t <= horizon_ + tol, "time outside [0, T]");
        t = std::clamp(t, 0.0, horizon_);
        double s = t / dt();
        int k = std::min(static_cast<int>(std::floor(s)), steps_ - 1);
        return {k, s - k};
    }

private:
    double horizon_ = 1.0;
    int steps_ = 1;
};

}  // namespace mfg
