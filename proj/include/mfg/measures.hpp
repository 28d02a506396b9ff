#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/rng.hpp"
#include "mfg/time_grid.hpp"

namespace mfg {

constexpr double kWeightTol = 1e-12;

// ---------------------------------------------------------------------------
// Trajectory: a discretized path on a uniform time grid, stored as one point
// per node (flat, row-major). Paths are piecewise linear between nodes, so
// velocities are piecewise constant and W^{1,2} membership is automatic.
// ---------------------------------------------------------------------------

class Trajectory {
public:
    Trajectory() = default;

    Trajectory(TimeGrid grid, int dim)
        : grid_(grid), dim_(dim), pos_(static_cast<size_t>(grid.nodes()) * dim, 0.0) {
        require(dim >= 1, "Trajectory: dim must be >= 1");
    }

    Trajectory(TimeGrid grid, int dim, std::vector<double> positions)
        : grid_(grid), dim_(dim), pos_(std::move(positions)) {
        require(dim >= 1, "Trajectory: dim must be >= 1");
        require(pos_.size() == static_cast<size_t>(grid.nodes()) * dim,
                "Trajectory: positions length must be (n_t+1)*dim");
        for (double v : pos_) require(std::isfinite(v), "Trajectory: non-finite coordinate");
    }

    const TimeGrid& grid() const { return grid_; }
    int dim() const { return dim_; }

    const double* point(int k) const { return pos_.data() + static_cast<size_t>(k) * dim_; }
    double* point(int k) { return pos_.data() + static_cast<size_t>(k) * dim_; }
    const std::vector<double>& data() const { return pos_; }
    std::vector<double>& data() { return pos_; }

    /// Position at an arbitrary time, linearly interpolated between nodes.
    std::vector<double> at(double t) const {
        auto [k, th] = grid_.locate(t);
        std::vector<double> out(dim_);
        const double* a = point(k);
        const double* b = point(k + 1);
        for (int i = 0; i < dim_; ++i) out[i] = (1.0 - th) * a[i] + th * b[i];
        return out;
    }

    double sup_distance(const Trajectory& o) const {
        require(dim_ == o.dim_ && grid_.same_as(o.grid_), "Trajectory: grid mismatch");
        double s = 0.0;
        for (size_t i = 0; i < pos_.size(); ++i) s = std::max(s, std::abs(pos_[i] - o.pos_[i]));
        return s;
    }

private:
    TimeGrid grid_;
    int dim_ = 1;
    std::vector<double> pos_;
};

/// Constant-in-time path sitting at x.
inline Trajectory constant_trajectory(const TimeGrid& grid, const std::vector<double>& x) {
    Trajectory tr(grid, static_cast<int>(x.size()));
    for (int k = 0; k < grid.nodes(); ++k)
        std::copy(x.begin(), x.end(), tr.point(k));
    return tr;
}

/// Forward-difference velocities (gamma_{k+1} - gamma_k)/dt, one vector per
/// interval; this is the exact derivative of the piecewise-linear path.
inline std::vector<double> velocities(const Trajectory& tr) {
    int d = tr.dim();
    int n = tr.grid().steps();
    double inv_dt = 1.0 / tr.grid().dt();
    std::vector<double> v(static_cast<size_t>(n) * d);
    for (int k = 0; k < n; ++k) {
        const double* a = tr.point(k);
        const double* b = tr.point(k + 1);
        for (int i = 0; i < d; ++i) v[static_cast<size_t>(k) * d + i] = (b[i] - a[i]) * inv_dt;
    }
    return v;
}

// ---------------------------------------------------------------------------
// ParticleMeasure: weighted point cloud in R^d (an element of P_1(R^d)).
// ---------------------------------------------------------------------------

class ParticleMeasure {
public:
    ParticleMeasure() = default;

    ParticleMeasure(int dim, std::vector<double> points, std::vector<double> weights)
        : dim_(dim), points_(std::move(points)), weights_(std::move(weights)) {
        require(dim >= 1, "ParticleMeasure: dim must be >= 1");
        require(points_.size() == weights_.size() * dim,
                "ParticleMeasure: points/weights length mismatch");
        validate();
    }

    static ParticleMeasure dirac(std::vector<double> x) {
        int d = static_cast<int>(x.size());
        return ParticleMeasure(d, std::move(x), {1.0});
    }

    int dim() const { return dim_; }
    int size() const { return static_cast<int>(weights_.size()); }
    const double* point(int i) const { return points_.data() + static_cast<size_t>(i) * dim_; }
    double* point(int i) { return points_.data() + static_cast<size_t>(i) * dim_; }
    double weight(int i) const { return weights_[i]; }
    const std::vector<double>& points() const { return points_; }
    const std::vector<double>& weights() const { return weights_; }

    void validate() const {
        double s = 0.0;
        for (double w : weights_) {
            require(w >= 0.0 && std::isfinite(w), "ParticleMeasure: weights must be >= 0");
            s += w;
        }
        require(std::abs(s - 1.0) <= kWeightTol, "ParticleMeasure: weights must sum to 1, got " +
                                                     format_double(s));
        for (double p : points_) require(std::isfinite(p), "ParticleMeasure: non-finite point");
    }

    std::vector<double> mean() const {
        std::vector<double> m(dim_, 0.0);
        for (int i = 0; i < size(); ++i) {
            const double* p = point(i);
            for (int k = 0; k < dim_; ++k) m[k] += weights_[i] * p[k];
        }
        return m;
    }

private:
    int dim_ = 1;
    std::vector<double> points_;
    std::vector<double> weights_;
};

// ---------------------------------------------------------------------------
// PathMeasure: weighted collection of (initial point, trajectory) pairs, the
// particle form of a randomized distributed open-loop strategy. The
// disintegration over the initial law is explicit: particles are keyed on
// their initial point, and path.point(0) equals `initial` exactly.
// ---------------------------------------------------------------------------

struct PathParticle {
    std::vector<double> initial;
    Trajectory path;
    double weight = 0.0;
};

class PathMeasure {
public:
    PathMeasure() = default;

    PathMeasure(TimeGrid grid, int dim, std::vector<PathParticle> particles)
        : grid_(grid), dim_(dim), particles_(std::move(particles)) {
        validate();
    }

    const TimeGrid& grid() const { return grid_; }
    int dim() const { return dim_; }
    int size() const { return static_cast<int>(particles_.size()); }
    const PathParticle& particle(int i) const { return particles_[i]; }
    const std::vector<PathParticle>& particles() const { return particles_; }

    void validate() const {
        require(!particles_.empty(), "PathMeasure: needs at least one particle");
        double s = 0.0;
        for (const auto& p : particles_) {
            require(p.weight >= 0.0, "PathMeasure: weights must be >= 0");
            s += p.weight;
            require(static_cast<int>(p.initial.size()) == dim_, "PathMeasure: initial dim mismatch");
            require(p.path.dim() == dim_, "PathMeasure: path dim mismatch");
            require(p.path.grid().same_as(grid_), "PathMeasure: all particles must share one grid");
            const double* x0 = p.path.point(0);
            for (int i = 0; i < dim_; ++i)
                require(x0[i] == p.initial[i], "PathMeasure: path must start at `initial` exactly");
        }
        require(std::abs(s - 1.0) <= kWeightTol, "PathMeasure: weights must sum to 1");
    }

private:
    TimeGrid grid_;
    int dim_ = 1;
    std::vector<PathParticle> particles_;
};

// ---------------------------------------------------------------------------
// MarginalFlow: time-indexed weighted point clouds rho(t) = e_t # m.
// ---------------------------------------------------------------------------

class MarginalFlow {
public:
    MarginalFlow() = default;

    MarginalFlow(TimeGrid grid, int dim, std::vector<ParticleMeasure> slices)
        : grid_(grid), dim_(dim), slices_(std::move(slices)) {
        require(static_cast<int>(slices_.size()) == grid.nodes(),
                "MarginalFlow: one slice per time node required");
        for (const auto& s : slices_) {
            require(s.dim() == dim_, "MarginalFlow: slice dim mismatch");
            s.validate();
        }
    }

    const TimeGrid& grid() const { return grid_; }
    int dim() const { return dim_; }
    const ParticleMeasure& slice(int k) const { return slices_[k]; }
    int slices() const { return static_cast<int>(slices_.size()); }

private:
    TimeGrid grid_;
    int dim_ = 1;
    std::vector<ParticleMeasure> slices_;
};

/// Evaluation map e_t: returns {gamma_i(t), w_i}. Off-node times use linear
/// interpolation, consistent with piecewise-linear paths.
inline ParticleMeasure evaluate_at(const PathMeasure& m, double t) {
    int d = m.dim();
    std::vector<double> pts(static_cast<size_t>(m.size()) * d);
    std::vector<double> w(m.size());
    auto [k, th] = m.grid().locate(t);
    for (int i = 0; i < m.size(); ++i) {
        const auto& p = m.particle(i);
        const double* a = p.path.point(k);
        const double* b = p.path.point(k + 1);
        for (int j = 0; j < d; ++j)
            pts[static_cast<size_t>(i) * d + j] = (1.0 - th) * a[j] + th * b[j];
        w[i] = p.weight;
    }
    return ParticleMeasure(d, std::move(pts), std::move(w));
}

/// Pushforward rho(t_k) = e_{t_k} # m for every node; weights carried unchanged.
inline MarginalFlow pushforward_marginals(const PathMeasure& m) {
    int d = m.dim();
    std::vector<ParticleMeasure> slices;
    slices.reserve(m.grid().nodes());
    for (int k = 0; k < m.grid().nodes(); ++k) {
        std::vector<double> pts(static_cast<size_t>(m.size()) * d);
        std::vector<double> w(m.size());
        for (int i = 0; i < m.size(); ++i) {
            const auto& p = m.particle(i);
            std::copy(p.path.point(k), p.path.point(k) + d, pts.begin() + static_cast<size_t>(i) * d);
            w[i] = p.weight;
        }
        slices.emplace_back(d, std::move(pts), std::move(w));
    }
    return MarginalFlow(m.grid(), d, std::move(slices));
}

// ---------------------------------------------------------------------------
// InitialLaw: the initial distribution m_0 with compact support. Analytic
// kinds are product measures (per-axis densities); `weighted-samples` carries
// explicit atoms so that the N-player and limit solvers can share identical
// initial particles.
// ---------------------------------------------------------------------------

class InitialLaw {
public:
    enum class Kind { UniformBox, TruncatedGaussian, WeightedSamples };

    static InitialLaw uniform_box(Box box) {
        InitialLaw law;
        law.kind_ = Kind::UniformBox;
        law.box_ = std::move(box);
        return law;
    }

    static InitialLaw truncated_gaussian(std::vector<double> mean, std::vector<double> stddev,
                                         Box truncation) {
        InitialLaw law;
        law.kind_ = Kind::TruncatedGaussian;
        require(mean.size() == stddev.size() &&
                    static_cast<int>(mean.size()) == truncation.dim(),
                "InitialLaw: mean/stddev/box dimension mismatch");
        for (double s : stddev) require(s > 0.0, "InitialLaw: stddev must be > 0");
        law.mean_ = std::move(mean);
        law.stddev_ = std::move(stddev);
        law.box_ = std::move(truncation);
        return law;
    }

    static InitialLaw weighted_samples(ParticleMeasure atoms) {
        InitialLaw law;
        law.kind_ = Kind::WeightedSamples;
        int d = atoms.dim();
        std::vector<double> lo(d, std::numeric_limits<double>::infinity());
        std::vector<double> hi(d, -std::numeric_limits<double>::infinity());
        for (int i = 0; i < atoms.size(); ++i)
            for (int k = 0; k < d; ++k) {
                lo[k] = std::min(lo[k], atoms.point(i)[k]);
                hi[k] = std::max(hi[k], atoms.point(i)[k]);
            }
        law.box_ = Box(std::move(lo), std::move(hi));
        law.atoms_ = std::move(atoms);
        return law;
    }

    Kind kind() const { return kind_; }
    int dim() const { return box_.dim(); }
    const Box& support_box() const { return box_; }
    bool analytic() const { return kind_ != Kind::WeightedSamples; }
    const ParticleMeasure& stored_atoms() const {
        require(kind_ == Kind::WeightedSamples, "InitialLaw: no stored atoms for analytic kind");
        return atoms_;
    }

    /// Density of the law at x (analytic kinds only; zero outside the box).
    double density(const double* x) const {
        require(analytic(), "InitialLaw: density undefined for weighted-samples kind");
        if (!box_.contains(x)) return 0.0;
        double v = 1.0;
        for (int i = 0; i < dim(); ++i) {
            if (kind_ == Kind::UniformBox) {
                v /= box_.width(i);
            } else {
                double a = (box_.lo[i] - mean_[i]) / stddev_[i];
                double b = (box_.hi[i] - mean_[i]) / stddev_[i];
                double z = normal_cdf(b) - normal_cdf(a);
                double t = (x[i] - mean_[i]) / stddev_[i];
                v *= normal_pdf(t) / (stddev_[i] * z);
            }
        }
        return v;
    }

    /// Quadrature check that the density integrates to 1 (per axis; the law is
    /// a product measure). Simpson rule with 2^12 panels per axis.
    void validate() const {
        if (!analytic()) {
            atoms_.validate();
            return;
        }
        for (int i = 0; i < dim(); ++i) {
            double mass = axis_mass(i);
            require(std::abs(mass - 1.0) <= 1e-6,
                    "InitialLaw: density mass on axis " + std::to_string(i) + " is " +
                        format_double(mass));
        }
    }

    /// Deterministic i.i.d. samples, all inside the support box. For the
    /// weighted-samples kind the stored points are returned and n must match.
    std::vector<double> sample(int n, uint64_t seed) const {
        require(n >= 1, "InitialLaw: n must be >= 1");
        int d = dim();
        if (kind_ == Kind::WeightedSamples) {
            require(n == atoms_.size(),
                    "InitialLaw: weighted-samples kind stores " + std::to_string(atoms_.size()) +
                        " points; requested " + std::to_string(n) + " (no resampling)");
            return atoms_.points();
        }
        std::vector<double> out(static_cast<size_t>(n) * d);
        Rng rng(seed, {0x5a3d1eULL});
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < d; ++k)
                out[static_cast<size_t>(i) * d + k] = sample_axis(k, rng.unit());
        return out;
    }

    /// Deterministic quantile-grid particles: n equal-mass cells per axis in
    /// 1D with density-weighted centers; for d > 1 a tensor grid on a product
    /// approximation, which requires n to be a perfect d-th power. Weights are
    /// uniformly 1/n.
    ParticleMeasure quadrature(int n) const {
        require(analytic(), "InitialLaw: quadrature unsupported for weighted-samples kind");
        require(n >= 1, "InitialLaw: n must be >= 1");
        int d = dim();
        int per_axis = n;
        if (d > 1) {
            per_axis = static_cast<int>(std::llround(std::pow(double(n), 1.0 / d)));
            bool ok = false;
            for (int k : {per_axis - 1, per_axis, per_axis + 1}) {
                if (k >= 1 && std::llround(std::pow(double(k), d)) == n) {
                    per_axis = k;
                    ok = true;
                    break;
                }
            }
            require(ok, "InitialLaw: quadrature in d>1 needs n to be a perfect d-th power");
        }
        std::vector<std::vector<double>> axis_pts(d);
        for (int i = 0; i < d; ++i) {
            axis_pts[i].resize(per_axis);
            for (int c = 0; c < per_axis; ++c)
                axis_pts[i][c] = cell_centroid(i, double(c) / per_axis, double(c + 1) / per_axis);
        }
        std::vector<double> pts(static_cast<size_t>(n) * d);
        std::vector<int> idx(d, 0);
        for (int i = 0; i < n; ++i) {
            for (int k = 0; k < d; ++k) pts[static_cast<size_t>(i) * d + k] = axis_pts[k][idx[k]];
            for (int k = d - 1; k >= 0; --k) {
                if (++idx[k] < per_axis) break;
                idx[k] = 0;
            }
        }
        std::vector<double> w(n, 1.0 / n);
        return ParticleMeasure(d, std::move(pts), std::move(w));
    }

private:
    double axis_mass(int axis) const {
        const int panels = 4096;
        double a = box_.lo[axis], b = box_.hi[axis];
        double h = (b - a) / panels;
        double s = axis_density(axis, a) + axis_density(axis, b);
        for (int j = 1; j < panels; ++j)
            s += axis_density(axis, a + j * h) * (j % 2 ? 4.0 : 2.0);
        return s * h / 3.0;
    }

    double axis_density(int axis, double x) const {
        if (kind_ == Kind::UniformBox) return 1.0 / box_.width(axis);
        double aa = (box_.lo[axis] - mean_[axis]) / stddev_[axis];
        double bb = (box_.hi[axis] - mean_[axis]) / stddev_[axis];
        double z = normal_cdf(bb) - normal_cdf(aa);
        double t = (x - mean_[axis]) / stddev_[axis];
        return normal_pdf(t) / (stddev_[axis] * z);
    }

    /// Inverse-CDF sample on one axis from a uniform draw u in [0,1).
    double sample_axis(int axis, double u) const {
        if (kind_ == Kind::UniformBox)
            return box_.lo[axis] + u * box_.width(axis);
        double a = (box_.lo[axis] - mean_[axis]) / stddev_[axis];
        double b = (box_.hi[axis] - mean_[axis]) / stddev_[axis];
        double Fa = normal_cdf(a), Fb = normal_cdf(b);
        double p = Fa + u * (Fb - Fa);
        p = std::clamp(p, std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0));
        double x = mean_[axis] + stddev_[axis] * normal_quantile(p);
        return std::clamp(x, box_.lo[axis], box_.hi[axis]);
    }

    /// Centroid (conditional mean) of the axis cell between mass quantiles p0 < p1.
    double cell_centroid(int axis, double p0, double p1) const {
        if (kind_ == Kind::UniformBox) {
            double mid = 0.5 * (p0 + p1);
            return box_.lo[axis] + mid * box_.width(axis);
        }
        double a = (box_.lo[axis] - mean_[axis]) / stddev_[axis];
        double b = (box_.hi[axis] - mean_[axis]) / stddev_[axis];
        double Fa = normal_cdf(a), Fb = normal_cdf(b);
        double z = Fb - Fa;
        double alpha = (p0 <= 0.0) ? a : normal_quantile(Fa + p0 * z);
        double beta = (p1 >= 1.0) ? b : normal_quantile(Fa + p1 * z);
        double mass = normal_cdf(beta) - normal_cdf(alpha);
        double centroid = mean_[axis] + stddev_[axis] * (normal_pdf(alpha) - normal_pdf(beta)) / mass;
        return std::clamp(centroid, box_.lo[axis], box_.hi[axis]);
    }

    Kind kind_ = Kind::UniformBox;
    Box box_;
    std::vector<double> mean_;
    std::vector<double> stddev_;
    ParticleMeasure atoms_;
};

/// Compact region K_C containing every admissible trajectory: the support box
/// of m_0 inflated by C*T per coordinate.
inline Box trajectory_box(const InitialLaw& law, double velocity_bound, double horizon) {
    require(velocity_bound >= 0.0, "trajectory_box: velocity bound must be >= 0");
    return law.support_box().inflated(velocity_bound * horizon);
}

}  // namespace mfg
