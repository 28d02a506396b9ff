#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/measures.hpp"
#include "mfg/model.hpp"
#include "mfg/parallel.hpp"

namespace mfg {

// ---------------------------------------------------------------------------
// SpaceGrid: uniform lattice over the trajectory box, inflated so that no
// one-step foot x + dt*a with |a| <= C can leave the grid from inside K_C.
// Grids support d <= 2; particle and transcription paths work in any d.
// ---------------------------------------------------------------------------

class SpaceGrid {
public:
    SpaceGrid() = default;

    SpaceGrid(Box outer, std::vector<int> nodes_per_axis)
        : box_(std::move(outer)), nx_(std::move(nodes_per_axis)) {
        int d = box_.dim();
        require(d >= 1 && d <= 2, "SpaceGrid: grids support d <= 2");
        require(static_cast<int>(nx_.size()) == d, "SpaceGrid: nodes_per_axis size mismatch");
        h_.resize(d);
        total_ = 1;
        for (int i = 0; i < d; ++i) {
            require(nx_[i] >= 2, "SpaceGrid: need at least 2 nodes per axis");
            h_[i] = box_.width(i) / (nx_[i] - 1);
            require(h_[i] > 0.0, "SpaceGrid: degenerate axis");
            total_ *= nx_[i];
        }
    }

    int dim() const { return box_.dim(); }
    const Box& box() const { return box_; }
    long size() const { return total_; }
    int nodes(int axis) const { return nx_[axis]; }
    double spacing(int axis) const { return h_[axis]; }

    void node_point(long id, double* out) const {
        int d = dim();
        for (int i = d - 1; i >= 0; --i) {
            long c = id % nx_[i];
            id /= nx_[i];
            out[i] = box_.lo[i] + c * h_[i];
        }
    }

    /// Multilinear interpolation of nodal values, query clamped to the box.
    double interpolate(const std::vector<double>& values, const double* x) const {
        int d = dim();
        if (d == 1) {
            double s = std::clamp((x[0] - box_.lo[0]) / h_[0], 0.0, double(nx_[0] - 1));
            int i = std::min(static_cast<int>(s), nx_[0] - 2);
            double th = s - i;
            return (1.0 - th) * values[i] + th * values[i + 1];
        }
        double sx = std::clamp((x[0] - box_.lo[0]) / h_[0], 0.0, double(nx_[0] - 1));
        double sy = std::clamp((x[1] - box_.lo[1]) / h_[1], 0.0, double(nx_[1] - 1));
        int i = std::min(static_cast<int>(sx), nx_[0] - 2);
        int j = std::min(static_cast<int>(sy), nx_[1] - 2);
        double tx = sx - i, ty = sy - j;
        long row = nx_[1];
        double v00 = values[i * row + j], v01 = values[i * row + j + 1];
        double v10 = values[(i + 1) * row + j], v11 = values[(i + 1) * row + j + 1];
        return (1.0 - tx) * ((1.0 - ty) * v00 + ty * v01) + tx * ((1.0 - ty) * v10 + ty * v11);
    }

    /// Interpolation of a vector field stored per node (d components).
    void interpolate_vec(const double* field, const double* x, double* out) const {
        int d = dim();
        if (d == 1) {
            double s = std::clamp((x[0] - box_.lo[0]) / h_[0], 0.0, double(nx_[0] - 1));
            int i = std::min(static_cast<int>(s), nx_[0] - 2);
            double th = s - i;
            out[0] = (1.0 - th) * field[i] + th * field[i + 1];
            return;
        }
        double sx = std::clamp((x[0] - box_.lo[0]) / h_[0], 0.0, double(nx_[0] - 1));
        double sy = std::clamp((x[1] - box_.lo[1]) / h_[1], 0.0, double(nx_[1] - 1));
        int i = std::min(static_cast<int>(sx), nx_[0] - 2);
        int j = std::min(static_cast<int>(sy), nx_[1] - 2);
        double tx = sx - i, ty = sy - j;
        long row = nx_[1];
        for (int c = 0; c < 2; ++c) {
            double v00 = field[(i * row + j) * 2 + c], v01 = field[(i * row + j + 1) * 2 + c];
            double v10 = field[((i + 1) * row + j) * 2 + c],
                   v11 = field[((i + 1) * row + j + 1) * 2 + c];
            out[c] =
                (1.0 - tx) * ((1.0 - ty) * v00 + ty * v01) + tx * ((1.0 - ty) * v10 + ty * v11);
        }
    }

private:
    Box box_;
    std::vector<int> nx_;
    std::vector<double> h_;
    long total_ = 0;
};

/// Grid discretization parameters shared by the PDE-side solvers.
struct Discretization {
    int n_t = 64;
    std::vector<int> n_x = {257};
    int alpha_half_count = 0;  // 0 = default by dimension (16 in 1D, 8 in 2D)

    int alpha_k(int dim) const {
        if (alpha_half_count > 0) return alpha_half_count;
        return dim == 1 ? 16 : 8;
    }
};

/// Build the solver grid for a model: trajectory box inflated by one cell plus
/// the one-step reach C*dt, so argmin feet from K_C never leave the grid.
inline SpaceGrid make_space_grid(const ModelSpec& model, const Discretization& disc) {
    int d = model.dim;
    require(static_cast<int>(disc.n_x.size()) == d || disc.n_x.size() == 1,
            "Discretization: n_x must list one count or one per axis");
    std::vector<int> nx(d);
    for (int i = 0; i < d; ++i) nx[i] = disc.n_x.size() == 1 ? disc.n_x[0] : disc.n_x[i];
    double dt = model.horizon / disc.n_t;
    Box outer = model.box;
    for (int i = 0; i < d; ++i) {
        double cell = model.box.width(i) / (nx[i] - 1);
        double pad = std::max(cell, model.velocity_bound * dt) + cell;
        outer.lo[i] -= pad;
        outer.hi[i] += pad;
    }
    return SpaceGrid(outer, nx);
}

// ---------------------------------------------------------------------------
// Value and feedback grids.
// ---------------------------------------------------------------------------

class ValueGrid {
public:
    ValueGrid() = default;
    ValueGrid(SpaceGrid sgrid, TimeGrid tgrid)
        : sgrid_(std::move(sgrid)), tgrid_(tgrid),
          u_(static_cast<size_t>(tgrid.nodes()) * sgrid_.size(), 0.0) {}

    const SpaceGrid& space() const { return sgrid_; }
    const TimeGrid& time() const { return tgrid_; }

    double& at(int k, long node) { return u_[static_cast<size_t>(k) * sgrid_.size() + node]; }
    double at(int k, long node) const { return u_[static_cast<size_t>(k) * sgrid_.size() + node]; }

    std::vector<double> slice(int k) const {
        auto b = u_.begin() + static_cast<size_t>(k) * sgrid_.size();
        return std::vector<double>(b, b + sgrid_.size());
    }
    const double* slice_ptr(int k) const { return u_.data() + static_cast<size_t>(k) * sgrid_.size(); }
    double* slice_ptr(int k) { return u_.data() + static_cast<size_t>(k) * sgrid_.size(); }

private:
    SpaceGrid sgrid_;
    TimeGrid tgrid_;
    std::vector<double> u_;
};

class FeedbackGrid {
public:
    FeedbackGrid() = default;
    FeedbackGrid(SpaceGrid sgrid, TimeGrid tgrid)
        : sgrid_(std::move(sgrid)), tgrid_(tgrid),
          a_(static_cast<size_t>(tgrid.nodes()) * sgrid_.size() * sgrid_.dim(), 0.0) {}

    const SpaceGrid& space() const { return sgrid_; }
    const TimeGrid& time() const { return tgrid_; }

    double* at(int k, long node) {
        return a_.data() + (static_cast<size_t>(k) * sgrid_.size() + node) * sgrid_.dim();
    }
    const double* at(int k, long node) const {
        return a_.data() + (static_cast<size_t>(k) * sgrid_.size() + node) * sgrid_.dim();
    }

    /// Interpolated feedback velocity at (x, t_k).
    void velocity(const double* x, int k, double* out) const {
        const double* base = a_.data() + static_cast<size_t>(k) * sgrid_.size() * sgrid_.dim();
        sgrid_.interpolate_vec(base, x, out);
    }

    const double* slice_ptr(int k) const {
        return a_.data() + static_cast<size_t>(k) * sgrid_.size() * sgrid_.dim();
    }

private:
    SpaceGrid sgrid_;
    TimeGrid tgrid_;
    std::vector<double> a_;
};

// ---------------------------------------------------------------------------
// CouplingField: running/terminal couplings for one frozen flow. The exact
// field evaluates particle sums; the equilibrium solver substitutes a
// tabulated field (same interface) for its inner loop.
// ---------------------------------------------------------------------------

class CouplingField {
public:
    virtual ~CouplingField() = default;
    virtual double running(const double* x, int k) const = 0;
    virtual void running_grad(const double* x, int k, double* out) const = 0;
    virtual double terminal(const double* x) const = 0;
    virtual void terminal_grad(const double* x, double* out) const = 0;
};

class ExactCouplingField final : public CouplingField {
public:
    ExactCouplingField(const ModelSpec& model, const MarginalFlow& flow) {
        bound_.reserve(flow.slices());
        for (int k = 0; k < flow.slices(); ++k) bound_.emplace_back(model.running, flow.slice(k));
        term_ = std::make_unique<BoundCoupling>(model.terminal, flow.slice(flow.slices() - 1));
    }

    double running(const double* x, int k) const override { return bound_[k].value(x); }
    void running_grad(const double* x, int k, double* out) const override {
        bound_[k].grad(x, out);
    }
    double terminal(const double* x) const override { return term_->value(x); }
    void terminal_grad(const double* x, double* out) const override { term_->grad(x, out); }

private:
    std::vector<BoundCoupling> bound_;
    std::unique_ptr<BoundCoupling> term_;
};

// ---------------------------------------------------------------------------
// Backward semi-Lagrangian HJB solve:
//   u(x, t_k) = dt * f(x, rho(t_k))
//             + min_{a in A_h} { dt * L(-a, x) + I[u(., t_{k+1})](x + a dt) }
// The feedback grid stores the argmin velocity (ties resolved to the
// lexicographically smallest candidate); a golden-section pass per axis
// refines the discrete argmin inside its grid cell.
// ---------------------------------------------------------------------------

struct HjbSolution {
    ValueGrid value;
    FeedbackGrid feedback;
    long clamp_count = 0;  // argmin feet clamped from inside K_C (should be 0)
};

namespace detail {

/// Velocity candidates: tensor lattice on [-C, C]^d intersected with the
/// Euclidean ball |a| <= C, in lexicographic order.
inline std::vector<std::vector<double>> velocity_set(int dim, double C, int half_count) {
    std::vector<std::vector<double>> set;
    if (C <= 0.0) {
        set.push_back(std::vector<double>(dim, 0.0));
        return set;
    }
    int n = 2 * half_count + 1;
    std::vector<int> idx(dim, 0);
    long total = 1;
    for (int i = 0; i < dim; ++i) total *= n;
    for (long t = 0; t < total; ++t) {
        std::vector<double> a(dim);
        for (int i = 0; i < dim; ++i) a[i] = -C + (2.0 * C * idx[i]) / (n - 1);
        if (norm2_sq(a.data(), dim) <= C * C * (1.0 + 1e-12)) set.push_back(std::move(a));
        for (int i = dim - 1; i >= 0; --i) {
            if (++idx[i] < n) break;
            idx[i] = 0;
        }
    }
    return set;
}

inline double golden_min(double lo, double hi, int iters, const std::function<double(double)>& f,
                         double* argmin) {
    const double phi = 0.6180339887498949;
    double a = lo, b = hi;
    double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
    double f1 = f(x1), f2 = f(x2);
    for (int i = 0; i < iters; ++i) {
        if (f1 <= f2) {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2);
        }
    }
    double xm = 0.5 * (a + b);
    double fm = f(xm);
    if (f1 < fm) {
        fm = f1;
        xm = x1;
    }
    if (f2 < fm) {
        fm = f2;
        xm = x2;
    }
    *argmin = xm;
    return fm;
}

}  // namespace detail

inline HjbSolution solve_hjb_field(const ModelSpec& model, const CouplingField& field,
                                   const SpaceGrid& sgrid, const TimeGrid& tgrid,
                                   const Discretization& disc) {
    int d = model.dim;
    double C = model.velocity_bound;
    double dt = tgrid.dt();
    long nn = sgrid.size();
    ValueGrid u(sgrid, tgrid);
    FeedbackGrid fb(sgrid, tgrid);

    // sanity: one-step reach must stay on the grid from inside K_C
    for (int i = 0; i < d; ++i) {
        double pad = std::min(model.box.lo[i] - sgrid.box().lo[i],
                              sgrid.box().hi[i] - model.box.hi[i]);
        require(pad >= C * dt - 1e-12,
                "solve_hjb: grid inflation smaller than one-step reach C*dt; "
                "velocity bound appears underestimated for this grid");
    }

    auto candidates = detail::velocity_set(d, C, disc.alpha_k(d));

    // static coefficient fields
    std::vector<double> node_xs(static_cast<size_t>(nn) * d);
    parallel_for(nn, [&](long id) { sgrid.node_point(id, node_xs.data() + id * d); });

    // terminal condition, exact at nodes
    parallel_for(nn, [&](long id) { u.at(tgrid.steps(), id) = field.terminal(node_xs.data() + id * d); });

    std::vector<long> clamp_counts(tgrid.steps(), 0);
    std::vector<double> next(nn);
    for (int k = tgrid.steps() - 1; k >= 0; --k) {
        std::copy(u.slice_ptr(k + 1), u.slice_ptr(k + 1) + nn, next.begin());
        long slice_clamps = 0;
        std::vector<long> local_clamps(nn, 0);
        parallel_for(nn, [&](long id) {
            const double* x = node_xs.data() + id * d;
            double foot[2], neg[2], best_a[2] = {0.0, 0.0};
            double best = std::numeric_limits<double>::infinity();
            for (const auto& a : candidates) {
                for (int i = 0; i < d; ++i) {
                    foot[i] = x[i] + dt * a[i];
                    neg[i] = -a[i];
                }
                double val = dt * model.lagrangian.eval(neg, x, d) + sgrid.interpolate(next, foot);
                if (val < best) {
                    best = val;
                    for (int i = 0; i < d; ++i) best_a[i] = a[i];
                }
            }
            // golden-section refinement, one pass per axis inside the cell
            if (C > 0.0 && candidates.size() > 1) {
                double spacing = C / disc.alpha_k(d);
                for (int axis = 0; axis < d; ++axis) {
                    double others_sq = 0.0;
                    for (int i = 0; i < d; ++i)
                        if (i != axis) others_sq += best_a[i] * best_a[i];
                    double reach = std::sqrt(std::max(0.0, C * C - others_sq));
                    double lo = std::max(-reach, best_a[axis] - spacing);
                    double hi = std::min(reach, best_a[axis] + spacing);
                    if (hi <= lo) continue;
                    double trial[2] = {best_a[0], d > 1 ? best_a[1] : 0.0};
                    auto obj = [&](double s) {
                        trial[axis] = s;
                        for (int i = 0; i < d; ++i) {
                            foot[i] = x[i] + dt * trial[i];
                            neg[i] = -trial[i];
                        }
                        return dt * model.lagrangian.eval(neg, x, d) +
                               sgrid.interpolate(next, foot);
                    };
                    double arg;
                    double val = detail::golden_min(lo, hi, 48, obj, &arg);
                    if (val < best) {
                        best = val;
                        best_a[axis] = arg;
                    }
                }
            }
            u.at(k, id) = dt * field.running(x, k) + best;
            double* slot = fb.at(k, id);
            for (int i = 0; i < d; ++i) slot[i] = best_a[i];
            // clamp diagnostic: argmin foot outside the grid from inside K_C
            bool inside_kc = model.box.contains(x);
            if (inside_kc) {
                for (int i = 0; i < d; ++i) foot[i] = x[i] + dt * best_a[i];
                if (!sgrid.box().contains(foot, 1e-12)) local_clamps[id] = 1;
            }
        });
        for (long id = 0; id < nn; ++id) slice_clamps += local_clamps[id];
        clamp_counts[k] = slice_clamps;
    }

    HjbSolution sol;
    sol.value = std::move(u);
    sol.feedback = std::move(fb);
    for (long c : clamp_counts) sol.clamp_count += c;
    return sol;
}

/// Public HJB solve against a frozen marginal flow with exact coupling sums.
inline HjbSolution solve_hjb(const ModelSpec& model, const MarginalFlow& flow,
                             const Discretization& disc) {
    require(flow.grid().steps() == disc.n_t, "solve_hjb: flow grid does not match discretization");
    SpaceGrid sgrid = make_space_grid(model, disc);
    ExactCouplingField field(model, flow);
    return solve_hjb_field(model, field, sgrid, flow.grid(), disc);
}

// ---------------------------------------------------------------------------
// Characteristics: explicit Euler through the interpolated feedback field,
// positions clamped to the grid box with clamp events counted.
// ---------------------------------------------------------------------------

struct CharacteristicResult {
    Trajectory path;
    long clamp_count = 0;
};

inline CharacteristicResult integrate_characteristic(const std::vector<double>& x0,
                                                     const FeedbackGrid& fb) {
    const SpaceGrid& sg = fb.space();
    const TimeGrid& tg = fb.time();
    int d = sg.dim();
    require(static_cast<int>(x0.size()) == d, "integrate_characteristic: x0 dimension mismatch");
    require(sg.box().contains(x0.data(), 1e-12), "integrate_characteristic: x0 outside grid box");
    CharacteristicResult res;
    res.path = Trajectory(tg, d);
    std::copy(x0.begin(), x0.end(), res.path.point(0));
    double dt = tg.dt();
    std::vector<double> a(d);
    for (int k = 0; k < tg.steps(); ++k) {
        const double* cur = res.path.point(k);
        fb.velocity(cur, k, a.data());
        double* nxt = res.path.point(k + 1);
        for (int i = 0; i < d; ++i) nxt[i] = cur[i] + dt * a[i];
        double before[2] = {nxt[0], d > 1 ? nxt[1] : 0.0};
        sg.box().clamp(nxt);
        for (int i = 0; i < d; ++i)
            if (nxt[i] != before[i]) {
                ++res.clamp_count;
                break;
            }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Direct transcription: minimize the discrete path cost over the interval
// velocities (|v_k| <= C) by projected L-BFGS from a warm start. The positions
// are prefix sums, so the initial condition is implicit and the velocity bound
// is a per-step ball projection.
// ---------------------------------------------------------------------------

struct BestResponse {
    Trajectory path;
    double cost = 0.0;
    bool converged = false;
    int iterations = 0;
    double pg_norm = 0.0;
};

namespace detail {

class TranscriptionProblem {
public:
    TranscriptionProblem(const ModelSpec& model, const CouplingField& field, const TimeGrid& tg,
                         const std::vector<double>& x0)
        : model_(model), field_(field), tg_(tg), x0_(x0), d_(model.dim), n_(tg.steps()) {}

    int size() const { return n_ * d_; }

    double cost(const std::vector<double>& v, std::vector<double>* positions = nullptr) const {
        double dt = tg_.dt();
        std::vector<double> x = x0_;
        double total = 0.0;
        std::vector<double> neg(d_);
        if (positions) {
            positions->resize(static_cast<size_t>(n_ + 1) * d_);
            std::copy(x.begin(), x.end(), positions->begin());
        }
        for (int k = 0; k < n_; ++k) {
            const double* vk = v.data() + static_cast<size_t>(k) * d_;
            for (int i = 0; i < d_; ++i) neg[i] = -vk[i];
            total += dt * (model_.lagrangian.eval(neg.data(), x.data(), d_) +
                           field_.running(x.data(), k));
            for (int i = 0; i < d_; ++i) x[i] += dt * vk[i];
            if (positions)
                std::copy(x.begin(), x.end(), positions->begin() + static_cast<size_t>(k + 1) * d_);
        }
        total += field_.terminal(x.data());
        return total;
    }

    double cost_grad(const std::vector<double>& v, std::vector<double>& grad) const {
        double dt = tg_.dt();
        std::vector<double> xs(static_cast<size_t>(n_ + 1) * d_);
        double total = cost(v, &xs);
        grad.assign(size(), 0.0);
        std::vector<double> p(d_), tmp(d_), neg(d_);
        field_.terminal_grad(xs.data() + static_cast<size_t>(n_) * d_, p.data());
        for (int k = n_ - 1; k >= 0; --k) {
            const double* xk = xs.data() + static_cast<size_t>(k) * d_;
            const double* vk = v.data() + static_cast<size_t>(k) * d_;
            for (int i = 0; i < d_; ++i) neg[i] = -vk[i];
            model_.lagrangian.grad_alpha(neg.data(), xk, d_, tmp.data());
            for (int i = 0; i < d_; ++i)
                grad[static_cast<size_t>(k) * d_ + i] = dt * (-tmp[i] + p[i]);
            model_.lagrangian.grad_x(neg.data(), xk, d_, tmp.data());
            for (int i = 0; i < d_; ++i) p[i] += dt * tmp[i];
            field_.running_grad(xk, k, tmp.data());
            for (int i = 0; i < d_; ++i) p[i] += dt * tmp[i];
        }
        return total;
    }

    void project(std::vector<double>& v) const {
        double C = model_.velocity_bound;
        for (int k = 0; k < n_; ++k) {
            double* vk = v.data() + static_cast<size_t>(k) * d_;
            double nrm = norm2(vk, d_);
            if (nrm > C) {
                double s = C / nrm;
                for (int i = 0; i < d_; ++i) vk[i] *= s;
            }
        }
    }

    Trajectory to_trajectory(const std::vector<double>& v) const {
        std::vector<double> xs;
        cost(v, &xs);
        // rebuild positions with exact initial point
        Trajectory tr(tg_, d_, std::move(xs));
        std::copy(x0_.begin(), x0_.end(), tr.point(0));
        return tr;
    }

private:
    const ModelSpec& model_;
    const CouplingField& field_;
    TimeGrid tg_;
    std::vector<double> x0_;
    int d_;
    int n_;
};

}  // namespace detail

inline BestResponse best_response_field(const ModelSpec& model, const CouplingField& field,
                                        const TimeGrid& tg, const std::vector<double>& x0,
                                        const Trajectory* warm_start, double tol = 1e-8,
                                        int max_iters = 500) {
    detail::TranscriptionProblem prob(model, field, tg, x0);
    int nvar = prob.size();
    std::vector<double> v(nvar, 0.0);
    if (warm_start) {
        require(warm_start->grid().same_as(tg), "best_response: warm start grid mismatch");
        std::vector<double> w = velocities(*warm_start);
        v = w;
    }
    prob.project(v);

    std::vector<double> g(nvar), g_new(nvar);
    double J = prob.cost_grad(v, g);

    const int mem = 8;
    std::vector<std::vector<double>> S, Y;
    std::vector<double> rho;

    BestResponse out;
    auto pg_norm = [&](const std::vector<double>& vv, const std::vector<double>& gg) {
        std::vector<double> trial(nvar);
        for (int i = 0; i < nvar; ++i) trial[i] = vv[i] - gg[i];
        prob.project(trial);
        double nrm = 0.0;
        for (int i = 0; i < nvar; ++i) nrm = std::max(nrm, std::abs(vv[i] - trial[i]));
        return nrm;
    };

    int it = 0;
    for (; it < max_iters; ++it) {
        out.pg_norm = pg_norm(v, g);
        if (out.pg_norm <= tol) {
            out.converged = true;
            break;
        }
        // two-loop recursion
        std::vector<double> dir = g;
        int h = static_cast<int>(S.size());
        std::vector<double> alpha(h);
        for (int i = h - 1; i >= 0; --i) {
            alpha[i] = rho[i] * std::inner_product(S[i].begin(), S[i].end(), dir.begin(), 0.0);
            for (int j = 0; j < nvar; ++j) dir[j] -= alpha[i] * Y[i][j];
        }
        if (h > 0) {
            double yy = std::inner_product(Y[h - 1].begin(), Y[h - 1].end(), Y[h - 1].begin(), 0.0);
            double sy = 1.0 / rho[h - 1];
            double scale = sy / std::max(yy, 1e-300);
            for (double& x : dir) x *= scale;
        }
        for (int i = 0; i < h; ++i) {
            double beta = rho[i] * std::inner_product(Y[i].begin(), Y[i].end(), dir.begin(), 0.0);
            for (int j = 0; j < nvar; ++j) dir[j] += (alpha[i] - beta) * S[i][j];
        }
        for (double& x : dir) x = -x;
        double gd = std::inner_product(g.begin(), g.end(), dir.begin(), 0.0);
        if (!(gd < 0.0)) {  // safeguard: fall back to steepest descent
            for (int i = 0; i < nvar; ++i) dir[i] = -g[i];
            gd = -std::inner_product(g.begin(), g.end(), g.begin(), 0.0);
        }

        double step = (h == 0) ? 1.0 / std::max(1.0, norm2(g.data(), nvar)) : 1.0;
        bool accepted = false;
        std::vector<double> v_new(nvar);
        for (int ls = 0; ls < 50; ++ls) {
            for (int i = 0; i < nvar; ++i) v_new[i] = v[i] + step * dir[i];
            prob.project(v_new);
            double J_new = prob.cost_grad(v_new, g_new);
            double pred = 0.0;  // projected Armijo: g . (v_new - v)
            for (int i = 0; i < nvar; ++i) pred += g[i] * (v_new[i] - v[i]);
            if (J_new <= J + 1e-4 * std::min(0.0, pred) && J_new < J + 1e-18) {
                // curvature update
                std::vector<double> s(nvar), y(nvar);
                double sy = 0.0;
                for (int i = 0; i < nvar; ++i) {
                    s[i] = v_new[i] - v[i];
                    y[i] = g_new[i] - g[i];
                    sy += s[i] * y[i];
                }
                if (sy > 1e-14) {
                    S.push_back(std::move(s));
                    Y.push_back(std::move(y));
                    rho.push_back(1.0 / sy);
                    if (static_cast<int>(S.size()) > mem) {
                        S.erase(S.begin());
                        Y.erase(Y.begin());
                        rho.erase(rho.begin());
                    }
                }
                v = v_new;
                g = g_new;
                J = J_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            out.pg_norm = pg_norm(v, g);
            out.converged = out.pg_norm <= 10.0 * tol;  // stalled at numerical floor
            break;
        }
    }
    out.iterations = it;
    out.path = prob.to_trajectory(v);
    out.cost = J;
    return out;
}

/// Best response of one agent against a frozen flow: projected quasi-Newton
/// transcription warm-started from the HJB characteristic through x0 (or from
/// a caller-supplied trajectory).
inline BestResponse best_response_transcription(const ModelSpec& model, const MarginalFlow& flow,
                                                const std::vector<double>& x0,
                                                const Trajectory* warm_start = nullptr,
                                                const Discretization* disc = nullptr,
                                                double tol = 1e-8, int max_iters = 500) {
    ExactCouplingField field(model, flow);
    if (warm_start)
        return best_response_field(model, field, flow.grid(), x0, warm_start, tol, max_iters);
    Discretization d;
    if (disc) {
        d = *disc;
    } else {
        d.n_t = flow.grid().steps();
        d.n_x = std::vector<int>{model.dim == 1 ? 257 : 65};
    }
    d.n_t = flow.grid().steps();
    HjbSolution hjb = solve_hjb(model, flow, d);
    CharacteristicResult ch = integrate_characteristic(x0, hjb.feedback);
    return best_response_field(model, field, flow.grid(), x0, &ch.path, tol, max_iters);
}

// ---------------------------------------------------------------------------
// Interpolation accessor and regularity estimators.
// ---------------------------------------------------------------------------

/// Multilinear in space, linear in time.
inline double value_of(const ValueGrid& vg, const std::vector<double>& x, double t) {
    require(vg.space().box().contains(x.data(), 1e-12), "value_of: x outside grid domain");
    auto [k, th] = vg.time().locate(t);
    std::vector<double> lo = vg.slice(k);
    double a = vg.space().interpolate(lo, x.data());
    if (th == 0.0) return a;
    std::vector<double> hi = vg.slice(k + 1);
    double b = vg.space().interpolate(hi, x.data());
    return (1.0 - th) * a + th * b;
}

struct LipschitzEstimate {
    double space = 0.0;  // max |u(x)-u(y)|/|x-y| over adjacent nodes, all slices
    double time = 0.0;   // max |u(x,t)-u(x,s)|/|t-s| over adjacent slices
};

inline LipschitzEstimate lipschitz_estimate(const ValueGrid& vg) {
    const SpaceGrid& sg = vg.space();
    LipschitzEstimate est;
    int d = sg.dim();
    int nx = sg.nodes(0);
    int ny = d > 1 ? sg.nodes(1) : 1;
    for (int k = 0; k < vg.time().nodes(); ++k) {
        const double* u = vg.slice_ptr(k);
        for (int i = 0; i < nx; ++i)
            for (int j = 0; j < ny; ++j) {
                long id = d == 1 ? i : static_cast<long>(i) * ny + j;
                if (i + 1 < nx) {
                    long id2 = d == 1 ? i + 1 : static_cast<long>(i + 1) * ny + j;
                    est.space = std::max(est.space, std::abs(u[id2] - u[id]) / sg.spacing(0));
                }
                if (d > 1 && j + 1 < ny)
                    est.space = std::max(est.space, std::abs(u[id + 1] - u[id]) / sg.spacing(1));
                if (k + 1 < vg.time().nodes())
                    est.time = std::max(est.time,
                                        std::abs(vg.at(k + 1, id) - u[id]) / vg.time().dt());
            }
    }
    return est;
}

/// Discrete semiconcavity constant: max over interior nodes, axes and slices
/// of the centered second difference (u(x+h)+u(x-h)-2u(x))/h^2.
inline double semiconcavity_estimate(const ValueGrid& vg) {
    const SpaceGrid& sg = vg.space();
    int d = sg.dim();
    int nx = sg.nodes(0);
    int ny = d > 1 ? sg.nodes(1) : 1;
    double worst = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < vg.time().nodes(); ++k) {
        const double* u = vg.slice_ptr(k);
        for (int i = 0; i < nx; ++i)
            for (int j = 0; j < ny; ++j) {
                long id = d == 1 ? i : static_cast<long>(i) * ny + j;
                if (i > 0 && i + 1 < nx) {
                    long l = d == 1 ? i - 1 : static_cast<long>(i - 1) * ny + j;
                    long r = d == 1 ? i + 1 : static_cast<long>(i + 1) * ny + j;
                    worst = std::max(worst, (u[r] + u[l] - 2.0 * u[id]) /
                                                (sg.spacing(0) * sg.spacing(0)));
                }
                if (d > 1 && j > 0 && j + 1 < ny)
                    worst = std::max(worst, (u[id + 1] + u[id - 1] - 2.0 * u[id]) /
                                                (sg.spacing(1) * sg.spacing(1)));
            }
    }
    return worst;
}

}  // namespace mfg
