#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/measures.hpp"
#include "mfg/model.hpp"
#include "mfg/parallel.hpp"
#include "mfg/transport.hpp"
#include "mfg/variational.hpp"

namespace mfg {

// ---------------------------------------------------------------------------
// Solver configuration and result types.
// ---------------------------------------------------------------------------

struct SolverParams {
    enum class Scheme { PicardDamped, FictitiousPlay };
    enum class Backend { Transcription, HjbCharacteristics, CrossCheck };

    Scheme scheme = Scheme::PicardDamped;
    double damping = 0.5;     // Picard mixing weight theta in (0, 1]
    int max_iters = 200;
    double eps_stop = 1e-6;   // sup_t d1 between successive flow iterates
    double eps_nash = 1e-3;   // exploitability certificate
    Backend backend = Backend::Transcription;
    uint64_t seed = 0;
    int mc_tuples = 64;       // M for the finite-N couplings
    long particle_budget = 65536;
    double br_tol = 1e-8;
    int br_max_iters = 500;
    int multistart = 1;

    void validate() const {
        require(damping > 0.0 && damping <= 1.0, "SolverParams: damping must be in (0,1]");
        require(eps_stop > 0.0 && eps_nash > 0.0, "SolverParams: tolerances must be > 0");
        require(max_iters >= 1 && mc_tuples >= 1 && particle_budget >= 2,
                "SolverParams: counts must be positive");
        require(multistart >= 1, "SolverParams: multistart must be >= 1");
    }
};

struct IterationRecord {
    int iteration = 0;
    double flow_delta = 0.0;
    double exploitability = 0.0;     // fast in-loop estimate (exact couplings)
    double cross_check_gap = 0.0;    // transcription vs characteristics, sup over atoms
    long characteristic_clamps = 0;
    int br_nonconverged = 0;
    double truncated_mass = 0.0;
};

struct EquilibriumDiagnostics {
    std::vector<IterationRecord> trace;
    double mc_error_estimate = 0.0;   // finite-N tuple spread at probe points
    double truncated_mass_max = 0.0;
    long clamp_total = 0;
    std::string stop_reason;
};

struct EquilibriumResult {
    PathMeasure measure;       // the last best-response path measure (pure strategies)
    MarginalFlow flow;         // = pushforward_marginals(measure), bit-exact
    ValueGrid value;           // value function of the equilibrium flow
    FeedbackGrid feedback;
    double exploitability = 0.0;
    int iterations = 0;
    bool converged = false;
    EquilibriumDiagnostics diagnostics;
};

// ---------------------------------------------------------------------------
// Cubic (Catmull-Rom) interpolation of tabulated coupling values. C^1, so the
// transcription optimizer sees a continuous gradient.
// ---------------------------------------------------------------------------

namespace detail {

inline void catmull_weights(double t, double* w, double* dw) {
    w[0] = 0.5 * (-t + 2.0 * t * t - t * t * t);
    w[1] = 0.5 * (2.0 - 5.0 * t * t + 3.0 * t * t * t);
    w[2] = 0.5 * (t + 4.0 * t * t - 3.0 * t * t * t);
    w[3] = 0.5 * (-t * t + t * t * t);
    if (dw) {
        dw[0] = 0.5 * (-1.0 + 4.0 * t - 3.0 * t * t);
        dw[1] = 0.5 * (-10.0 * t + 9.0 * t * t);
        dw[2] = 0.5 * (1.0 + 8.0 * t - 9.0 * t * t);
        dw[3] = 0.5 * (-2.0 * t + 3.0 * t * t);
    }
}

/// Cubic interpolation with clamped stencil at the boundary; returns the value
/// and optionally the spatial gradient.
inline double cubic_eval(const SpaceGrid& sg, const std::vector<double>& v, const double* x,
                         double* grad) {
    int d = sg.dim();
    auto stencil = [&](int axis, double q, int* idx, double* t) {
        int n = sg.nodes(axis);
        double s = std::clamp((q - sg.box().lo[axis]) / sg.spacing(axis), 0.0, double(n - 1));
        int i = std::min(static_cast<int>(s), n - 2);
        *t = s - i;
        idx[0] = std::max(i - 1, 0);
        idx[1] = i;
        idx[2] = i + 1;
        idx[3] = std::min(i + 2, n - 1);
    };
    if (d == 1) {
        int id[4];
        double t, w[4], dw[4];
        stencil(0, x[0], id, &t);
        catmull_weights(t, w, grad ? dw : nullptr);
        double val = 0.0, der = 0.0;
        for (int a = 0; a < 4; ++a) {
            val += w[a] * v[id[a]];
            if (grad) der += dw[a] * v[id[a]];
        }
        if (grad) grad[0] = der / sg.spacing(0);
        return val;
    }
    int ix[4], iy[4];
    double tx, ty, wx[4], wy[4], dwx[4], dwy[4];
    stencil(0, x[0], ix, &tx);
    stencil(1, x[1], iy, &ty);
    catmull_weights(tx, wx, grad ? dwx : nullptr);
    catmull_weights(ty, wy, grad ? dwy : nullptr);
    long row = sg.nodes(1);
    double val = 0.0, gx = 0.0, gy = 0.0;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            double node = v[ix[a] * row + iy[b]];
            val += wx[a] * wy[b] * node;
            if (grad) {
                gx += dwx[a] * wy[b] * node;
                gy += wx[a] * dwy[b] * node;
            }
        }
    if (grad) {
        grad[0] = gx / sg.spacing(0);
        grad[1] = gy / sg.spacing(1);
    }
    return val;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// TabulatedCouplingField: the coupling state used inside fixed-point
// iterations. Values are tabulated per time slice on the solver grid for the
// kernel-sum kinds (for which the state is measure-linear, so convex flow
// mixtures mix the tables exactly); mean-attraction keeps closed-form
// mean/offset statistics; measure-independent couplings evaluate exactly.
// Certificates never use this class -- they bind couplings exactly.
// ---------------------------------------------------------------------------

class TabulatedCouplingField final : public CouplingField {
public:
    enum class Mode { Closed, Table, Mean };

    TabulatedCouplingField(const ModelSpec& model, const MarginalFlow& flow,
                           const SpaceGrid& sgrid)
        : model_(&model), sgrid_(&sgrid), n_t_(flow.grid().steps()) {
        run_mode_ = mode_of(model.running);
        term_mode_ = mode_of(model.terminal);
        if (run_mode_ == Mode::Table) {
            run_tables_.assign(n_t_, std::vector<double>(sgrid.size()));
            node_cache();
            for (int k = 0; k < n_t_; ++k) {
                BoundCoupling bound(model.running, flow.slice(k));
                auto& tbl = run_tables_[k];
                parallel_for(sgrid.size(),
                             [&](long id) { tbl[id] = bound.value(nodes_.data() + id * dim()); });
            }
        } else if (run_mode_ == Mode::Mean) {
            run_mean_.assign(n_t_, std::vector<double>(dim(), 0.0));
            run_offset_.assign(n_t_, 0.0);
            for (int k = 0; k < n_t_; ++k) {
                BoundCoupling bound(model.running, flow.slice(k));
                run_mean_[k] = bound.attraction_mean();
                run_offset_[k] = bound.attraction_spread();
            }
        }
        const ParticleMeasure& last = flow.slice(flow.slices() - 1);
        if (term_mode_ == Mode::Table) {
            term_table_.assign(sgrid.size(), 0.0);
            node_cache();
            BoundCoupling bound(model.terminal, last);
            parallel_for(sgrid.size(), [&](long id) {
                term_table_[id] = bound.value(nodes_.data() + id * dim());
            });
        } else if (term_mode_ == Mode::Mean) {
            BoundCoupling bound(model.terminal, last);
            term_mean_ = bound.attraction_mean();
            term_offset_ = bound.attraction_spread();
        }
    }

    /// state <- (1-w) * state + w * other, exact for every mode.
    void mix_in(const TabulatedCouplingField& other, double w) {
        double c = 1.0 - w;
        if (run_mode_ == Mode::Table) {
            for (int k = 0; k < n_t_; ++k) {
                auto& a = run_tables_[k];
                const auto& b = other.run_tables_[k];
                for (size_t i = 0; i < a.size(); ++i) a[i] = c * a[i] + w * b[i];
            }
        } else if (run_mode_ == Mode::Mean) {
            for (int k = 0; k < n_t_; ++k)
                mix_mean(run_mean_[k], run_offset_[k], other.run_mean_[k], other.run_offset_[k], w);
        }
        if (term_mode_ == Mode::Table) {
            for (size_t i = 0; i < term_table_.size(); ++i)
                term_table_[i] = c * term_table_[i] + w * other.term_table_[i];
        } else if (term_mode_ == Mode::Mean) {
            mix_mean(term_mean_, term_offset_, other.term_mean_, other.term_offset_, w);
        }
    }

    double running(const double* x, int k) const override {
        switch (run_mode_) {
            case Mode::Closed:
                return closed_value(model_->running, x);
            case Mode::Table:
                return detail::cubic_eval(*sgrid_, run_tables_[k], x, nullptr);
            case Mode::Mean:
                return mean_value(model_->running, x, run_mean_[k], run_offset_[k]);
        }
        return 0.0;
    }

    void running_grad(const double* x, int k, double* out) const override {
        switch (run_mode_) {
            case Mode::Closed:
                closed_grad(model_->running, x, out);
                return;
            case Mode::Table:
                detail::cubic_eval(*sgrid_, run_tables_[k], x, out);
                return;
            case Mode::Mean:
                mean_grad(model_->running, x, run_mean_[k], out);
                return;
        }
    }

    double terminal(const double* x) const override {
        switch (term_mode_) {
            case Mode::Closed:
                return closed_value(model_->terminal, x);
            case Mode::Table:
                return detail::cubic_eval(*sgrid_, term_table_, x, nullptr);
            case Mode::Mean:
                return mean_value(model_->terminal, x, term_mean_, term_offset_);
        }
        return 0.0;
    }

    void terminal_grad(const double* x, double* out) const override {
        switch (term_mode_) {
            case Mode::Closed:
                closed_grad(model_->terminal, x, out);
                return;
            case Mode::Table:
                detail::cubic_eval(*sgrid_, term_table_, x, out);
                return;
            case Mode::Mean:
                mean_grad(model_->terminal, x, term_mean_, out);
                return;
        }
    }

private:
    static Mode mode_of(const CouplingSpec& c) {
        if (c.measure_independent()) return Mode::Closed;
        if (c.kind() == CouplingSpec::Kind::MeanAttraction) return Mode::Mean;
        return Mode::Table;
    }

    int dim() const { return sgrid_->dim(); }

    void node_cache() {
        if (!nodes_.empty()) return;
        nodes_.resize(static_cast<size_t>(sgrid_->size()) * dim());
        for (long id = 0; id < sgrid_->size(); ++id)
            sgrid_->node_point(id, nodes_.data() + id * dim());
    }

    double closed_value(const CouplingSpec& c, const double* x) const {
        return c.has_potential() ? c.potential().eval(x, dim()) : 0.0;
    }

    void closed_grad(const CouplingSpec& c, const double* x, double* out) const {
        if (c.has_potential())
            c.potential().grad(x, dim(), out);
        else
            for (int i = 0; i < dim(); ++i) out[i] = 0.0;
    }

    double mean_value(const CouplingSpec& c, const double* x, const std::vector<double>& mean,
                      double offset) const {
        double q = 0.0;
        for (int i = 0; i < dim(); ++i) {
            double z = x[i] - mean[i];
            q += z * z;
        }
        double v = c.amplitude() * (q + offset);
        if (c.has_potential()) v += c.potential().eval(x, dim());
        return v;
    }

    void mean_grad(const CouplingSpec& c, const double* x, const std::vector<double>& mean,
                   double* out) const {
        for (int i = 0; i < dim(); ++i) out[i] = 2.0 * c.amplitude() * (x[i] - mean[i]);
        if (c.has_potential()) {
            std::vector<double> g(dim());
            c.potential().grad(x, dim(), g.data());
            for (int i = 0; i < dim(); ++i) out[i] += g[i];
        }
    }

    /// Convex combination of |x-A|^2 + sA and |x-B|^2 + sB is |x-M|^2 + s.
    static void mix_mean(std::vector<double>& mean, double& offset,
                         const std::vector<double>& mean2, double offset2, double w) {
        double c = 1.0 - w;
        double sq_old = 0.0, sq_new = 0.0;
        for (double v : mean) sq_old += v * v;
        for (double v : mean2) sq_new += v * v;
        for (size_t i = 0; i < mean.size(); ++i) mean[i] = c * mean[i] + w * mean2[i];
        double sq_mix = 0.0;
        for (double v : mean) sq_mix += v * v;
        offset = c * (offset + sq_old) + w * (offset2 + sq_new) - sq_mix;
    }

    const ModelSpec* model_;
    const SpaceGrid* sgrid_;
    int n_t_;
    Mode run_mode_ = Mode::Closed;
    Mode term_mode_ = Mode::Closed;
    std::vector<std::vector<double>> run_tables_;
    std::vector<double> term_table_;
    std::vector<std::vector<double>> run_mean_;
    std::vector<double> run_offset_;
    std::vector<double> term_mean_;
    double term_offset_ = 0.0;
    std::vector<double> nodes_;
};

// ---------------------------------------------------------------------------
// Path cost under a coupling field (identical quadrature to path_cost).
// ---------------------------------------------------------------------------

inline double field_path_cost(const ModelSpec& model, const CouplingField& field,
                              const Trajectory& gamma) {
    int d = model.dim;
    double dt = gamma.grid().dt();
    double total = 0.0;
    std::vector<double> neg(d);
    for (int k = 0; k < gamma.grid().steps(); ++k) {
        const double* a = gamma.point(k);
        const double* b = gamma.point(k + 1);
        for (int i = 0; i < d; ++i) neg[i] = -(b[i] - a[i]) / dt;
        total += dt * (model.lagrangian.eval(neg.data(), a, d) + field.running(a, k));
    }
    total += field.terminal(gamma.point(gamma.grid().steps()));
    return total;
}

// ---------------------------------------------------------------------------
// Exploitability: the m_0-averaged gap between the candidate's cost and the
// best-response cost against the candidate's own flow, the executable Nash
// certificate. Per-atom best responses are warm-started at the candidate path
// itself (descent property keeps each gap >= -1e-12) and, when `globalize` is
// set, additionally at HJB characteristics so a locally-stuck refinement
// cannot underestimate the gap.
// ---------------------------------------------------------------------------

inline double exploitability_vs_field(const ModelSpec& model, const CouplingField& field,
                                      const PathMeasure& m,
                                      const std::vector<const Trajectory*>& extra_warm,
                                      double br_tol, int br_max_iters) {
    int n = m.size();
    std::vector<double> gaps(n, 0.0);
    std::exception_ptr err;
    parallel_for(n, [&](long i) {
        try {
            const auto& part = m.particle(static_cast<int>(i));
            double j_cand = field_path_cost(model, field, part.path);
            BestResponse br = best_response_field(model, field, m.grid(), part.initial,
                                                  &part.path, br_tol, br_max_iters);
            double j_best = std::min(j_cand, br.cost);
            if (!extra_warm.empty() && extra_warm[i]) {
                BestResponse alt = best_response_field(model, field, m.grid(), part.initial,
                                                       extra_warm[i], br_tol, br_max_iters);
                j_best = std::min(j_best, alt.cost);
            }
            gaps[i] = part.weight * (j_cand - j_best);
        } catch (...) {
            if (!err) err = std::current_exception();
        }
    });
    if (err) std::rethrow_exception(err);
    double total = 0.0;
    for (double g : gaps) total += g;
    return total;
}

inline double exploitability(const ModelSpec& model, const PathMeasure& m,
                             const MarginalFlow& flow, const Discretization* disc = nullptr,
                             double br_tol = 1e-8, bool globalize = true) {
    require(m.grid().same_as(flow.grid()), "exploitability: measure/flow grid mismatch");
    ExactCouplingField field(model, flow);
    std::vector<const Trajectory*> warm(m.size(), nullptr);
    std::vector<Trajectory> chars;
    if (globalize) {
        Discretization d;
        if (disc) d = *disc;
        d.n_t = flow.grid().steps();
        SpaceGrid sgrid = make_space_grid(model, d);
        HjbSolution hjb = solve_hjb_field(model, field, sgrid, flow.grid(), d);
        chars.reserve(m.size());
        for (int i = 0; i < m.size(); ++i)
            chars.push_back(integrate_characteristic(m.particle(i).initial, hjb.feedback).path);
        for (int i = 0; i < m.size(); ++i) warm[i] = &chars[i];
    }
    double value = exploitability_vs_field(model, field, m, warm, br_tol, 500);
    require(value >= -1e-9, "exploitability: negative gap " + format_double(value) +
                                " -- best-response solver inconsistency");
    return value;
}

// ---------------------------------------------------------------------------
// Mixture flow: the fixed-point iterate, a per-slice weighted particle union.
// Mixing scales the old slice by (1-w) and appends the best-response slice
// scaled by w; atoms at exactly equal positions merge (the persistent atom
// set, e.g. every slice-0 copy of m_0), and slices exceeding the particle
// budget are truncated to the largest weights and renormalized, with the
// truncated mass reported.
// ---------------------------------------------------------------------------

class MixtureFlow {
public:
    MixtureFlow(const MarginalFlow& start, long budget) : dim_(start.dim()), budget_(budget) {
        grid_ = start.grid();
        slices_.resize(start.slices());
        for (int k = 0; k < start.slices(); ++k) append_scaled(slices_[k], start.slice(k), 1.0);
        for (auto& s : slices_) sort_merge(s);
    }

    const TimeGrid& grid() const { return grid_; }

    /// Returns the truncated mass (max over slices) of this mixing step.
    double mix(const MarginalFlow& br, double w) {
        double worst = 0.0;
        for (int k = 0; k < static_cast<int>(slices_.size()); ++k) {
            Slice& s = slices_[k];
            for (auto& e : s.entries) e.w *= (1.0 - w);
            append_scaled(s, br.slice(k), w);
            sort_merge(s);
            worst = std::max(worst, truncate(s));
        }
        return worst;
    }

    /// Exact sup_t d1 against another mixture (1D) or against itself before
    /// mixing; d >= 2 slices beyond the LP cap are compared through their
    /// largest-weight truncations (diagnostic metric only).
    double sup_distance(const MixtureFlow& other, int lp_cap = 4096) const {
        double sup = 0.0;
        for (size_t k = 0; k < slices_.size(); ++k)
            sup = std::max(sup, slice_distance(slices_[k], other.slices_[k], dim_, lp_cap));
        return sup;
    }

    MixtureFlow snapshot() const { return *this; }

private:
    struct Entry {
        std::vector<double> x;
        double w;
    };
    struct Slice {
        std::vector<Entry> entries;
    };

    static bool lex_less(const std::vector<double>& a, const std::vector<double>& b) {
        for (size_t i = 0; i < a.size(); ++i) {
            if (a[i] < b[i]) return true;
            if (a[i] > b[i]) return false;
        }
        return false;
    }

    void append_scaled(Slice& s, const ParticleMeasure& pm, double w) {
        for (int i = 0; i < pm.size(); ++i) {
            Entry e;
            e.x.assign(pm.point(i), pm.point(i) + dim_);
            e.w = w * pm.weight(i);
            s.entries.push_back(std::move(e));
        }
    }

    static void sort_merge(Slice& s) {
        std::sort(s.entries.begin(), s.entries.end(),
                  [](const Entry& a, const Entry& b) { return lex_less(a.x, b.x); });
        std::vector<Entry> out;
        out.reserve(s.entries.size());
        for (auto& e : s.entries) {
            if (!out.empty() && out.back().x == e.x)
                out.back().w += e.w;
            else
                out.push_back(std::move(e));
        }
        s.entries = std::move(out);
    }

    double truncate(Slice& s) {
        if (static_cast<long>(s.entries.size()) <= budget_) return 0.0;
        std::vector<int> order(s.entries.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if (s.entries[a].w != s.entries[b].w) return s.entries[a].w > s.entries[b].w;
            return lex_less(s.entries[a].x, s.entries[b].x);
        });
        std::vector<Entry> kept;
        kept.reserve(budget_);
        double kept_mass = 0.0, total = 0.0;
        for (const auto& e : s.entries) total += e.w;
        for (long i = 0; i < budget_; ++i) {
            kept.push_back(s.entries[order[i]]);
            kept_mass += kept.back().w;
        }
        for (auto& e : kept) e.w *= total / kept_mass;
        s.entries = std::move(kept);
        sort_merge(s);
        return (total - kept_mass) / total;
    }

    static double slice_distance(const Slice& a, const Slice& b, int dim, int lp_cap) {
        if (dim == 1) {
            // both slices sorted: CDF-difference integral over merged breakpoints
            size_t i = 0, j = 0;
            double cum = 0.0, dist = 0.0, prev = 0.0;
            bool first = true;
            while (i < a.entries.size() || j < b.entries.size()) {
                double xa = i < a.entries.size() ? a.entries[i].x[0]
                                                 : std::numeric_limits<double>::infinity();
                double xb = j < b.entries.size() ? b.entries[j].x[0]
                                                 : std::numeric_limits<double>::infinity();
                double x = std::min(xa, xb);
                if (!first) dist += std::abs(cum) * (x - prev);
                first = false;
                prev = x;
                while (i < a.entries.size() && a.entries[i].x[0] == x) cum += a.entries[i++].w;
                while (j < b.entries.size() && b.entries[j].x[0] == x) cum -= b.entries[j++].w;
            }
            return dist;
        }
        auto to_pm = [&](const Slice& s) {
            std::vector<double> pts, w;
            double total = 0.0;
            for (const auto& e : s.entries) total += e.w;
            for (const auto& e : s.entries) {
                pts.insert(pts.end(), e.x.begin(), e.x.end());
                w.push_back(e.w / total);
            }
            return ParticleMeasure(dim, std::move(pts), std::move(w));
        };
        Slice ta = a, tb = b;
        // LP cap fallback: compare largest-weight truncations
        auto shrink = [&](Slice& s, long cap) {
            if (static_cast<long>(s.entries.size()) <= cap) return;
            std::stable_sort(s.entries.begin(), s.entries.end(),
                             [](const Entry& p, const Entry& q) { return p.w > q.w; });
            s.entries.resize(cap);
            std::sort(s.entries.begin(), s.entries.end(),
                      [](const Entry& p, const Entry& q) { return lex_less(p.x, q.x); });
        };
        shrink(ta, lp_cap / 2);
        shrink(tb, lp_cap / 2);
        return w1_lp(to_pm(ta), to_pm(tb), lp_cap).first;
    }

    TimeGrid grid_;
    int dim_;
    long budget_;
    std::vector<Slice> slices_;
};

// ---------------------------------------------------------------------------
// The fixed-point solver: damped Picard or fictitious play on the marginal
// flow. Each iteration best-responds every atom to the frozen flow state
// (HJB characteristics, optionally refined by transcription), then mixes the
// best-response flow into the iterate. Exploitability against the
// best-response flow's own couplings -- evaluated exactly -- is the primary
// convergence certificate; the flow delta is the secondary stop.
// ---------------------------------------------------------------------------

namespace detail {

inline MarginalFlow static_flow(const ParticleMeasure& atoms, const TimeGrid& grid) {
    std::vector<ParticleMeasure> slices(grid.nodes(), atoms);
    return MarginalFlow(grid, atoms.dim(), slices);
}

inline PathMeasure paths_to_measure(const ParticleMeasure& atoms, std::vector<Trajectory> paths,
                                    const TimeGrid& grid) {
    std::vector<PathParticle> parts(atoms.size());
    for (int i = 0; i < atoms.size(); ++i) {
        parts[i].initial.assign(atoms.point(i), atoms.point(i) + atoms.dim());
        // pin the starting node to the atom exactly
        std::copy(parts[i].initial.begin(), parts[i].initial.end(), paths[i].point(0));
        parts[i].path = std::move(paths[i]);
        parts[i].weight = atoms.weight(i);
    }
    return PathMeasure(grid, atoms.dim(), std::move(parts));
}

/// Monte Carlo error estimate for finite-N couplings: spread of the per-tuple
/// values at a few probe points of the final flow.
inline double mc_error_estimate(const ModelSpec& model, const MarginalFlow& flow) {
    double worst = 0.0;
    auto probe = [&](const CouplingSpec& c, const ParticleMeasure& slice) {
        if (!c.finite_n()) return;
        BoundCoupling bound(c, slice);
        int step = std::max(1, slice.size() / 4);
        for (int i = 0; i < slice.size(); i += step) {
            std::vector<double> vals = bound.tuple_values(slice.point(i));
            double mean = 0.0;
            for (double v : vals) mean += v;
            mean /= vals.size();
            double var = 0.0;
            for (double v : vals) var += (v - mean) * (v - mean);
            var /= std::max<size_t>(1, vals.size() - 1);
            worst = std::max(worst, std::sqrt(var / vals.size()));
        }
    };
    probe(model.running, flow.slice(flow.slices() / 2));
    probe(model.terminal, flow.slice(flow.slices() - 1));
    return worst;
}

}  // namespace detail

inline EquilibriumResult solve_equilibrium(const ModelSpec& model, const ParticleMeasure& atoms,
                                           const SolverParams& params, const Discretization& disc,
                                           const MarginalFlow* initial_flow = nullptr) {
    params.validate();
    require(atoms.dim() == model.dim, "solve_equilibrium: atom dimension mismatch");
    atoms.validate();

    TimeGrid tgrid(model.horizon, disc.n_t);
    SpaceGrid sgrid = make_space_grid(model, disc);
    int n = atoms.size();

    MarginalFlow start = initial_flow ? *initial_flow : detail::static_flow(atoms, tgrid);
    require(start.grid().same_as(tgrid), "solve_equilibrium: initial flow grid mismatch");
    MixtureFlow mixture(start, params.particle_budget);
    auto state = std::make_unique<TabulatedCouplingField>(model, start, sgrid);

    EquilibriumDiagnostics diag;
    std::vector<Trajectory> paths(n), chars(n);
    PathMeasure m_br;
    MarginalFlow rho_br;
    double final_exploit = std::numeric_limits<double>::infinity();
    bool converged = false;
    int iters_done = 0;

    for (int it = 0; it < params.max_iters; ++it) {
        IterationRecord rec;
        rec.iteration = it;

        HjbSolution hjb = solve_hjb_field(model, *state, sgrid, tgrid, disc);

        std::vector<long> clamp(n, 0);
        std::vector<int> nonconv(n, 0);
        std::vector<double> ccgap(n, 0.0);
        std::exception_ptr err;
        parallel_for(n, [&](long i) {
            try {
                std::vector<double> x0(atoms.point(static_cast<int>(i)),
                                       atoms.point(static_cast<int>(i)) + model.dim);
                CharacteristicResult ch = integrate_characteristic(x0, hjb.feedback);
                clamp[i] = ch.clamp_count;
                chars[i] = ch.path;
                if (params.backend == SolverParams::Backend::HjbCharacteristics) {
                    paths[i] = ch.path;
                    return;
                }
                BestResponse br = best_response_field(model, *state, tgrid, x0, &ch.path,
                                                      params.br_tol, params.br_max_iters);
                nonconv[i] = br.converged ? 0 : 1;
                paths[i] = br.path;
                if (params.backend == SolverParams::Backend::CrossCheck)
                    ccgap[i] = br.path.sup_distance(ch.path);
            } catch (...) {
                if (!err) err = std::current_exception();
            }
        });
        if (err) std::rethrow_exception(err);
        for (long c : clamp) rec.characteristic_clamps += c;
        for (int v : nonconv) rec.br_nonconverged += v;
        for (double g : ccgap) rec.cross_check_gap = std::max(rec.cross_check_gap, g);
        diag.clamp_total += rec.characteristic_clamps;

        m_br = detail::paths_to_measure(atoms, paths, tgrid);
        for (int i = 0; i < n; ++i) paths[i] = m_br.particle(i).path;
        rho_br = pushforward_marginals(m_br);

        // exact Nash certificate against the best-response flow's couplings;
        // warm starts: candidate path and this iteration's characteristic
        ExactCouplingField exact(model, rho_br);
        std::vector<const Trajectory*> warm(n);
        for (int i = 0; i < n; ++i) warm[i] = &chars[i];
        double eps_fast = exploitability_vs_field(model, exact, m_br, warm, params.br_tol,
                                                  params.br_max_iters);
        rec.exploitability = eps_fast;
        final_exploit = eps_fast;

        if (eps_fast <= params.eps_nash) {
            // confirm with a globalized pass (fresh HJB against the exact field)
            double eps_full = exploitability(model, m_br, rho_br, &disc, params.br_tol, true);
            rec.exploitability = eps_full;
            final_exploit = eps_full;
            if (eps_full <= params.eps_nash) {
                diag.trace.push_back(rec);
                converged = true;
                iters_done = it + 1;
                diag.stop_reason = "exploitability <= eps_nash";
                break;
            }
        }

        double w = params.scheme == SolverParams::Scheme::FictitiousPlay
                       ? 1.0 / (it + 1.0)
                       : params.damping;
        MixtureFlow before = mixture.snapshot();
        rec.truncated_mass = mixture.mix(rho_br, w);
        diag.truncated_mass_max = std::max(diag.truncated_mass_max, rec.truncated_mass);
        rec.flow_delta = mixture.sup_distance(before);
        diag.trace.push_back(rec);
        iters_done = it + 1;

        if (it > 0 && rec.flow_delta <= params.eps_stop) {
            final_exploit = exploitability(model, m_br, rho_br, &disc, params.br_tol, true);
            converged = final_exploit <= params.eps_nash;
            diag.stop_reason = converged ? "flow delta <= eps_stop"
                                         : "flow stagnated above eps_nash";
            break;
        }

        TabulatedCouplingField br_state(model, rho_br, sgrid);
        state->mix_in(br_state, w);
    }

    if (diag.stop_reason.empty()) {
        final_exploit = exploitability(model, m_br, rho_br, &disc, params.br_tol, true);
        converged = final_exploit <= params.eps_nash;
        diag.stop_reason = converged ? "max_iters with certificate satisfied"
                                     : "max_iters without certificate";
    }
    diag.mc_error_estimate = detail::mc_error_estimate(model, rho_br);

    // value function and feedback of the equilibrium flow, exact couplings
    ExactCouplingField exact(model, rho_br);
    HjbSolution final_hjb = solve_hjb_field(model, exact, sgrid, tgrid, disc);

    EquilibriumResult res;
    res.measure = std::move(m_br);
    res.flow = std::move(rho_br);
    res.value = std::move(final_hjb.value);
    res.feedback = std::move(final_hjb.feedback);
    res.exploitability = final_exploit;
    res.iterations = iters_done;
    res.converged = converged;
    res.diagnostics = std::move(diag);
    return res;
}

// ---------------------------------------------------------------------------
// Limit MFG and N-player wrappers.
// ---------------------------------------------------------------------------

/// Atoms of m_0 for the limit solve: deterministic quadrature for analytic
/// laws, the stored atoms for weighted-samples laws.
inline ParticleMeasure limit_atoms(const ModelSpec& model, int n_particles) {
    if (model.initial.kind() == InitialLaw::Kind::WeightedSamples)
        return model.initial.stored_atoms();
    return model.initial.quadrature(n_particles);
}

inline EquilibriumResult solve_mfg(const ModelSpec& model, int n_particles,
                                   const SolverParams& params, const Discretization& disc) {
    return solve_equilibrium(model, limit_atoms(model, n_particles), params, disc);
}

enum class AtomMode { Shared, Sampled };

/// Symmetric N-player equilibrium: the couplings become the finite-player
/// averages f_N, g_N. In shared mode the initial atoms are the same
/// deterministic quadrature atoms as the limit solve (isolating the f_N - f
/// effect); sampled mode draws N i.i.d. initial positions.
inline EquilibriumResult solve_mfg_n(const ModelSpec& model, int players,
                                     const SolverParams& params, const Discretization& disc,
                                     AtomMode mode = AtomMode::Shared, int n_particles = 128) {
    require(players >= 2, "solve_mfg_n: N must be >= 2");
    ModelSpec game = model;
    game.running = coupling_finite_n(model.running, players, params.mc_tuples, params.seed);
    game.terminal = coupling_finite_n(model.terminal, players, params.mc_tuples, params.seed);
    ParticleMeasure atoms =
        mode == AtomMode::Shared
            ? limit_atoms(model, n_particles)
            : ParticleMeasure(model.dim, model.initial.sample(players, params.seed),
                              std::vector<double>(players, 1.0 / players));
    return solve_equilibrium(game, atoms, params, disc);
}

// ---------------------------------------------------------------------------
// Multi-start wrapper for non-monotone couplings: runs from several seeded
// initial flows and reports the distinct equilibria found (flows farther than
// 10 * eps_stop apart).
// ---------------------------------------------------------------------------

struct MultiStartResult {
    EquilibriumResult best;                 // lowest exploitability
    std::vector<EquilibriumResult> distinct;
    int starts = 0;
};

inline MultiStartResult solve_equilibrium_multistart(const ModelSpec& model,
                                                     const ParticleMeasure& atoms,
                                                     const SolverParams& params,
                                                     const Discretization& disc) {
    params.validate();
    TimeGrid tgrid(model.horizon, disc.n_t);
    MultiStartResult out;
    out.starts = params.multistart;
    std::vector<EquilibriumResult> results;
    for (int s = 0; s < params.multistart; ++s) {
        EquilibriumResult r;
        if (s == 0) {
            r = solve_equilibrium(model, atoms, params, disc);
        } else {
            // straight-line initial flow with seeded per-atom drifts
            std::vector<PathParticle> parts(atoms.size());
            for (int i = 0; i < atoms.size(); ++i) {
                Rng rng(params.seed, {0x57a7ULL, static_cast<uint64_t>(s),
                                      static_cast<uint64_t>(i)});
                std::vector<double> v(model.dim);
                for (int k = 0; k < model.dim; ++k)
                    v[k] = rng.uniform(-0.5, 0.5) * model.velocity_bound;
                Trajectory tr(tgrid, model.dim);
                for (int k = 0; k < tgrid.nodes(); ++k)
                    for (int c = 0; c < model.dim; ++c)
                        tr.point(k)[c] = atoms.point(i)[c] + tgrid.node(k) * v[c];
                parts[i] = {std::vector<double>(atoms.point(i), atoms.point(i) + model.dim),
                            std::move(tr), atoms.weight(i)};
            }
            PathMeasure init(tgrid, model.dim, std::move(parts));
            MarginalFlow init_flow = pushforward_marginals(init);
            r = solve_equilibrium(model, atoms, params, disc, &init_flow);
        }
        results.push_back(std::move(r));
    }
    // dedup by flow distance
    for (const auto& r : results) {
        bool fresh = true;
        for (const auto& d : out.distinct)
            if (flow_distance(r.flow, d.flow).sup <= 10.0 * params.eps_stop) {
                fresh = false;
                break;
            }
        if (fresh) out.distinct.push_back(r);
    }
    out.best = results[0];
    for (const auto& r : results)
        if (r.exploitability < out.best.exploitability) out.best = r;
    return out;
}

// ---------------------------------------------------------------------------
// Statistical checks from the convergence proof.
// ---------------------------------------------------------------------------

/// Bounded path functionals psi(gamma) = phi(gamma(t)) used by the law-of-
/// large-numbers variance check.
struct TestFunction {
    enum class Kind { ClampedLinear, GaussBump };
    Kind kind = Kind::ClampedLinear;
    double t = 0.0;
    std::vector<double> center;  // bump center / linear offset
    double scale = 1.0;          // linear slope scale / bump width
    std::string id;

    double eval(const Trajectory& gamma) const {
        std::vector<double> x = gamma.at(t);
        int d = static_cast<int>(x.size());
        if (kind == Kind::ClampedLinear) {
            double s = 0.0;
            for (int i = 0; i < d; ++i) s += (x[i] - center[i]) * scale;
            return std::clamp(s, -1.0, 1.0);
        }
        double q = 0.0;
        for (int i = 0; i < d; ++i) {
            double z = x[i] - center[i];
            q += z * z;
        }
        return std::exp(-q / (2.0 * scale * scale));
    }
};

/// Default family: a clamped linear and a gaussian bump at each of a coarse
/// set of times.
inline std::vector<TestFunction> default_test_family(const ModelSpec& model) {
    std::vector<TestFunction> fam;
    std::vector<double> center(model.dim);
    double width = 0.0;
    for (int i = 0; i < model.dim; ++i) {
        center[i] = 0.5 * (model.box.lo[i] + model.box.hi[i]);
        width = std::max(width, model.box.width(i));
    }
    for (double frac : {0.0, 0.5, 1.0}) {
        TestFunction lin;
        lin.kind = TestFunction::Kind::ClampedLinear;
        lin.t = frac * model.horizon;
        lin.center = center;
        lin.scale = 2.0 / width;
        lin.id = "lin@t" + format_double(frac);
        fam.push_back(lin);
        TestFunction bump;
        bump.kind = TestFunction::Kind::GaussBump;
        bump.t = frac * model.horizon;
        bump.center = center;
        bump.scale = width / 4.0;
        bump.id = "bump@t" + format_double(frac);
        fam.push_back(bump);
    }
    return fam;
}

struct LlnRow {
    std::string psi_id;
    int players = 0;
    double v_hat = 0.0;        // empirical variance of the (N-1)-average
    double var_oracle = 0.0;   // Var_{m}(psi), exact from atom weights
};

/// Empirical check of the variance identity v_psi^N = Var(psi)/(N-1): draws
/// `reps` independent (N-1)-tuples of paths i.i.d. from m (atom resampling by
/// weight) and returns the empirical variance of the tuple average around the
/// exact mean.
inline std::vector<LlnRow> lln_variance_check(const PathMeasure& m,
                                              const std::vector<TestFunction>& family, int players,
                                              int reps, uint64_t seed) {
    require(players >= 2, "lln_variance_check: N must be >= 2");
    require(reps >= 2, "lln_variance_check: reps must be >= 2");
    int n = m.size();
    int nf = static_cast<int>(family.size());
    // per-atom psi values and exact moments
    std::vector<std::vector<double>> psi(nf, std::vector<double>(n));
    std::vector<double> mean(nf, 0.0), var(nf, 0.0);
    for (int f = 0; f < nf; ++f) {
        for (int i = 0; i < n; ++i) psi[f][i] = family[f].eval(m.particle(i).path);
        for (int i = 0; i < n; ++i) mean[f] += m.particle(i).weight * psi[f][i];
        for (int i = 0; i < n; ++i) {
            double z = psi[f][i] - mean[f];
            var[f] += m.particle(i).weight * z * z;
        }
    }
    // weight prefix for resampling
    std::vector<double> prefix(n);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += m.particle(i).weight;
        prefix[i] = acc;
    }
    int opp = players - 1;
    std::vector<double> sq(nf, 0.0);
    for (int r = 0; r < reps; ++r) {
        Rng rng(seed, {0x11aULL, static_cast<uint64_t>(players), static_cast<uint64_t>(r)});
        std::vector<double> sums(nf, 0.0);
        for (int j = 0; j < opp; ++j) {
            double u = rng.unit() * acc;
            int idx = static_cast<int>(std::lower_bound(prefix.begin(), prefix.end(), u) -
                                       prefix.begin());
            idx = std::min(idx, n - 1);
            for (int f = 0; f < nf; ++f) sums[f] += psi[f][idx];
        }
        for (int f = 0; f < nf; ++f) {
            double z = sums[f] / opp - mean[f];
            sq[f] += z * z;
        }
    }
    std::vector<LlnRow> rows(nf);
    for (int f = 0; f < nf; ++f) {
        rows[f].psi_id = family[f].id;
        rows[f].players = players;
        rows[f].v_hat = sq[f] / reps;
        rows[f].var_oracle = var[f];
    }
    return rows;
}

struct DensityReport {
    double max_norm = 0.0;            // max over t of the discrete L^p norm
    double initial_norm = 0.0;        // ||m_{0,h}||_p from slice 0
    double ratio = 0.0;               // max_norm / initial_norm
    std::vector<double> per_slice;
};

/// Histogram L^p bound check for the marginal densities (p in {2, inf}).
inline DensityReport density_lp_check(const MarginalFlow& flow, double p, int bins,
                                      const Box& box) {
    require(bins >= 1, "density_lp_check: bins must be >= 1");
    require(p == 2.0 || std::isinf(p), "density_lp_check: p must be 2 or inf");
    int d = flow.dim();
    require(d == box.dim(), "density_lp_check: box dimension mismatch");
    long cells = 1;
    for (int i = 0; i < d; ++i) cells *= bins;
    double cell_vol = 1.0;
    for (int i = 0; i < d; ++i) cell_vol *= box.width(i) / bins;
    DensityReport rep;
    rep.per_slice.resize(flow.slices());
    std::vector<double> hist(cells);
    for (int k = 0; k < flow.slices(); ++k) {
        std::fill(hist.begin(), hist.end(), 0.0);
        const ParticleMeasure& s = flow.slice(k);
        for (int i = 0; i < s.size(); ++i) {
            long cell = 0;
            for (int a = 0; a < d; ++a) {
                double th = (s.point(i)[a] - box.lo[a]) / box.width(a);
                int c = std::clamp(static_cast<int>(th * bins), 0, bins - 1);
                cell = cell * bins + c;
            }
            hist[cell] += s.weight(i);
        }
        double norm = 0.0;
        if (std::isinf(p)) {
            for (double m : hist) norm = std::max(norm, m / cell_vol);
        } else {
            for (double m : hist) norm += (m / cell_vol) * (m / cell_vol) * cell_vol;
            norm = std::sqrt(norm);
        }
        rep.per_slice[k] = norm;
        rep.max_norm = std::max(rep.max_norm, norm);
    }
    rep.initial_norm = rep.per_slice[0];
    rep.ratio = rep.initial_norm > 0.0 ? rep.max_norm / rep.initial_norm : 0.0;
    return rep;
}

}  // namespace mfg
