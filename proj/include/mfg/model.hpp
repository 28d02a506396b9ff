#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/expressions.hpp"
#include "mfg/measures.hpp"
#include "mfg/rng.hpp"

namespace mfg {

namespace detail {

/// Solve a small dense SPD-ish system in place (Gaussian elimination with
/// partial pivoting). A is d*d row-major, b is overwritten with the solution.
inline void solve_dense(std::vector<double>& A, std::vector<double>& b, int d) {
    for (int col = 0; col < d; ++col) {
        int piv = col;
        for (int r = col + 1; r < d; ++r)
            if (std::abs(A[r * d + col]) > std::abs(A[piv * d + col])) piv = r;
        if (piv != col) {
            for (int c = 0; c < d; ++c) std::swap(A[col * d + c], A[piv * d + c]);
            std::swap(b[col], b[piv]);
        }
        double diag = A[col * d + col];
        require(std::abs(diag) > 1e-300, "singular Hessian in Newton step");
        for (int r = col + 1; r < d; ++r) {
            double f = A[r * d + col] / diag;
            for (int c = col; c < d; ++c) A[r * d + c] -= f * A[col * d + c];
            b[r] -= f * b[col];
        }
    }
    for (int r = d - 1; r >= 0; --r) {
        double s = b[r];
        for (int c = r + 1; c < d; ++c) s -= A[r * d + c] * b[c];
        b[r] = s / A[r * d + r];
    }
}

/// Uniform probe lattice over a box, per_axis points per axis (d <= 3 use).
inline std::vector<std::vector<double>> probe_grid(const Box& box, int per_axis) {
    int d = box.dim();
    long total = 1;
    for (int i = 0; i < d; ++i) total *= per_axis;
    std::vector<std::vector<double>> pts;
    pts.reserve(total);
    std::vector<int> idx(d, 0);
    for (long n = 0; n < total; ++n) {
        std::vector<double> x(d);
        for (int i = 0; i < d; ++i) {
            double th = per_axis == 1 ? 0.5 : double(idx[i]) / (per_axis - 1);
            x[i] = box.lo[i] + th * (box.hi[i] - box.lo[i]);
        }
        pts.push_back(std::move(x));
        for (int i = d - 1; i >= 0; --i) {
            if (++idx[i] < per_axis) break;
            idx[i] = 0;
        }
    }
    return pts;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// LagrangianSpec: running kinetic cost L(alpha, x), strictly convex in alpha.
// The quadratic kind is L = b1(x)|alpha|^2 + b2(x) with b1 > 0; the custom
// kind supplies evaluators plus declared lower bounds (used when deriving the
// velocity bound).
// ---------------------------------------------------------------------------

class LagrangianSpec {
public:
    enum class Kind { Quadratic, Custom };

    using EvalFn = std::function<double(const double* alpha, const double* x, int dim)>;
    using GradFn = std::function<void(const double* alpha, const double* x, int dim, double* out)>;
    using HessFn = std::function<void(const double* alpha, const double* x, int dim, double* out)>;

    static LagrangianSpec quadratic(Expr b1, Expr b2) {
        LagrangianSpec s;
        s.kind_ = Kind::Quadratic;
        s.b1_ = std::move(b1);
        s.b2_ = std::move(b2);
        return s;
    }

    /// Custom Lagrangian. `lower_quad` and `lower_offset` declare the bound
    /// L >= lower_quad*|alpha|^2 - lower_offset; `convexity` declares the
    /// alpha-Hessian lower eigenvalue c_L (both spot-checked in tests).
    static LagrangianSpec custom(EvalFn L, GradFn grad_alpha, HessFn hess_alpha, double lower_quad,
                                 double lower_offset, double convexity) {
        LagrangianSpec s;
        s.kind_ = Kind::Custom;
        s.eval_ = std::move(L);
        s.grad_alpha_ = std::move(grad_alpha);
        s.hess_alpha_ = std::move(hess_alpha);
        require(lower_quad > 0.0 && convexity > 0.0,
                "LagrangianSpec: custom kind needs positive lower bounds");
        s.lower_quad_ = lower_quad;
        s.lower_offset_ = lower_offset;
        s.convexity_ = convexity;
        return s;
    }

    Kind kind() const { return kind_; }
    const Expr& b1() const { return b1_; }
    const Expr& b2() const { return b2_; }

    double eval(const double* alpha, const double* x, int dim) const {
        if (kind_ == Kind::Quadratic)
            return b1_.eval(x, dim) * norm2_sq(alpha, dim) + b2_.eval(x, dim);
        return eval_(alpha, x, dim);
    }

    void grad_alpha(const double* alpha, const double* x, int dim, double* out) const {
        if (kind_ == Kind::Quadratic) {
            double c = 2.0 * b1_.eval(x, dim);
            for (int i = 0; i < dim; ++i) out[i] = c * alpha[i];
            return;
        }
        grad_alpha_(alpha, x, dim, out);
    }

    void hess_alpha(const double* alpha, const double* x, int dim, double* out) const {
        if (kind_ == Kind::Quadratic) {
            double c = 2.0 * b1_.eval(x, dim);
            for (int i = 0; i < dim * dim; ++i) out[i] = 0.0;
            for (int i = 0; i < dim; ++i) out[i * dim + i] = c;
            return;
        }
        hess_alpha_(alpha, x, dim, out);
    }

    /// d/dx L(alpha, x); central finite differences for the custom kind.
    void grad_x(const double* alpha, const double* x, int dim, double* out) const {
        if (kind_ == Kind::Quadratic) {
            double a2 = norm2_sq(alpha, dim);
            std::vector<double> g1(dim), g2(dim);
            b1_.grad(x, dim, g1.data());
            b2_.grad(x, dim, g2.data());
            for (int i = 0; i < dim; ++i) out[i] = g1[i] * a2 + g2[i];
            return;
        }
        const double h = 1e-6;
        std::vector<double> xp(x, x + dim);
        for (int i = 0; i < dim; ++i) {
            xp[i] = x[i] + h;
            double up = eval_(alpha, xp.data(), dim);
            xp[i] = x[i] - h;
            double dn = eval_(alpha, xp.data(), dim);
            xp[i] = x[i];
            out[i] = (up - dn) / (2.0 * h);
        }
    }

    /// Lower-bound constants (L >= lower_quad*|a|^2 - lower_offset) on a box.
    double lower_quad(const Box& box, int dim) const {
        if (kind_ == Kind::Custom) return lower_quad_;
        double lo = std::numeric_limits<double>::infinity();
        for (const auto& x : detail::probe_grid(box, dim == 1 ? 65 : 17))
            lo = std::min(lo, b1_.eval(x.data(), dim));
        require(lo > 0.0, "LagrangianSpec: b1 must stay positive on the trajectory box");
        return lo;
    }

    double lower_offset(const Box& box, int dim) const {
        if (kind_ == Kind::Custom) return lower_offset_;
        double lo = std::numeric_limits<double>::infinity();
        for (const auto& x : detail::probe_grid(box, dim == 1 ? 65 : 17))
            lo = std::min(lo, b2_.eval(x.data(), dim));
        return std::max(0.0, -lo);
    }

    double convexity() const { return convexity_; }

private:
    Kind kind_ = Kind::Quadratic;
    Expr b1_ = Expr::constant(0.5);
    Expr b2_ = Expr::constant(0.0);
    EvalFn eval_;
    GradFn grad_alpha_;
    HessFn hess_alpha_;
    double lower_quad_ = 0.0;
    double lower_offset_ = 0.0;
    double convexity_ = 1.0;
};

inline double lagrangian_eval(const LagrangianSpec& L, const std::vector<double>& alpha,
                              const std::vector<double>& x) {
    return L.eval(alpha.data(), x.data(), static_cast<int>(x.size()));
}

// ---------------------------------------------------------------------------
// HamiltonianSpec: convex conjugate H(xi, x) = sup_a { xi.a - L(a, x) }.
// Quadratic kind in closed form; custom kind solved by Newton on
// grad_a L(a, x) = xi.
// ---------------------------------------------------------------------------

class HamiltonianSpec {
public:
    explicit HamiltonianSpec(const LagrangianSpec& L, double tol = 1e-10, int max_iters = 60)
        : lagr_(&L), tol_(tol), max_iters_(max_iters) {}

    const LagrangianSpec& lagrangian() const { return *lagr_; }
    double tol() const { return tol_; }

    double eval(const double* xi, const double* x, int dim) const {
        if (lagr_->kind() == LagrangianSpec::Kind::Quadratic) {
            double b1 = lagr_->b1().eval(x, dim);
            return norm2_sq(xi, dim) / (4.0 * b1) - lagr_->b2().eval(x, dim);
        }
        std::vector<double> a = maximizer(xi, x, dim);
        return dot(xi, a.data(), dim) - lagr_->eval(a.data(), x, dim);
    }

    /// The maximizing velocity, i.e. d/dxi H(xi, x).
    std::vector<double> grad(const double* xi, const double* x, int dim) const {
        if (lagr_->kind() == LagrangianSpec::Kind::Quadratic) {
            double b1 = lagr_->b1().eval(x, dim);
            std::vector<double> out(dim);
            for (int i = 0; i < dim; ++i) out[i] = xi[i] / (2.0 * b1);
            return out;
        }
        return maximizer(xi, x, dim);
    }

private:
    std::vector<double> maximizer(const double* xi, const double* x, int dim) const {
        std::vector<double> a(dim, 0.0), g(dim), h(static_cast<size_t>(dim) * dim), step(dim);
        for (int it = 0; it < max_iters_; ++it) {
            lagr_->grad_alpha(a.data(), x, dim, g.data());
            double res = 0.0;
            for (int i = 0; i < dim; ++i) {
                step[i] = g[i] - xi[i];
                res = std::max(res, std::abs(step[i]));
            }
            if (res <= tol_) return a;
            lagr_->hess_alpha(a.data(), x, dim, h.data());
            std::vector<double> A = h;
            detail::solve_dense(A, step, dim);
            for (int i = 0; i < dim; ++i) a[i] -= step[i];
        }
        throw solver_error("Hamiltonian Newton did not converge: |grad L - xi| > " +
                           format_double(tol_) + " after " + std::to_string(max_iters_) +
                           " iterations at xi[0]=" + format_double(xi[0]));
    }

    const LagrangianSpec* lagr_;
    double tol_;
    int max_iters_;
};

inline double hamiltonian_eval(const HamiltonianSpec& H, const std::vector<double>& xi,
                               const std::vector<double>& x) {
    return H.eval(xi.data(), x.data(), static_cast<int>(x.size()));
}

inline std::vector<double> hamiltonian_grad(const HamiltonianSpec& H, const std::vector<double>& xi,
                                            const std::vector<double>& x) {
    return H.grad(xi.data(), x.data(), static_cast<int>(x.size()));
}

// ---------------------------------------------------------------------------
// CouplingSpec: mean-field cost couplings f(x, mu) / g(x, mu).
//
//   linear-integral   sum_i w_i phi(x, y_i), phi from a small kernel set
//   kde-congestion    c_f * sum_i w_i exp(-|x - y_i|^2 / (2 sigma^2))
//   mean-attraction   c_a * |x - mean(mu)|^2
//   none              measure-independent
//
// Every kind accepts an additive potential V(x) (an Expr); the kde kernel is
// deliberately unnormalized so its C^2 norm stays bounded uniformly in mu.
// A finite-player wrap (coupling_finite_n) replaces the measure argument by an
// average over frozen (N-1)-tuples of i.i.d. draws.
// ---------------------------------------------------------------------------

class BoundCoupling;

class CouplingSpec {
public:
    enum class Kind { None, LinearIntegral, KdeCongestion, MeanAttraction };
    enum class KernelKind { Gauss, SqDist, AbsDist };

    static CouplingSpec none() { return CouplingSpec{}; }

    static CouplingSpec potential_only(Expr V) {
        CouplingSpec c;
        c.potential_ = std::move(V);
        c.has_potential_ = true;
        c.monotone_ = true;  // constant in mu, pairing is identically zero
        return c;
    }

    static CouplingSpec linear_integral(KernelKind kernel, double amp, double sigma,
                                        bool monotone) {
        CouplingSpec c;
        c.kind_ = Kind::LinearIntegral;
        c.kernel_ = kernel;
        c.amp_ = amp;
        c.sigma_ = sigma;
        if (kernel == KernelKind::Gauss) require(sigma > 0.0, "coupling: kernel width must be > 0");
        c.monotone_ = monotone;
        return c;
    }

    static CouplingSpec kde_congestion(double amplitude, double bandwidth, bool monotone = true) {
        CouplingSpec c;
        c.kind_ = Kind::KdeCongestion;
        c.amp_ = amplitude;
        c.sigma_ = bandwidth;
        require(bandwidth > 0.0, "coupling: kde bandwidth must be > 0");
        c.monotone_ = monotone;
        return c;
    }

    static CouplingSpec mean_attraction(double amplitude, bool monotone = false) {
        CouplingSpec c;
        c.kind_ = Kind::MeanAttraction;
        c.amp_ = amplitude;
        c.monotone_ = monotone;
        return c;
    }

    CouplingSpec with_potential(Expr V) const {
        CouplingSpec c = *this;
        c.potential_ = std::move(V);
        c.has_potential_ = true;
        return c;
    }

    Kind kind() const { return kind_; }
    KernelKind kernel() const { return kernel_; }
    double amplitude() const { return amp_; }
    double bandwidth() const { return sigma_; }
    bool monotone_declared() const { return monotone_; }
    bool has_potential() const { return has_potential_; }
    const Expr& potential() const { return potential_; }
    bool measure_independent() const { return kind_ == Kind::None; }
    bool finite_n() const { return finite_n_; }
    int finite_players() const { return fn_players_; }
    int finite_tuples() const { return fn_tuples_; }
    uint64_t finite_seed() const { return fn_seed_; }

    double kernel_eval(const double* x, const double* y, int dim) const {
        switch (kernel_) {
            case KernelKind::Gauss: {
                double s = 0.0;
                for (int i = 0; i < dim; ++i) {
                    double z = x[i] - y[i];
                    s += z * z;
                }
                return amp_ * std::exp(-s / (2.0 * sigma_ * sigma_));
            }
            case KernelKind::SqDist: {
                double s = 0.0;
                for (int i = 0; i < dim; ++i) {
                    double z = x[i] - y[i];
                    s += z * z;
                }
                return amp_ * s;
            }
            case KernelKind::AbsDist:
                return amp_ * dist2(x, y, dim);
        }
        return 0.0;
    }

    void kernel_grad_x(const double* x, const double* y, int dim, double* out) const {
        switch (kernel_) {
            case KernelKind::Gauss: {
                double s = 0.0;
                for (int i = 0; i < dim; ++i) {
                    double z = x[i] - y[i];
                    s += z * z;
                }
                double w2 = sigma_ * sigma_;
                double e = amp_ * std::exp(-s / (2.0 * w2));
                for (int i = 0; i < dim; ++i) out[i] += e * (-(x[i] - y[i]) / w2);
                return;
            }
            case KernelKind::SqDist:
                for (int i = 0; i < dim; ++i) out[i] += amp_ * 2.0 * (x[i] - y[i]);
                return;
            case KernelKind::AbsDist: {
                double r = dist2(x, y, dim);
                if (r < 1e-300) return;
                for (int i = 0; i < dim; ++i) out[i] += amp_ * (x[i] - y[i]) / r;
                return;
            }
        }
    }

    /// Pointwise bounds of the mu-dependent part over measures supported in
    /// `support`; used when deriving the velocity bound.
    double upper_bound(const double* x, int dim, const Box& support) const {
        double v = has_potential_ ? potential_.eval(x, dim) : 0.0;
        switch (kind_) {
            case Kind::None:
                return v;
            case Kind::KdeCongestion:
                return v + std::max(0.0, amp_);
            case Kind::LinearIntegral: {
                double up = -std::numeric_limits<double>::infinity();
                for (const auto& y : detail::probe_grid(support, dim == 1 ? 33 : 9))
                    up = std::max(up, kernel_eval(x, y.data(), dim));
                return v + up;
            }
            case Kind::MeanAttraction: {
                double far = 0.0;
                for (const auto& y : detail::probe_grid(support, 2))  // corners
                    far = std::max(far, norm2_sq(x, dim) - 2.0 * dot(x, y.data(), dim) +
                                            norm2_sq(y.data(), dim));
                return v + std::max(0.0, amp_) * far;
            }
        }
        return v;
    }

    double lower_bound(const double* x, int dim, const Box& support) const {
        double v = has_potential_ ? potential_.eval(x, dim) : 0.0;
        switch (kind_) {
            case Kind::None:
                return v;
            case Kind::KdeCongestion:
                return v + std::min(0.0, amp_);
            case Kind::LinearIntegral: {
                double lo = std::numeric_limits<double>::infinity();
                for (const auto& y : detail::probe_grid(support, dim == 1 ? 33 : 9))
                    lo = std::min(lo, kernel_eval(x, y.data(), dim));
                return v + lo;
            }
            case Kind::MeanAttraction:
                return v + std::min(0.0, amp_);  // distance can vanish
        }
        return v;
    }

private:
    friend class BoundCoupling;
    friend CouplingSpec coupling_finite_n(const CouplingSpec&, int, int, uint64_t);

    Kind kind_ = Kind::None;
    KernelKind kernel_ = KernelKind::Gauss;
    double amp_ = 0.0;
    double sigma_ = 1.0;
    bool monotone_ = true;
    bool has_potential_ = false;
    Expr potential_;
    // finite-N wrap
    bool finite_n_ = false;
    int fn_players_ = 0;
    int fn_tuples_ = 0;
    uint64_t fn_seed_ = 0;
};

/// Finite-player effective coupling h_N: averages h against the empirical
/// measure of (N-1) i.i.d. draws over M frozen tuples. The tuples depend only
/// on (seed, M, N) and the atom weights -- common random numbers across
/// fixed-point iterations -- so the wrapped map stays deterministic. For the
/// linear-integral kind the expectation is exact by linearity and the coupling
/// is returned unchanged.
inline CouplingSpec coupling_finite_n(const CouplingSpec& c, int players, int tuples,
                                      uint64_t seed) {
    require(players >= 2, "coupling_finite_n: N must be >= 2");
    require(tuples >= 1, "coupling_finite_n: M must be >= 1");
    if (c.kind() == CouplingSpec::Kind::LinearIntegral || c.kind() == CouplingSpec::Kind::None)
        return c;
    CouplingSpec out = c;
    out.finite_n_ = true;
    out.fn_players_ = players;
    out.fn_tuples_ = tuples;
    out.fn_seed_ = seed;
    return out;
}

// ---------------------------------------------------------------------------
// BoundCoupling: a coupling evaluated against one fixed particle measure.
// Binding precomputes whatever the kind needs (resampled atom counts for
// finite-N kinds, the mean for mean-attraction) so bulk evaluation is cheap.
// ---------------------------------------------------------------------------

class BoundCoupling {
public:
    BoundCoupling(const CouplingSpec& c, const ParticleMeasure& mu) : spec_(&c), mu_(&mu) {
        int n = mu.size();
        if (c.finite_n_) {
            // Frozen multinomial draws: tuple m, opponent j -> atom index.
            counts_.assign(n, 0.0);
            std::vector<double> prefix;
            bool uniform = true;
            for (int i = 0; i < n && uniform; ++i)
                uniform = std::abs(mu.weight(i) - 1.0 / n) <= 1e-15;
            if (!uniform) {
                prefix.resize(n);
                double s = 0.0;
                for (int i = 0; i < n; ++i) {
                    s += mu.weight(i);
                    prefix[i] = s;
                }
            }
            int opp = c.fn_players_ - 1;
            tuple_members_.assign(static_cast<size_t>(c.fn_tuples_) * opp, 0);
            for (int m = 0; m < c.fn_tuples_; ++m) {
                for (int j = 0; j < opp; ++j) {
                    double u = Rng(c.fn_seed_, {0xf17eULL, static_cast<uint64_t>(m),
                                                static_cast<uint64_t>(j)})
                                   .unit();
                    int idx;
                    if (uniform) {
                        idx = std::min(static_cast<int>(u * n), n - 1);
                    } else {
                        idx = static_cast<int>(std::lower_bound(prefix.begin(), prefix.end(),
                                                                u * prefix.back()) -
                                               prefix.begin());
                        idx = std::min(idx, n - 1);
                    }
                    tuple_members_[static_cast<size_t>(m) * opp + j] = idx;
                    counts_[idx] += 1.0;
                }
            }
            double total = static_cast<double>(c.fn_tuples_) * opp;
            for (double& w : counts_) w /= total;
        }
        if (c.kind_ == CouplingSpec::Kind::MeanAttraction) {
            int d = mu.dim();
            mean_.assign(d, 0.0);
            spread_ = 0.0;
            if (c.finite_n_) {
                // Average of |x - mean_m|^2 over tuples m equals
                // |x - mhat|^2 + spread, with mhat the tuple-mean average.
                int opp = c.fn_players_ - 1;
                std::vector<double> tm(d);
                double sq = 0.0;
                for (int m = 0; m < c.fn_tuples_; ++m) {
                    std::fill(tm.begin(), tm.end(), 0.0);
                    for (int j = 0; j < opp; ++j) {
                        const double* p = mu.point(tuple_members_[static_cast<size_t>(m) * opp + j]);
                        for (int i = 0; i < d; ++i) tm[i] += p[i];
                    }
                    for (int i = 0; i < d; ++i) {
                        tm[i] /= opp;
                        mean_[i] += tm[i] / c.fn_tuples_;
                    }
                    sq += norm2_sq(tm.data(), d) / c.fn_tuples_;
                }
                spread_ = sq - norm2_sq(mean_.data(), d);
            } else {
                mean_ = mu.mean();
            }
        }
    }

    double value(const double* x) const {
        const CouplingSpec& c = *spec_;
        int d = mu_->dim();
        double v = c.has_potential_ ? c.potential_.eval(x, d) : 0.0;
        switch (c.kind_) {
            case CouplingSpec::Kind::None:
                break;
            case CouplingSpec::Kind::LinearIntegral:
                for (int i = 0; i < mu_->size(); ++i)
                    v += mu_->weight(i) * c.kernel_eval(x, mu_->point(i), d);
                break;
            case CouplingSpec::Kind::KdeCongestion: {
                double inv2s2 = 1.0 / (2.0 * c.sigma_ * c.sigma_);
                double s = 0.0;
                for (int i = 0; i < mu_->size(); ++i) {
                    double w = c.finite_n_ ? counts_[i] : mu_->weight(i);
                    if (w == 0.0) continue;
                    double q = 0.0;
                    const double* y = mu_->point(i);
                    for (int k = 0; k < d; ++k) {
                        double z = x[k] - y[k];
                        q += z * z;
                    }
                    s += w * std::exp(-q * inv2s2);
                }
                v += c.amp_ * s;
                break;
            }
            case CouplingSpec::Kind::MeanAttraction: {
                double q = 0.0;
                for (int k = 0; k < d; ++k) {
                    double z = x[k] - mean_[k];
                    q += z * z;
                }
                v += c.amp_ * (q + spread_);
                break;
            }
        }
        return v;
    }

    void grad(const double* x, double* out) const {
        const CouplingSpec& c = *spec_;
        int d = mu_->dim();
        for (int i = 0; i < d; ++i) out[i] = 0.0;
        if (c.has_potential_) c.potential_.grad(x, d, out);
        switch (c.kind_) {
            case CouplingSpec::Kind::None:
                break;
            case CouplingSpec::Kind::LinearIntegral: {
                std::vector<double> g(d, 0.0);
                for (int i = 0; i < mu_->size(); ++i) {
                    std::fill(g.begin(), g.end(), 0.0);
                    c.kernel_grad_x(x, mu_->point(i), d, g.data());
                    for (int k = 0; k < d; ++k) out[k] += mu_->weight(i) * g[k];
                }
                break;
            }
            case CouplingSpec::Kind::KdeCongestion: {
                double inv_s2 = 1.0 / (c.sigma_ * c.sigma_);
                for (int i = 0; i < mu_->size(); ++i) {
                    double w = c.finite_n_ ? counts_[i] : mu_->weight(i);
                    if (w == 0.0) continue;
                    const double* y = mu_->point(i);
                    double q = 0.0;
                    for (int k = 0; k < d; ++k) {
                        double z = x[k] - y[k];
                        q += z * z;
                    }
                    double e = c.amp_ * w * std::exp(-0.5 * q * inv_s2);
                    for (int k = 0; k < d; ++k) out[k] -= e * (x[k] - y[k]) * inv_s2;
                }
                break;
            }
            case CouplingSpec::Kind::MeanAttraction:
                for (int k = 0; k < d; ++k) out[k] += 2.0 * c.amp_ * (x[k] - mean_[k]);
                break;
        }
    }

    /// Mean-attraction statistics: the wrapped coupling evaluates to
    /// amplitude * (|x - mean|^2 + spread) plus the potential.
    const std::vector<double>& attraction_mean() const {
        require(spec_->kind_ == CouplingSpec::Kind::MeanAttraction,
                "attraction_mean: not a mean-attraction coupling");
        return mean_;
    }
    double attraction_spread() const { return spread_; }

    /// Per-tuple values h(x, empirical_m) for finite-N kinds; the spread of
    /// these is the Monte Carlo error estimate reported in diagnostics.
    std::vector<double> tuple_values(const double* x) const {
        const CouplingSpec& c = *spec_;
        require(c.finite_n_, "tuple_values: coupling is not a finite-N wrap");
        int d = mu_->dim();
        int opp = c.fn_players_ - 1;
        std::vector<double> vals(c.fn_tuples_);
        for (int m = 0; m < c.fn_tuples_; ++m) {
            double v = 0.0;
            if (c.kind_ == CouplingSpec::Kind::KdeCongestion) {
                double inv2s2 = 1.0 / (2.0 * c.sigma_ * c.sigma_);
                for (int j = 0; j < opp; ++j) {
                    const double* y = mu_->point(tuple_members_[static_cast<size_t>(m) * opp + j]);
                    double q = 0.0;
                    for (int k = 0; k < d; ++k) {
                        double z = x[k] - y[k];
                        q += z * z;
                    }
                    v += std::exp(-q * inv2s2);
                }
                v = c.amp_ * v / opp;
            } else if (c.kind_ == CouplingSpec::Kind::MeanAttraction) {
                std::vector<double> tm(d, 0.0);
                for (int j = 0; j < opp; ++j) {
                    const double* y = mu_->point(tuple_members_[static_cast<size_t>(m) * opp + j]);
                    for (int k = 0; k < d; ++k) tm[k] += y[k];
                }
                double q = 0.0;
                for (int k = 0; k < d; ++k) {
                    double z = x[k] - tm[k] / opp;
                    q += z * z;
                }
                v = c.amp_ * q;
            }
            if (c.has_potential_) v += c.potential_.eval(x, d);
            vals[m] = v;
        }
        return vals;
    }

private:
    const CouplingSpec* spec_;
    const ParticleMeasure* mu_;
    std::vector<double> counts_;        // finite-N resampled weights
    std::vector<int> tuple_members_;    // finite-N atom indices per (tuple, opponent)
    std::vector<double> mean_;          // mean-attraction statistics
    double spread_ = 0.0;
};

inline double coupling_eval(const CouplingSpec& c, const std::vector<double>& x,
                            const ParticleMeasure& mu) {
    mu.validate();
    return BoundCoupling(c, mu).value(x.data());
}

inline std::vector<double> coupling_grad(const CouplingSpec& c, const std::vector<double>& x,
                                         const ParticleMeasure& mu) {
    std::vector<double> g(x.size());
    BoundCoupling(c, mu).grad(x.data(), g.data());
    return g;
}

// ---------------------------------------------------------------------------
// ModelSpec: the full data triple (L, f, g, m_0) with the derived velocity
// bound C and trajectory box K_C.
// ---------------------------------------------------------------------------

struct ModelSpec {
    int dim = 1;
    double horizon = 1.0;
    LagrangianSpec lagrangian;
    CouplingSpec running;    // f
    CouplingSpec terminal;   // g
    InitialLaw initial;
    double velocity_bound = 0.0;
    Box box;

    HamiltonianSpec hamiltonian(double tol = 1e-10) const {
        return HamiltonianSpec(lagrangian, tol);
    }
};

namespace detail {

/// Velocity bound from the comparison-with-the-constant-path argument:
/// any optimal path satisfies L_low * int |v|^2 <= sup J_stay - T inf f
/// - inf g + C'_L T. The square root of that energy, with a 1.5x safety
/// factor, bounds the velocities the solvers ever need to consider. Bounds
/// of f and g are probed on the current candidate box, and the box/bound
/// pair is iterated twice since they depend on each other.
inline double derive_velocity_bound(const ModelSpec& m) {
    const Box& supp = m.initial.support_box();
    double T = m.horizon;
    int d = m.dim;
    double C = 0.0;
    for (int pass = 0; pass < 2; ++pass) {
        Box region = supp.inflated(C * T);
        double L_low = m.lagrangian.lower_quad(region, d);
        double C_off = m.lagrangian.lower_offset(region, d);
        double sup_stay = -std::numeric_limits<double>::infinity();
        std::vector<double> zero(d, 0.0);
        for (const auto& x : probe_grid(supp, d == 1 ? 65 : 17)) {
            double stay = T * (m.lagrangian.eval(zero.data(), x.data(), d) +
                               m.running.upper_bound(x.data(), d, region)) +
                          m.terminal.upper_bound(x.data(), d, region);
            sup_stay = std::max(sup_stay, stay);
        }
        double inf_f = std::numeric_limits<double>::infinity();
        double inf_g = std::numeric_limits<double>::infinity();
        for (const auto& x : probe_grid(region, d == 1 ? 65 : 17)) {
            inf_f = std::min(inf_f, m.running.lower_bound(x.data(), d, region));
            inf_g = std::min(inf_g, m.terminal.lower_bound(x.data(), d, region));
        }
        double energy = (sup_stay - T * inf_f - inf_g + C_off * T) / L_low;
        C = 1.5 * std::sqrt(std::max(0.0, energy));
    }
    return C;
}

}  // namespace detail

/// Assemble a model, deriving the velocity bound and trajectory box from the
/// data unless an explicit bound is supplied.
inline ModelSpec make_model(int dim, double horizon, LagrangianSpec lagr, CouplingSpec running,
                            CouplingSpec terminal, InitialLaw initial,
                            double velocity_bound_override = -1.0) {
    require(dim >= 1, "make_model: dim must be >= 1");
    require(horizon > 0.0, "make_model: horizon must be > 0");
    require(initial.dim() == dim, "make_model: initial law dimension mismatch");
    ModelSpec m;
    m.dim = dim;
    m.horizon = horizon;
    m.lagrangian = std::move(lagr);
    m.running = std::move(running);
    m.terminal = std::move(terminal);
    m.initial = std::move(initial);
    m.velocity_bound =
        velocity_bound_override >= 0.0 ? velocity_bound_override : detail::derive_velocity_bound(m);
    m.box = trajectory_box(m.initial, m.velocity_bound, m.horizon);
    return m;
}

/// Stage cost l(alpha, x, mu) = L(-alpha, x) + f(x, mu); alpha is the
/// trajectory velocity, hence the sign flip.
inline double running_cost(const ModelSpec& m, const std::vector<double>& alpha,
                           const std::vector<double>& x, const ParticleMeasure& mu) {
    std::vector<double> neg(alpha.size());
    for (size_t i = 0; i < alpha.size(); ++i) neg[i] = -alpha[i];
    return m.lagrangian.eval(neg.data(), x.data(), m.dim) + coupling_eval(m.running, x, mu);
}

/// Discrete path cost: left-endpoint rectangle rule over the velocity
/// intervals plus the terminal coupling, exactly matching the transcription
/// objective.
inline double path_cost(const ModelSpec& m, const Trajectory& gamma, const MarginalFlow& flow) {
    require(gamma.grid().same_as(flow.grid()), "path_cost: trajectory/flow grid mismatch");
    int d = m.dim;
    double dt = gamma.grid().dt();
    double total = 0.0;
    std::vector<double> neg(d);
    for (int k = 0; k < gamma.grid().steps(); ++k) {
        const double* a = gamma.point(k);
        const double* b = gamma.point(k + 1);
        for (int i = 0; i < d; ++i) neg[i] = -(b[i] - a[i]) / dt;
        BoundCoupling f(m.running, flow.slice(k));
        total += dt * (m.lagrangian.eval(neg.data(), a, d) + f.value(a));
    }
    BoundCoupling g(m.terminal, flow.slice(flow.slices() - 1));
    total += g.value(gamma.point(gamma.grid().steps()));
    return total;
}

// ---------------------------------------------------------------------------
// Monotonicity probe: samples random pairs of particle measures on the box and
// reports the minimum Lasry-Lions pairing
//     int (h(x,mu) - h(x,mu')) d(mu - mu')(x).
// A declared-monotone coupling whose empirical pairing dips below -1e-9 is
// flagged.
// ---------------------------------------------------------------------------

struct MonotonicityReport {
    double min_pairing = 0.0;
    double mean_pairing = 0.0;
    bool flagged = false;
};

inline MonotonicityReport monotonicity_probe(const CouplingSpec& c, const Box& box, uint64_t seed,
                                             int trials) {
    require(trials >= 1, "monotonicity_probe: trials must be >= 1");
    int d = box.dim();
    MonotonicityReport rep;
    rep.min_pairing = std::numeric_limits<double>::infinity();
    double sum = 0.0;
    auto random_measure = [&](Rng& rng) {
        int n = 1 + static_cast<int>(rng.unit() * 12);
        std::vector<double> pts(static_cast<size_t>(n) * d), w(n);
        double tot = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int k = 0; k < d; ++k)
                pts[static_cast<size_t>(i) * d + k] = rng.uniform(box.lo[k], box.hi[k]);
            w[i] = 0.05 + rng.unit();
            tot += w[i];
        }
        for (double& x : w) x /= tot;
        return ParticleMeasure(d, std::move(pts), std::move(w));
    };
    for (int t = 0; t < trials; ++t) {
        Rng rng(seed, {0x1a51, static_cast<uint64_t>(t)});
        ParticleMeasure mu = random_measure(rng);
        ParticleMeasure nu = random_measure(rng);
        BoundCoupling h_mu(c, mu), h_nu(c, nu);
        double pairing = 0.0;
        for (int i = 0; i < mu.size(); ++i)
            pairing += mu.weight(i) * (h_mu.value(mu.point(i)) - h_nu.value(mu.point(i)));
        for (int i = 0; i < nu.size(); ++i)
            pairing -= nu.weight(i) * (h_mu.value(nu.point(i)) - h_nu.value(nu.point(i)));
        rep.min_pairing = std::min(rep.min_pairing, pairing);
        sum += pairing;
    }
    rep.mean_pairing = sum / trials;
    rep.flagged = c.monotone_declared() && rep.min_pairing < -1e-9;
    return rep;
}

}  // namespace mfg
