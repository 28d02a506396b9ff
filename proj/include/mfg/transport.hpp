#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/measures.hpp"
#include "mfg/parallel.hpp"

namespace mfg {

// ---------------------------------------------------------------------------
// Exact Wasserstein-1 distances between particle measures. 1D instances use
// the CDF-difference integral; general instances solve the transport LP
// exactly by successive shortest augmenting paths with potentials (each
// augmentation saturates one remaining supply or demand exactly, so at most
// n+m rounds run). Instances are desk-scale; a hard size cap guards the cubic
// worst case.
// ---------------------------------------------------------------------------

/// Sparse optimal transport plan between two particle measures.
struct TransportPlan {
    struct Entry {
        int source;
        int target;
        double mass;
    };
    std::vector<Entry> entries;
    double cost = 0.0;

    /// Marginal consistency: row sums = source weights, column sums = target
    /// weights, within 1e-10.
    void validate(const ParticleMeasure& mu, const ParticleMeasure& nu) const {
        std::vector<double> row(mu.size(), 0.0), col(nu.size(), 0.0);
        for (const auto& e : entries) {
            require(e.mass >= -1e-15, "TransportPlan: negative mass");
            row[e.source] += e.mass;
            col[e.target] += e.mass;
        }
        for (int i = 0; i < mu.size(); ++i)
            require(std::abs(row[i] - mu.weight(i)) <= 1e-10, "TransportPlan: row sum mismatch");
        for (int j = 0; j < nu.size(); ++j)
            require(std::abs(col[j] - nu.weight(j)) <= 1e-10, "TransportPlan: column sum mismatch");
    }
};

/// Exact d_1 in one dimension via the CDF-difference integral.
inline double w1_1d(const ParticleMeasure& mu, const ParticleMeasure& nu) {
    require(mu.dim() == 1 && nu.dim() == 1, "w1_1d: dimension must be 1");
    struct Event {
        double x;
        double w;
    };
    std::vector<Event> ev;
    ev.reserve(mu.size() + nu.size());
    for (int i = 0; i < mu.size(); ++i) ev.push_back({mu.point(i)[0], mu.weight(i)});
    for (int j = 0; j < nu.size(); ++j) ev.push_back({nu.point(j)[0], -nu.weight(j)});
    std::sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.x < b.x; });
    double cum = 0.0, dist = 0.0;
    for (size_t k = 0; k < ev.size(); ++k) {
        if (k > 0) dist += std::abs(cum) * (ev[k].x - ev[k - 1].x);
        cum += ev[k].w;
    }
    return dist;
}

namespace detail {

/// Min-cost flow on the bipartite transport polytope, successive shortest
/// paths with Johnson potentials (dense Dijkstra). Supplies/demands are real.
struct TransportSolver {
    int n, m;
    const ParticleMeasure& mu;
    const ParticleMeasure& nu;
    std::vector<double> flow;  // n*m, current plan
    std::vector<double> pot;   // node potentials: sources then sinks
    std::vector<double> cost;  // n*m ground costs

    TransportSolver(const ParticleMeasure& a, const ParticleMeasure& b)
        : n(a.size()), m(b.size()), mu(a), nu(b), flow(static_cast<size_t>(n) * m, 0.0),
          pot(n + m, 0.0), cost(static_cast<size_t>(n) * m) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                cost[static_cast<size_t>(i) * m + j] = dist2(a.point(i), b.point(j), a.dim());
    }

    TransportPlan solve() {
        std::vector<double> supply(n), demand(m);
        for (int i = 0; i < n; ++i) supply[i] = mu.weight(i);
        for (int j = 0; j < m; ++j) demand[j] = nu.weight(j);

        const double inf = std::numeric_limits<double>::infinity();
        std::vector<double> dist(n + m);
        std::vector<int> prev(n + m);
        std::vector<char> done(n + m);

        // total remaining mass; both sides shrink identically per augmentation
        auto remaining = [&] {
            double s = 0.0;
            for (double v : supply) s += v;
            return s;
        };

        int max_rounds = 2 * (n + m) + 8;
        for (int round = 0; round < max_rounds && remaining() > 1e-14; ++round) {
            // Multi-source Dijkstra over reduced costs from supplies to demands.
            std::fill(dist.begin(), dist.end(), inf);
            std::fill(prev.begin(), prev.end(), -1);
            std::fill(done.begin(), done.end(), 0);
            for (int i = 0; i < n; ++i)
                if (supply[i] > 1e-14) dist[i] = 0.0;
            for (int it = 0; it < n + m; ++it) {
                int u = -1;
                double best = inf;
                for (int v = 0; v < n + m; ++v)
                    if (!done[v] && dist[v] < best) {
                        best = dist[v];
                        u = v;
                    }
                if (u < 0) break;
                done[u] = 1;
                if (u < n) {
                    // source -> sinks (forward arcs)
                    for (int j = 0; j < m; ++j) {
                        double rc = cost[static_cast<size_t>(u) * m + j] - pot[u] + pot[n + j];
                        rc = std::max(rc, 0.0);  // guard fp dust
                        if (dist[u] + rc < dist[n + j]) {
                            dist[n + j] = dist[u] + rc;
                            prev[n + j] = u;
                        }
                    }
                } else {
                    // sink -> sources (backward arcs carrying flow)
                    int j = u - n;
                    for (int i = 0; i < n; ++i) {
                        if (flow[static_cast<size_t>(i) * m + j] <= 0.0) continue;
                        double rc = -(cost[static_cast<size_t>(i) * m + j] - pot[i] + pot[n + j]);
                        rc = std::max(rc, 0.0);
                        if (dist[u] + rc < dist[i]) {
                            dist[i] = dist[u] + rc;
                            prev[i] = u;
                        }
                    }
                }
            }
            // nearest sink with remaining demand
            int best_sink = -1;
            for (int j = 0; j < m; ++j)
                if (demand[j] > 1e-14 && dist[n + j] < inf &&
                    (best_sink < 0 || dist[n + j] < dist[n + best_sink]))
                    best_sink = j;
            require(best_sink >= 0, "w1_lp: no augmenting path (unbalanced instance?)");

            // bottleneck along the path
            double push = demand[best_sink];
            for (int v = n + best_sink; prev[v] >= 0;) {
                int p = prev[v];
                if (v >= n) {
                    // arc p(source) -> v(sink): capacity limited by p's supply only
                    // at the path head; interior forward arcs are uncapacitated.
                    if (prev[p] < 0) push = std::min(push, supply[p]);
                } else {
                    // backward arc: limited by flow on (v_source <- p_sink)
                    push = std::min(push, flow[static_cast<size_t>(v) * m + (p - n)]);
                }
                v = p;
            }
            // apply
            for (int v = n + best_sink; prev[v] >= 0;) {
                int p = prev[v];
                if (v >= n)
                    flow[static_cast<size_t>(p) * m + (v - n)] += push;
                else
                    flow[static_cast<size_t>(v) * m + (p - n)] -= push;
                v = p;
            }
            // head of the path is a source
            int head = n + best_sink;
            while (prev[head] >= 0) head = prev[head];
            supply[head] -= push;
            demand[best_sink] -= push;
            if (supply[head] < 1e-14) supply[head] = 0.0;
            if (demand[best_sink] < 1e-14) demand[best_sink] = 0.0;
            // potential update keeps reduced costs nonnegative
            for (int v = 0; v < n + m; ++v)
                if (dist[v] < inf) pot[v] += dist[v];
        }

        TransportPlan plan;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) {
                double f = flow[static_cast<size_t>(i) * m + j];
                if (f > 0.0) {
                    plan.entries.push_back({i, j, f});
                    plan.cost += f * cost[static_cast<size_t>(i) * m + j];
                }
            }
        return plan;
    }
};

}  // namespace detail

/// Exact optimal-transport cost with Euclidean ground metric, any dimension.
/// Combined support size is capped; larger instances must be subsampled by the
/// caller. Equal-size uniform-weight instances (the pushforward case) are
/// rescaled to unit supplies before solving.
inline std::pair<double, TransportPlan> w1_lp(const ParticleMeasure& mu, const ParticleMeasure& nu,
                                              int size_cap = 4096) {
    require(mu.dim() == nu.dim(), "w1_lp: dimension mismatch");
    require(mu.size() + nu.size() <= size_cap,
            "w1_lp: combined support " + std::to_string(mu.size() + nu.size()) +
                " exceeds cap " + std::to_string(size_cap) + "; subsample the measures first");
    // Equal-size uniform-weight instances (the pushforward case) are solved by
    // the same augmenting scheme; every supply is a unit 1/n, so each round
    // settles exactly one particle and the run is a rectangular assignment.
    detail::TransportSolver solver(mu, nu);
    TransportPlan plan = solver.solve();
    return {plan.cost, plan};
}

// ---------------------------------------------------------------------------
// Kantorovich-Rubinstein dual certificate. Potentials are recovered from the
// plan's complementary slackness (BFS over the support graph, components
// aligned by a Bellman-Ford pass), turned into a single 1-Lipschitz function
// by inf-convolution against the target atoms, and checked against the primal
// cost. A suboptimal plan fails either feasibility or the gap check.
// ---------------------------------------------------------------------------

struct DualCertificate {
    bool ok = false;
    bool feasible = false;          // aligned potentials satisfy u_i + p_j <= c_ij
    double duality_gap = 0.0;       // |dual objective - primal cost|
    double max_lip_violation = 0.0; // over all atom pairs of the witness f
    std::string message;
};

inline DualCertificate kr_dual_certificate(const ParticleMeasure& mu, const ParticleMeasure& nu,
                                           const TransportPlan& plan) {
    int n = mu.size(), m = nu.size(), d = mu.dim();
    DualCertificate cert;
    double primal = 0.0;
    for (const auto& e : plan.entries)
        primal += e.mass * dist2(mu.point(e.source), nu.point(e.target), d);

    // support adjacency
    std::vector<std::vector<int>> src_adj(n), dst_adj(m);
    for (const auto& e : plan.entries) {
        if (e.mass <= 0.0) continue;
        src_adj[e.source].push_back(e.target);
        dst_adj[e.target].push_back(e.source);
    }

    // complementary slackness: u_i + p_j = c_ij along support edges
    std::vector<double> u(n, 0.0), p(m, 0.0);
    std::vector<int> comp_src(n, -1), comp_dst(m, -1);
    int n_comp = 0;
    for (int root = 0; root < n; ++root) {
        if (comp_src[root] >= 0) continue;
        int c = n_comp++;
        std::vector<std::pair<bool, int>> stack{{true, root}};
        comp_src[root] = c;
        u[root] = 0.0;
        while (!stack.empty()) {
            auto [is_src, v] = stack.back();
            stack.pop_back();
            if (is_src) {
                for (int j : src_adj[v])
                    if (comp_dst[j] < 0) {
                        comp_dst[j] = c;
                        p[j] = dist2(mu.point(v), nu.point(j), d) - u[v];
                        stack.push_back({false, j});
                    }
            } else {
                for (int i : dst_adj[v])
                    if (comp_src[i] < 0) {
                        comp_src[i] = c;
                        u[i] = dist2(mu.point(i), nu.point(v), d) - p[v];
                        stack.push_back({true, i});
                    }
            }
        }
    }
    for (int j = 0; j < m; ++j)
        if (comp_dst[j] < 0) {
            comp_dst[j] = n_comp++;
            p[j] = 0.0;
        }

    // align component offsets: delta_a - delta_b <= min slack over (i in a, j in b)
    std::vector<double> delta(n_comp, 0.0);
    {
        const double inf = std::numeric_limits<double>::infinity();
        std::vector<double> w(static_cast<size_t>(n_comp) * n_comp, inf);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) {
                double slack = dist2(mu.point(i), nu.point(j), d) - u[i] - p[j];
                size_t idx = static_cast<size_t>(comp_dst[j]) * n_comp + comp_src[i];
                w[idx] = std::min(w[idx], slack);  // edge b->a with weight slack
            }
        // Bellman-Ford from virtual source (all deltas start 0)
        bool negative_cycle = false;
        for (int it = 0; it < n_comp && !negative_cycle; ++it) {
            bool changed = false;
            for (int b = 0; b < n_comp; ++b)
                for (int a = 0; a < n_comp; ++a) {
                    double wab = w[static_cast<size_t>(b) * n_comp + a];
                    if (wab < inf && delta[b] + wab < delta[a] - 1e-15) {
                        delta[a] = delta[b] + wab;
                        changed = true;
                        if (it == n_comp - 1) negative_cycle = true;
                    }
                }
            if (!changed) break;
        }
        if (negative_cycle) {
            cert.message = "component alignment has a negative cycle: plan is not optimal";
            return cert;
        }
    }
    for (int i = 0; i < n; ++i) u[i] += delta[comp_src[i]];
    for (int j = 0; j < m; ++j) p[j] -= delta[comp_dst[j]];

    cert.feasible = true;
    for (int i = 0; i < n && cert.feasible; ++i)
        for (int j = 0; j < m; ++j)
            if (u[i] + p[j] > dist2(mu.point(i), nu.point(j), d) + 1e-9) {
                cert.feasible = false;
                cert.message = "aligned potentials violate dual feasibility";
                break;
            }
    if (!cert.feasible) return cert;

    // 1-Lipschitz witness by inf-convolution: f(z) = min_j |z - y_j| - p_j
    auto witness = [&](const double* z) {
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < m; ++j) best = std::min(best, dist2(z, nu.point(j), d) - p[j]);
        return best;
    };
    std::vector<double> f_src(n), f_dst(m);
    for (int i = 0; i < n; ++i) f_src[i] = witness(mu.point(i));
    for (int j = 0; j < m; ++j) f_dst[j] = witness(nu.point(j));

    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            cert.max_lip_violation =
                std::max(cert.max_lip_violation, std::abs(f_src[i] - f_dst[j]) -
                                                     dist2(mu.point(i), nu.point(j), d));
    for (int i = 0; i < n; ++i)
        for (int k = i + 1; k < n; ++k)
            cert.max_lip_violation = std::max(
                cert.max_lip_violation, std::abs(f_src[i] - f_src[k]) -
                                            dist2(mu.point(i), mu.point(k), d));
    for (int j = 0; j < m; ++j)
        for (int k = j + 1; k < m; ++k)
            cert.max_lip_violation = std::max(
                cert.max_lip_violation, std::abs(f_dst[j] - f_dst[k]) -
                                            dist2(nu.point(j), nu.point(k), d));

    double dual = 0.0;
    for (int i = 0; i < n; ++i) dual += mu.weight(i) * f_src[i];
    for (int j = 0; j < m; ++j) dual -= nu.weight(j) * f_dst[j];
    cert.duality_gap = std::abs(dual - primal);
    cert.ok = cert.feasible && cert.max_lip_violation <= 1e-9 && cert.duality_gap <= 1e-8;
    if (!cert.ok && cert.message.empty()) cert.message = "duality gap or Lipschitz check failed";
    return cert;
}

// ---------------------------------------------------------------------------
// Distance between marginal flows: per-node d_1 (1D fast path, else LP) and
// the sup over nodes. Slices are independent and may be computed in parallel;
// the reduction is index-ordered.
// ---------------------------------------------------------------------------

struct FlowDistance {
    double sup = 0.0;
    std::vector<double> per_slice;
};

inline FlowDistance flow_distance(const MarginalFlow& a, const MarginalFlow& b,
                                  int size_cap = 4096) {
    require(a.grid().same_as(b.grid()), "flow_distance: time grid mismatch");
    require(a.dim() == b.dim(), "flow_distance: dimension mismatch");
    FlowDistance out;
    out.per_slice.assign(a.slices(), 0.0);
    std::exception_ptr err;
    parallel_for(a.slices(), [&](long k) {
        try {
            if (a.dim() == 1)
                out.per_slice[k] = w1_1d(a.slice(static_cast<int>(k)), b.slice(static_cast<int>(k)));
            else
                out.per_slice[k] =
                    w1_lp(a.slice(static_cast<int>(k)), b.slice(static_cast<int>(k)), size_cap).first;
        } catch (...) {
            if (!err) err = std::current_exception();
        }
    });
    if (err) std::rethrow_exception(err);
    for (double v : out.per_slice) out.sup = std::max(out.sup, v);
    return out;
}

}  // namespace mfg
