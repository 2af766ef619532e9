#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdedisc/library.hpp"
#include "pdedisc/stencil.hpp"

namespace pdedisc {

struct SparseConfig {
    double ridge = 1e-5;  // penalty inside the thresholding iterations
    double kappa = 1.0;   // sparsity weight in the selection objective
    int tol_points = 50;
    double tol_lo = 1e-4, tol_hi = 1e1; // grid bounds, relative to median |xi~|
    int max_iters = 25;
    std::vector<std::size_t> protected_terms; // never thresholded

    void validate() const {
        if (ridge < 0.0) throw std::invalid_argument("SparseConfig: ridge must be >= 0");
        if (!(kappa > 0.0)) throw std::invalid_argument("SparseConfig: kappa must be > 0");
        if (tol_points < 1 || max_iters < 1) {
            throw std::invalid_argument("SparseConfig: grid and iteration counts must be >= 1");
        }
        if (!(tol_lo > 0.0) || tol_hi < tol_lo) {
            throw std::invalid_argument("SparseConfig: bad tolerance bounds");
        }
    }
};

inline void to_json(nlohmann::json& j, const SparseConfig& c) {
    j = {{"ridge", c.ridge},         {"kappa", c.kappa},
         {"tol_points", c.tol_points}, {"tol_lo", c.tol_lo},
         {"tol_hi", c.tol_hi},       {"max_iters", c.max_iters},
         {"protected_terms", c.protected_terms}};
}
inline void from_json(const nlohmann::json& j, SparseConfig& c) {
    c.ridge = j.value("ridge", c.ridge);
    c.kappa = j.value("kappa", c.kappa);
    c.tol_points = j.value("tol_points", c.tol_points);
    c.tol_lo = j.value("tol_lo", c.tol_lo);
    c.tol_hi = j.value("tol_hi", c.tol_hi);
    c.max_iters = j.value("max_iters", c.max_iters);
    if (j.contains("protected_terms")) {
        c.protected_terms = j.at("protected_terms").get<std::vector<std::size_t>>();
    }
}

struct SparseSolution {
    std::vector<double> xi; // full dictionary length; zero off the support
    std::vector<std::size_t> support;
    double error = 0.0; // ||y - Theta xi||_2
    std::size_t l0 = 0;
    double objective = 0.0; // error + gamma * l0
};

/// Normal-equations view of one regression target. Columns are normalized to
/// unit l2 internally; returned coefficients are always for the raw columns.
/// Thresholds act on normalized coefficients, which makes supports invariant
/// under positive rescaling of any column. Raw data is retained so residuals
/// of near-exact fits can be evaluated directly instead of through the
/// cancellation-prone quadratic form.
struct RegressionProblem {
    std::size_t rows = 0, cols = 0;
    std::vector<double> gram;  // normalized, cols x cols
    std::vector<double> rhs;   // normalized, cols
    std::vector<double> scale; // raw column norms
    std::vector<double> data;  // raw theta, rows x cols
    std::vector<double> y;
    double yty = 0.0;
    std::vector<std::size_t> usable; // columns with nonzero norm
    double base_error = 0.0;         // least-squares residual over usable columns
};

namespace detail {

/// Solves the normalized normal equations on an active set; returns
/// normalized coefficients aligned with `active`.
inline std::vector<double> solve_active(const RegressionProblem& p,
                                        const std::vector<std::size_t>& active,
                                        double lambda) {
    const std::size_t k = active.size();
    std::vector<double> a(k * k), b(k);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            a[i * k + j] = p.gram[active[i] * p.cols + active[j]];
        }
        a[i * k + i] += lambda;
        b[i] = p.rhs[active[i]];
    }
    try {
        return solve_dense(std::move(a), std::move(b));
    } catch (const std::runtime_error&) {
        throw std::runtime_error(
            "ridge solve: singular normal equations; use a positive ridge penalty");
    }
}

/// ||y - Theta_active xi||_2 evaluated against the raw data. The quadratic
/// form yty - 2 xi'c + xi'G xi loses all significant digits once the fit is
/// nearly exact, which breaks error comparisons between nested supports;
/// the direct pass keeps them well ordered.
inline double direct_error(const RegressionProblem& p,
                           const std::vector<std::size_t>& active,
                           const std::vector<double>& xi_raw) {
    double ss = 0.0;
    for (std::size_t r = 0; r < p.rows; ++r) {
        const double* row = &p.data[r * p.cols];
        double pred = 0.0;
        for (std::size_t i = 0; i < active.size(); ++i) {
            pred += row[active[i]] * xi_raw[i];
        }
        const double d = p.y[r] - pred;
        ss += d * d;
    }
    return std::sqrt(ss);
}

} // namespace detail

inline RegressionProblem make_problem(const std::vector<double>& theta,
                                      std::size_t rows, std::size_t cols,
                                      const std::vector<double>& y) {
    if (rows == 0 || cols == 0 || theta.size() != rows * cols || y.size() != rows) {
        throw std::invalid_argument("make_problem: shape mismatch");
    }
    RegressionProblem p;
    p.rows = rows;
    p.cols = cols;
    p.data = theta;
    p.y = y;
    p.gram.assign(cols * cols, 0.0);
    p.rhs.assign(cols, 0.0);
    p.scale.assign(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = &theta[r * cols];
        for (std::size_t i = 0; i < cols; ++i) {
            for (std::size_t j = i; j < cols; ++j) {
                p.gram[i * cols + j] += row[i] * row[j];
            }
            p.rhs[i] += row[i] * y[r];
        }
        p.yty += y[r] * y[r];
    }
    for (std::size_t i = 0; i < cols; ++i) {
        for (std::size_t j = 0; j < i; ++j) p.gram[i * cols + j] = p.gram[j * cols + i];
    }
    for (std::size_t i = 0; i < cols; ++i) p.scale[i] = std::sqrt(p.gram[i * cols + i]);
    for (std::size_t i = 0; i < cols; ++i) {
        if (p.scale[i] > 0.0) p.usable.push_back(i);
        for (std::size_t j = 0; j < cols; ++j) {
            const double d = p.scale[i] * p.scale[j];
            if (d > 0.0) p.gram[i * cols + j] /= d;
        }
        if (p.scale[i] > 0.0) p.rhs[i] /= p.scale[i];
    }
    if (p.usable.empty()) throw std::invalid_argument("make_problem: all columns zero");

    std::vector<double> ls = detail::solve_active(p, p.usable, 0.0);
    for (std::size_t i = 0; i < p.usable.size(); ++i) ls[i] /= p.scale[p.usable[i]];
    p.base_error = detail::direct_error(p, p.usable, ls);
    return p;
}

/// Median magnitude of the normalized base solution at a given penalty; the
/// natural scale for thresholding, since the sequential filter compares
/// coefficients of exactly this solve.
inline double median_base_magnitude(const RegressionProblem& p, double lambda) {
    std::vector<double> xin = detail::solve_active(p, p.usable, lambda);
    std::vector<double> mags;
    for (double v : xin) mags.push_back(std::fabs(v));
    std::sort(mags.begin(), mags.end());
    return mags[mags.size() / 2];
}

inline RegressionProblem make_problem(const CandidateLibrary& lib, int component) {
    if (component < 0 || component > 1) {
        throw std::invalid_argument("make_problem: component must be 0 or 1");
    }
    return make_problem(lib.theta, lib.rows, lib.cols, lib.ut[component]);
}

/// Plain ridge regression on an active set; raw-column coefficients over the
/// full dictionary (zeros elsewhere).
inline std::vector<double> ridge(const RegressionProblem& p, double lambda,
                                 const std::vector<std::size_t>& active) {
    if (active.empty()) throw std::invalid_argument("ridge: empty active set");
    for (std::size_t j : active) {
        if (j >= p.cols) throw std::invalid_argument("ridge: column index out of range");
        if (p.scale[j] == 0.0) {
            throw std::invalid_argument("ridge: active column is identically zero");
        }
    }
    std::vector<double> xin = detail::solve_active(p, active, lambda);
    std::vector<double> out(p.cols, 0.0);
    for (std::size_t i = 0; i < active.size(); ++i) {
        out[active[i]] = xin[i] / p.scale[active[i]];
    }
    return out;
}

/// Sequential thresholding at a fixed tolerance: ridge-solve, drop
/// unprotected entries below tol (in normalized coefficient space), repeat
/// until stable, then refit the survivors without a penalty.
inline SparseSolution stridge(const RegressionProblem& p, const SparseConfig& cfg,
                              double tol) {
    cfg.validate();
    if (tol < 0.0) throw std::invalid_argument("stridge: tol must be >= 0");
    for (std::size_t j : cfg.protected_terms) {
        if (j >= p.cols) throw std::invalid_argument("stridge: protected index out of range");
        if (p.scale[j] == 0.0) {
            throw std::invalid_argument("stridge: protected column is identically zero");
        }
    }
    auto is_protected = [&cfg](std::size_t j) {
        return std::find(cfg.protected_terms.begin(), cfg.protected_terms.end(), j) !=
               cfg.protected_terms.end();
    };

    std::vector<std::size_t> active = p.usable;
    for (int it = 0; it < cfg.max_iters && !active.empty(); ++it) {
        std::vector<double> xin = detail::solve_active(p, active, cfg.ridge);
        std::vector<std::size_t> next;
        for (std::size_t i = 0; i < active.size(); ++i) {
            if (is_protected(active[i]) || std::fabs(xin[i]) >= tol) {
                next.push_back(active[i]);
            }
        }
        if (next.size() == active.size()) break;
        active = std::move(next);
    }

    SparseSolution s;
    s.xi.assign(p.cols, 0.0);
    if (active.empty()) {
        s.error = std::sqrt(p.yty);
        return s;
    }
    std::vector<double> xin = detail::solve_active(p, active, 0.0);
    for (std::size_t i = 0; i < active.size(); ++i) xin[i] /= p.scale[active[i]];
    s.error = detail::direct_error(p, active, xin);
    for (std::size_t i = 0; i < active.size(); ++i) {
        s.xi[active[i]] = xin[i];
    }
    s.support = active;
    s.l0 = active.size();
    return s;
}

/// Geometric tolerance grid anchored at the median magnitude of the
/// ridge-penalized base solution (the coefficients the filter actually
/// compares); the solution minimizing error + gamma * l0 wins, with
/// gamma = kappa * (full least-squares residual). Ties prefer sparser, then
/// more accurate, solutions.
inline SparseSolution tolerance_search(const RegressionProblem& p,
                                       const SparseConfig& cfg) {
    cfg.validate();
    const double gamma = cfg.kappa * p.base_error;
    const double med = median_base_magnitude(p, cfg.ridge);
    std::vector<double> grid;
    if (med == 0.0) {
        grid.push_back(0.0);
    } else if (cfg.tol_points == 1) {
        grid.push_back(cfg.tol_lo * med);
    } else {
        const double lo = cfg.tol_lo * med, hi = cfg.tol_hi * med;
        const double step = std::pow(hi / lo, 1.0 / (cfg.tol_points - 1));
        double t = lo;
        for (int i = 0; i < cfg.tol_points; ++i, t *= step) grid.push_back(t);
    }

    SparseSolution best;
    bool have = false;
    for (double tol : grid) {
        SparseSolution s = stridge(p, cfg, tol);
        s.objective = s.error + gamma * static_cast<double>(s.l0);
        const bool better =
            !have || s.objective < best.objective ||
            (s.objective == best.objective &&
             (s.l0 < best.l0 || (s.l0 == best.l0 && s.error < best.error)));
        if (better) {
            best = std::move(s);
            have = true;
        }
    }
    return best;
}

struct ParetoPoint {
    double kappa = 0.0;
    std::size_t l0 = 0;
    double error = 0.0;
    double objective = 0.0;
};

inline std::vector<double> default_kappa_grid() {
    std::vector<double> g;
    const double lo = 1e-2, hi = 20.0;
    for (int i = 0; i < 20; ++i) {
        g.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / 19.0));
    }
    return g;
}

/// Runs the tolerance search across a sparsity-weight grid and keeps only
/// non-dominated (l0, error) points, sorted by decreasing l0.
inline std::vector<ParetoPoint> pareto_sweep(const RegressionProblem& p,
                                             SparseConfig cfg,
                                             const std::vector<double>& kappas) {
    if (kappas.empty()) throw std::invalid_argument("pareto_sweep: empty grid");
    std::vector<ParetoPoint> pts;
    for (double k : kappas) {
        cfg.kappa = k;
        SparseSolution s = tolerance_search(p, cfg);
        pts.push_back({k, s.l0, s.error, s.objective});
    }
    std::vector<ParetoPoint> front;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        bool keep = true;
        for (std::size_t j = 0; j < pts.size() && keep; ++j) {
            if (j == i) continue;
            const bool dominates =
                pts[j].error <= pts[i].error && pts[j].l0 <= pts[i].l0 &&
                (pts[j].error < pts[i].error || pts[j].l0 < pts[i].l0);
            if (dominates) keep = false;
            // drop exact duplicates beyond the first occurrence
            if (j < i && pts[j].error == pts[i].error && pts[j].l0 == pts[i].l0) {
                keep = false;
            }
        }
        if (keep) front.push_back(pts[i]);
    }
    std::sort(front.begin(), front.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
        return a.l0 > b.l0;
    });
    return front;
}

inline void write_pareto_csv(const std::string& path, const std::vector<ParetoPoint>& f) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_pareto_csv: cannot open " + path);
    os << "kappa,l0,error,objective\n";
    os.precision(17);
    for (const ParetoPoint& p : f) {
        os << p.kappa << ',' << p.l0 << ',' << p.error << ',' << p.objective << '\n';
    }
}

/// Assembles the per-component sparse solutions into one system using the
/// library's dictionary.
inline PdeSystem system_from_solutions(const CandidateLibrary& lib,
                                       const SparseSolution& su,
                                       const SparseSolution& sv) {
    PdeSystem sys;
    for (std::size_t j : su.support) sys.comps[0].push_back({lib.terms[j], su.xi[j]});
    for (std::size_t j : sv.support) sys.comps[1].push_back({lib.terms[j], sv.xi[j]});
    return sys;
}

} // namespace pdedisc
