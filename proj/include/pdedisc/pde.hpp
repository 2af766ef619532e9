#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdedisc/errors.hpp"
#include "pdedisc/field.hpp"
#include "pdedisc/stencil.hpp"

namespace pdedisc {

/// Derivative factor of a candidate term.
enum class DerivFactor { One, Ux, Uy, Vx, Vy, LapU, LapV };

inline const char* deriv_name(DerivFactor d) {
    switch (d) {
        case DerivFactor::One: return "1";
        case DerivFactor::Ux: return "u_x";
        case DerivFactor::Uy: return "u_y";
        case DerivFactor::Vx: return "v_x";
        case DerivFactor::Vy: return "v_y";
        case DerivFactor::LapU: return "lap(u)";
        case DerivFactor::LapV: return "lap(v)";
    }
    return "?";
}

inline DerivFactor deriv_from_name(const std::string& s) {
    if (s == "1") return DerivFactor::One;
    if (s == "u_x") return DerivFactor::Ux;
    if (s == "u_y") return DerivFactor::Uy;
    if (s == "v_x") return DerivFactor::Vx;
    if (s == "v_y") return DerivFactor::Vy;
    if (s == "lap(u)") return DerivFactor::LapU;
    if (s == "lap(v)") return DerivFactor::LapV;
    throw std::invalid_argument("unknown derivative factor: " + s);
}

/// One candidate term u^a v^b * deriv, with a + b <= 3.
struct TermDescriptor {
    int pu = 0; // power of u
    int pv = 0; // power of v
    DerivFactor deriv = DerivFactor::One;

    bool operator==(const TermDescriptor& o) const {
        return pu == o.pu && pv == o.pv && deriv == o.deriv;
    }

    std::string name() const {
        std::string poly;
        auto app = [&poly](const char* sym, int p) {
            if (p == 0) return;
            if (!poly.empty()) poly += "*";
            poly += sym;
            if (p > 1) poly += "^" + std::to_string(p);
        };
        app("u", pu);
        app("v", pv);
        std::string d = deriv_name(deriv);
        if (poly.empty()) return d;
        if (deriv == DerivFactor::One) return poly;
        return poly + "*" + d;
    }
};

/// The default 70-entry dictionary: polynomials {1,u,v,u^2,uv,v^2,u^3,u^2v,
/// uv^2,v^3} crossed with derivatives {1,u_x,u_y,v_x,v_y,lap(u),lap(v)}.
/// Order: polynomial-major, derivative-minor.
inline std::vector<TermDescriptor> default_dictionary() {
    static const std::array<std::array<int, 2>, 10> polys = {
        {{0, 0}, {1, 0}, {0, 1}, {2, 0}, {1, 1}, {0, 2}, {3, 0}, {2, 1}, {1, 2}, {0, 3}}};
    static const std::array<DerivFactor, 7> derivs = {
        DerivFactor::One,  DerivFactor::Ux,   DerivFactor::Uy,  DerivFactor::Vx,
        DerivFactor::Vy,   DerivFactor::LapU, DerivFactor::LapV};
    std::vector<TermDescriptor> out;
    out.reserve(70);
    for (const auto& p : polys) {
        for (DerivFactor d : derivs) {
            out.push_back({p[0], p[1], d});
        }
    }
    return out;
}

/// Restricted 12-entry dictionary for reaction-kinetics search: the ten
/// polynomial terms plus the two diffusion terms.
inline std::vector<TermDescriptor> polynomial_dictionary() {
    static const std::array<std::array<int, 2>, 10> polys = {
        {{0, 0}, {1, 0}, {0, 1}, {2, 0}, {1, 1}, {0, 2}, {3, 0}, {2, 1}, {1, 2}, {0, 3}}};
    std::vector<TermDescriptor> out;
    out.reserve(12);
    for (const auto& p : polys) out.push_back({p[0], p[1], DerivFactor::One});
    out.push_back({0, 0, DerivFactor::LapU});
    out.push_back({0, 0, DerivFactor::LapV});
    return out;
}

inline std::vector<TermDescriptor> dictionary_by_name(const std::string& name) {
    if (name == "full") return default_dictionary();
    if (name == "polynomial") return polynomial_dictionary();
    throw std::invalid_argument("unknown dictionary: " + name);
}

inline int find_term(const std::vector<TermDescriptor>& dict, const TermDescriptor& t) {
    for (std::size_t i = 0; i < dict.size(); ++i) {
        if (dict[i] == t) return static_cast<int>(i);
    }
    return -1;
}

/// Symbolic right-hand side of a two-component PDE: per component, a list of
/// (term, coefficient) pairs.
struct PdeSystem {
    using TermList = std::vector<std::pair<TermDescriptor, double>>;
    std::array<TermList, 2> comps;

    static constexpr int n_components = 2;

    double coefficient(int comp, const TermDescriptor& t) const {
        for (const auto& [term, c] : comps[comp]) {
            if (term == t) return c;
        }
        return 0.0;
    }
};

// --- Benchmark presets ------------------------------------------------------

/// u_t = nu lap(u) - u u_x - v u_y ; v_t = nu lap(v) - u v_x - v v_y
inline PdeSystem burgers(double nu) {
    PdeSystem s;
    s.comps[0] = {{{0, 0, DerivFactor::LapU}, nu},
                  {{1, 0, DerivFactor::Ux}, -1.0},
                  {{0, 1, DerivFactor::Uy}, -1.0}};
    s.comps[1] = {{{0, 0, DerivFactor::LapV}, nu},
                  {{1, 0, DerivFactor::Vx}, -1.0},
                  {{0, 1, DerivFactor::Vy}, -1.0}};
    return s;
}

/// u_t = mu_u lap(u) + u - u^3 + beta u^2 v - u v^2 + beta v^3
/// v_t = mu_v lap(v) + v - beta u^3 - u^2 v - beta u v^2 - v^3
inline PdeSystem lambda_omega(double beta, double mu_u, double mu_v) {
    PdeSystem s;
    s.comps[0] = {{{0, 0, DerivFactor::LapU}, mu_u}, {{1, 0, DerivFactor::One}, 1.0},
                  {{3, 0, DerivFactor::One}, -1.0},  {{2, 1, DerivFactor::One}, beta},
                  {{1, 2, DerivFactor::One}, -1.0},  {{0, 3, DerivFactor::One}, beta}};
    s.comps[1] = {{{0, 0, DerivFactor::LapV}, mu_v}, {{0, 1, DerivFactor::One}, 1.0},
                  {{3, 0, DerivFactor::One}, -beta}, {{2, 1, DerivFactor::One}, -1.0},
                  {{1, 2, DerivFactor::One}, -beta}, {{0, 3, DerivFactor::One}, -1.0}};
    return s;
}

/// u_t = mu_u lap(u) - u v^2 + feed (1 - u)
/// v_t = mu_v lap(v) + u v^2 - (feed + kill) v
inline PdeSystem gray_scott(double mu_u, double mu_v, double kill, double feed) {
    PdeSystem s;
    s.comps[0] = {{{0, 0, DerivFactor::LapU}, mu_u},
                  {{1, 2, DerivFactor::One}, -1.0},
                  {{1, 0, DerivFactor::One}, -feed},
                  {{0, 0, DerivFactor::One}, feed}};
    s.comps[1] = {{{0, 0, DerivFactor::LapV}, mu_v},
                  {{1, 2, DerivFactor::One}, 1.0},
                  {{0, 1, DerivFactor::One}, -(feed + kill)}};
    return s;
}

// --- Right-hand-side evaluation --------------------------------------------

/// Cached per-state derivative planes for the seven derivative factors.
struct DerivPlanes {
    std::size_t h = 0, w = 0;
    std::array<std::vector<double>, 7> plane; // indexed by DerivFactor

    const double* get(DerivFactor d) const {
        return plane[static_cast<int>(d)].data();
    }
};

/// Evaluates PDE right-hand sides on a two-component state with the shared
/// stencil set: 4th-order 5x5 first derivatives and the 9-point Laplacian.
/// The same evaluator backs simulation, library building and fine-tuning so
/// their derivative conventions agree exactly.
class RhsEvaluator {
public:
    explicit RhsEvaluator(double dx)
        : dx_(dx),
          d_x_(taylor_filter(1, 0, 5, dx, dx)),
          d_y_(taylor_filter(0, 1, 5, dx, dx)),
          lap_(laplacian9(dx)) {}

    double dx() const { return dx_; }
    const Stencil& first_x() const { return d_x_; }
    const Stencil& first_y() const { return d_y_; }
    const Stencil& laplacian() const { return lap_; }

    /// Fills all seven derivative planes for a (1, 2, h, w) state frame.
    DerivPlanes derivatives(const FieldTensor& state, std::size_t t = 0) const {
        check_state(state);
        const std::size_t h = state.h(), w = state.w(), n = h * w;
        DerivPlanes p;
        p.h = h;
        p.w = w;
        for (auto& v : p.plane) v.resize(n);
        const double* u = state.plane(t, 0);
        const double* v = state.plane(t, 1);
        // DerivFactor::One is the all-ones plane.
        std::fill(p.plane[0].begin(), p.plane[0].end(), 1.0);
        apply_stencil_plane(d_x_, u, p.plane[static_cast<int>(DerivFactor::Ux)].data(), h, w);
        apply_stencil_plane(d_y_, u, p.plane[static_cast<int>(DerivFactor::Uy)].data(), h, w);
        apply_stencil_plane(d_x_, v, p.plane[static_cast<int>(DerivFactor::Vx)].data(), h, w);
        apply_stencil_plane(d_y_, v, p.plane[static_cast<int>(DerivFactor::Vy)].data(), h, w);
        apply_stencil_plane(lap_, u, p.plane[static_cast<int>(DerivFactor::LapU)].data(), h, w);
        apply_stencil_plane(lap_, v, p.plane[static_cast<int>(DerivFactor::LapV)].data(), h, w);
        return p;
    }

    /// Pointwise polynomial factor u^a v^b at index i.
    static double poly_at(const TermDescriptor& t, double u, double v) {
        double r = 1.0;
        for (int i = 0; i < t.pu; ++i) r *= u;
        for (int i = 0; i < t.pv; ++i) r *= v;
        return r;
    }

    /// RHS of one system on one state frame -> (1, 2, h, w).
    FieldTensor rhs(const PdeSystem& sys, const FieldTensor& state, std::size_t t = 0,
                    long step_for_error = -1) const {
        check_state(state);
        const std::size_t h = state.h(), w = state.w(), n = h * w;
        DerivPlanes dp = derivatives(state, t);
        FieldTensor out(1, 2, h, w);
        const double* u = state.plane(t, 0);
        const double* v = state.plane(t, 1);
        for (int comp = 0; comp < 2; ++comp) {
            double* o = out.plane(0, comp);
            for (const auto& [term, coeff] : sys.comps[comp]) {
                const double* d = dp.get(term.deriv);
                for (std::size_t i = 0; i < n; ++i) {
                    o[i] += coeff * (poly_at(term, u[i], v[i]) * d[i]);
                }
            }
        }
        if (!out.all_finite()) {
            throw BlowupError("rhs evaluation produced non-finite values", step_for_error);
        }
        return out;
    }

private:
    static void check_state(const FieldTensor& state) {
        if (state.nc() != 2) {
            throw std::invalid_argument("RhsEvaluator: state must have 2 channels");
        }
    }

    double dx_;
    Stencil d_x_, d_y_, lap_;
};

} // namespace pdedisc
