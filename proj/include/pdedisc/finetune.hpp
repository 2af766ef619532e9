#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdedisc/autodiff.hpp"
#include "pdedisc/errors.hpp"
#include "pdedisc/field.hpp"
#include "pdedisc/optim.hpp"
#include "pdedisc/pde.hpp"
#include "pdedisc/recon.hpp"
#include "pdedisc/sim.hpp"

namespace pdedisc {

/// Recurrent model whose right-hand side is exactly an identified term set
/// with one trainable scalar coefficient per term. The stencils and the
/// initial state (the frozen stage-1 generator output) never change during
/// fine-tuning; only the coefficients do.
struct PhysicsModel {
    std::array<std::vector<TermDescriptor>, 2> terms;
    std::array<std::vector<double>, 2> coeffs;
    FieldTensor init; // (1, 2, h, w)
    double dx = 0.0, dt = 0.0;
    std::size_t n_steps = 0;

    PdeSystem system() const {
        PdeSystem s;
        for (int c = 0; c < 2; ++c) {
            for (std::size_t j = 0; j < terms[c].size(); ++j) {
                s.comps[c].push_back({terms[c][j], coeffs[c][j]});
            }
        }
        return s;
    }
};

inline PhysicsModel build_physics_model(const PdeSystem& sys, const FieldTensor& init,
                                        double dx, double dt, std::size_t n_steps) {
    if (init.nt() != 1 || init.nc() != 2) {
        throw std::invalid_argument(
            "build_physics_model: initial state must have shape (1, 2, h, w)");
    }
    if (!(dx > 0.0) || !(dt > 0.0) || n_steps == 0) {
        throw std::invalid_argument(
            "build_physics_model: spacing, step size and length must be positive");
    }
    const std::vector<TermDescriptor> dict = default_dictionary();
    PhysicsModel m;
    for (int c = 0; c < 2; ++c) {
        for (const auto& [td, coeff] : sys.comps[c]) {
            if (find_term(dict, td) < 0) {
                throw std::invalid_argument("build_physics_model: unknown term " +
                                            td.name());
            }
            if (!std::isfinite(coeff)) {
                throw std::invalid_argument(
                    "build_physics_model: non-finite coefficient for " + td.name());
            }
            m.terms[c].push_back(td);
            m.coeffs[c].push_back(coeff);
        }
    }
    m.init = init;
    m.dx = dx;
    m.dt = dt;
    m.n_steps = n_steps;
    return m;
}

/// Forward-Euler rollout from the frozen initial state; frame k is the state
/// after k steps. Shares the simulator's step function, so trajectories are
/// bit-identical to an Euler-configured simulation of the same system.
inline FieldTensor physics_rollout(const PhysicsModel& m) {
    const RhsEvaluator ev(m.dx);
    const PdeSystem sys = m.system();
    FieldTensor out(m.n_steps + 1, 2, m.init.h(), m.init.w());
    FieldTensor state = m.init;
    out.set_frame(0, state);
    for (std::size_t s = 0; s < m.n_steps; ++s) {
        state = euler_step(ev, sys, state, m.dt, static_cast<long>(s));
        out.set_frame(s + 1, state);
    }
    return out;
}

/// Training defaults for coefficient refinement: longer schedule, smaller
/// steps, and no initial-state term (the initial state is frozen anyway).
inline TrainConfig finetune_defaults() {
    TrainConfig cfg;
    cfg.iterations = 5000;
    cfg.adam.lr = 0.001;
    cfg.eta = 0.0;
    return cfg;
}

namespace detail {

/// Taped Euler rollout over the term-set dynamics. Coefficients of non-empty
/// components become trainable leaves (ids in coeff_ids); an empty component
/// is represented by a zero constant on a unit term so tensor shapes stay
/// valid without affecting the dynamics.
inline std::vector<int> physics_frames(Tape& t, const PhysicsModel& m,
                                       const RhsEvaluator& ev,
                                       std::array<int, 2>& coeff_ids) {
    std::array<std::vector<TermDescriptor>, 2> terms = m.terms;
    for (int c = 0; c < 2; ++c) {
        if (!m.terms[c].empty()) {
            FieldTensor cv(1, 1, 1, m.terms[c].size());
            std::copy(m.coeffs[c].begin(), m.coeffs[c].end(), cv.data());
            coeff_ids[c] = t.leaf(cv, true);
        } else {
            terms[c].push_back({0, 0, DerivFactor::One});
            coeff_ids[c] = t.constant(FieldTensor(1, 1, 1, 1, 0.0));
        }
    }
    std::vector<int> frames{t.constant(m.init)};
    for (std::size_t s = 0; s < m.n_steps; ++s) {
        int f = t.physics_rhs(frames.back(), coeff_ids, terms, ev);
        int next = t.add(frames.back(), t.scale(f, m.dt));
        if (!t.value(next).all_finite()) {
            throw BlowupError("finetune: non-finite state", static_cast<long>(s));
        }
        frames.push_back(next);
    }
    return frames;
}

struct CoeffSnapshot {
    std::array<std::vector<double>, 2> coeffs;
    AdamState opt;
    long iteration = 0;
    std::size_t history_len = 0;
};

} // namespace detail

/// Refines the model's coefficients against the measurements with Adam,
/// leaving the term structure and the initial state untouched. Recovery
/// policy on numerical blowup matches the reconstruction trainer: restore
/// the last checkpoint and halve the learning rate, up to max_recoveries.
inline TrainResult finetune(PhysicsModel& m, const TrainConfig& cfg,
                            const FieldTensor& meas) {
    cfg.validate();
    if (meas.nc() != 2) {
        throw std::invalid_argument("finetune: measurements need 2 channels");
    }
    const RhsEvaluator ev(m.dx);

    TrainResult out;
    AdamState st(cfg.adam);
    {
        std::vector<std::size_t> sizes;
        for (int c = 0; c < 2; ++c) {
            if (!m.terms[c].empty()) sizes.push_back(m.terms[c].size());
        }
        st.init(sizes);
    }
    detail::CoeffSnapshot snap{m.coeffs, st, 0, 0};

    long it = 0;
    while (it < cfg.iterations) {
        const double lr_now = effective_lr(st);
        bool blew_up = false;
        try {
            Tape t;
            std::array<int, 2> cid{-1, -1};
            std::vector<int> frames = detail::physics_frames(t, m, ev, cid);
            LossNodes loss = reconstruction_loss(t, frames, meas, m.init, cfg.eta);
            const double lv = t.value(loss.total).data()[0];
            if (!std::isfinite(lv)) throw BlowupError("finetune: non-finite loss", it);
            t.backward(loss.total);
            std::vector<double*> ps;
            std::vector<const double*> gs;
            for (int c = 0; c < 2; ++c) {
                if (m.terms[c].empty()) continue;
                ps.push_back(m.coeffs[c].data());
                gs.push_back(t.grad(cid[c]).data());
            }
            adam_step(st, ps, gs);
            out.history.push_back({it, lv, t.value(loss.data).data()[0],
                                   t.value(loss.ic).data()[0], lr_now});
        } catch (const BlowupError&) {
            blew_up = true;
        }
        if (blew_up) {
            if (out.recoveries >= cfg.max_recoveries) {
                throw BlowupError("finetune: numerical blowup persists after " +
                                      std::to_string(out.recoveries) + " recoveries",
                                  it);
            }
            ++out.recoveries;
            st.cfg.lr *= 0.5;
            m.coeffs = snap.coeffs;
            const AdamConfig keep = st.cfg;
            st = snap.opt;
            st.cfg = keep;
            out.history.resize(snap.history_len);
            it = snap.iteration;
            continue;
        }
        ++it;
        if (it % cfg.checkpoint_every == 0) {
            snap = {m.coeffs, st, it, out.history.size()};
        }
    }
    out.final_loss = out.history.empty() ? 0.0 : out.history.back().loss;
    return out;
}

// --- Discovered-equation output ---------------------------------------------

/// One line per component, e.g. "u_t = 0.0050113*lap(u) - 1.004*u*u_x".
inline std::string pde_text(const PdeSystem& sys) {
    std::ostringstream os;
    os.precision(5);
    for (int c = 0; c < 2; ++c) {
        os << (c == 0 ? "u_t = " : "v_t = ");
        if (sys.comps[c].empty()) {
            os << "0";
        } else {
            bool first = true;
            for (const auto& [td, coeff] : sys.comps[c]) {
                if (first) {
                    os << coeff;
                    first = false;
                } else {
                    os << (coeff < 0.0 ? " - " : " + ") << std::fabs(coeff);
                }
                os << "*" << td.name();
            }
        }
        os << '\n';
    }
    return os.str();
}

/// Flat machine-readable form: one entry per discovered term.
inline nlohmann::json pde_json(const PdeSystem& sys) {
    nlohmann::json j = nlohmann::json::array();
    for (int c = 0; c < 2; ++c) {
        for (const auto& [td, coeff] : sys.comps[c]) {
            j.push_back({{"component", c}, {"term", td.name()}, {"coefficient", coeff}});
        }
    }
    return j;
}

inline PdeSystem system_from_pde_json(const nlohmann::json& j) {
    const std::vector<TermDescriptor> dict = default_dictionary();
    PdeSystem sys;
    for (const auto& e : j) {
        const int c = e.at("component").get<int>();
        if (c < 0 || c > 1) {
            throw std::invalid_argument("system_from_pde_json: bad component");
        }
        const std::string name = e.at("term").get<std::string>();
        int found = -1;
        for (std::size_t i = 0; i < dict.size(); ++i) {
            if (dict[i].name() == name) {
                found = static_cast<int>(i);
                break;
            }
        }
        if (found < 0) {
            throw std::invalid_argument("system_from_pde_json: unknown term " + name);
        }
        sys.comps[c].push_back({dict[found], e.at("coefficient").get<double>()});
    }
    return sys;
}

} // namespace pdedisc
