#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdedisc/errors.hpp"
#include "pdedisc/field.hpp"
#include "pdedisc/pde.hpp"

namespace pdedisc {

/// Initial-condition description. "smooth_random" builds a seeded random
/// smooth periodic field by circular Gaussian blur of white noise;
/// "square_seed" is the conventional perturbed-square start for the
/// Gray-Scott system; "file" loads frame 0 of a PFT1 tensor.
struct IcSpec {
    std::string kind = "smooth_random";
    double amplitude = 0.5;  // max-abs scaling of smooth_random fields
    double sigma = 4.0;      // blur radius in pixels
    double offset = 0.0;     // additive mean
    std::string path;        // for kind == "file"
};

struct SimConfig {
    std::string preset = "burgers"; // burgers | lambda_omega | gray_scott | custom
    nlohmann::json params;          // preset coefficients
    double domain = 1.0;
    std::size_t nx = 101, ny = 101;
    double dt = 2.5e-4;
    std::size_t n_steps = 200;
    std::uint64_t seed = 0;
    IcSpec ic;
    std::string integrator = "rk4"; // rk4 | euler
    double stability_bound = 2.8;

    double dx() const { return domain / static_cast<double>(nx - 1); }
};

struct MeasurementConfig {
    std::size_t spatial_stride = 2;
    std::size_t temporal_stride = 5;
    double noise_level = 0.0;
    std::uint64_t seed = 0;
    std::size_t max_frames = 0; // 0 = keep every strided frame
};

inline PdeSystem system_from_config(const SimConfig& cfg) {
    auto get = [&cfg](const char* key, double dflt) {
        return cfg.params.contains(key) ? cfg.params.at(key).get<double>() : dflt;
    };
    if (cfg.preset == "burgers") return burgers(get("nu", 0.005));
    if (cfg.preset == "lambda_omega") {
        return lambda_omega(get("beta", 1.0), get("mu_u", 0.1), get("mu_v", 0.1));
    }
    if (cfg.preset == "gray_scott") {
        return gray_scott(get("mu_u", 2e-5), get("mu_v", 5e-6), get("kill", 0.06),
                          get("feed", 0.04));
    }
    if (cfg.preset == "custom") {
        PdeSystem s;
        const auto& comps = cfg.params.at("components");
        for (int c = 0; c < 2; ++c) {
            for (const auto& t : comps.at(c)) {
                TermDescriptor td{t.at("pu").get<int>(), t.at("pv").get<int>(),
                                  deriv_from_name(t.at("deriv").get<std::string>())};
                s.comps[c].push_back({td, t.at("coeff").get<double>()});
            }
        }
        return s;
    }
    throw std::invalid_argument("unknown preset: " + cfg.preset);
}

// --- JSON (de)serialization -------------------------------------------------

inline void to_json(nlohmann::json& j, const IcSpec& ic) {
    j = {{"kind", ic.kind}, {"amplitude", ic.amplitude}, {"sigma", ic.sigma},
         {"offset", ic.offset}};
    if (!ic.path.empty()) j["path"] = ic.path;
}
inline void from_json(const nlohmann::json& j, IcSpec& ic) {
    ic.kind = j.value("kind", ic.kind);
    ic.amplitude = j.value("amplitude", ic.amplitude);
    ic.sigma = j.value("sigma", ic.sigma);
    ic.offset = j.value("offset", ic.offset);
    ic.path = j.value("path", ic.path);
}

inline void to_json(nlohmann::json& j, const SimConfig& c) {
    j = {{"preset", c.preset}, {"params", c.params},
         {"domain", c.domain}, {"grid", {c.nx, c.ny}},
         {"dt", c.dt},         {"n_steps", c.n_steps},
         {"seed", c.seed},     {"ic", c.ic},
         {"integrator", c.integrator}};
}
inline void from_json(const nlohmann::json& j, SimConfig& c) {
    c.preset = j.value("preset", c.preset);
    if (j.contains("params")) c.params = j.at("params");
    c.domain = j.value("domain", c.domain);
    if (j.contains("grid")) {
        c.nx = j.at("grid").at(0).get<std::size_t>();
        c.ny = j.at("grid").at(1).get<std::size_t>();
    }
    c.dt = j.value("dt", c.dt);
    c.n_steps = j.value("n_steps", c.n_steps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("ic")) c.ic = j.at("ic").get<IcSpec>();
    c.integrator = j.value("integrator", c.integrator);
    c.stability_bound = j.value("stability_bound", c.stability_bound);
}

inline void to_json(nlohmann::json& j, const MeasurementConfig& c) {
    j = {{"spatial_stride", c.spatial_stride},
         {"temporal_stride", c.temporal_stride},
         {"noise_level", c.noise_level},
         {"seed", c.seed},
         {"max_frames", c.max_frames}};
}
inline void from_json(const nlohmann::json& j, MeasurementConfig& c) {
    c.spatial_stride = j.value("spatial_stride", c.spatial_stride);
    c.temporal_stride = j.value("temporal_stride", c.temporal_stride);
    c.noise_level = j.value("noise_level", c.noise_level);
    c.seed = j.value("seed", c.seed);
    c.max_frames = j.value("max_frames", c.max_frames);
}

/// Paper-scale defaults per preset (grid, dt, duration, measurement strides).
inline void apply_preset_defaults(SimConfig& sim, MeasurementConfig& meas) {
    if (sim.preset == "burgers") {
        sim.domain = 1.0; sim.nx = sim.ny = 101; sim.dt = 2.5e-4; sim.n_steps = 200;
        meas.spatial_stride = 2; meas.temporal_stride = 5; meas.max_frames = 40;
    } else if (sim.preset == "lambda_omega") {
        sim.domain = 20.0; sim.nx = sim.ny = 101; sim.dt = 1.25e-2; sim.n_steps = 200;
        meas.spatial_stride = 2; meas.temporal_stride = 5; meas.max_frames = 40;
    } else if (sim.preset == "gray_scott") {
        sim.domain = 1.0; sim.nx = sim.ny = 101; sim.dt = 0.5; sim.n_steps = 800;
        sim.ic.kind = "square_seed";
        meas.spatial_stride = 4; meas.temporal_stride = 5; meas.max_frames = 160;
    }
}

// --- Initial conditions -----------------------------------------------------

namespace detail {

/// Circular Gaussian blur of one plane (separable).
inline void blur_plane_circular(std::vector<double>& p, std::size_t h, std::size_t w,
                                double sigma) {
    if (sigma <= 0.0) return;
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> g(2 * r + 1);
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        g[i + r] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += g[i + r];
    }
    for (double& v : g) v /= sum;

    std::vector<double> tmp(h * w, 0.0);
    const long hh = static_cast<long>(h), ww = static_cast<long>(w);
    for (long y = 0; y < hh; ++y) {
        for (long x = 0; x < ww; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) {
                long sx = ((x + i) % ww + ww) % ww;
                acc += g[i + r] * p[y * ww + sx];
            }
            tmp[y * ww + x] = acc;
        }
    }
    for (long y = 0; y < hh; ++y) {
        for (long x = 0; x < ww; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) {
                long sy = ((y + i) % hh + hh) % hh;
                acc += g[i + r] * tmp[sy * ww + x];
            }
            p[y * ww + x] = acc;
        }
    }
}

} // namespace detail

inline FieldTensor initial_condition(const SimConfig& cfg) {
    const std::size_t h = cfg.ny, w = cfg.nx;
    FieldTensor state(1, 2, h, w);
    if (cfg.ic.kind == "file") {
        FieldTensor f = read_pft(cfg.ic.path);
        if (f.nc() != 2 || f.h() != h || f.w() != w) {
            throw std::invalid_argument("initial_condition: file grid mismatch");
        }
        return f.frame(0);
    }
    std::mt19937_64 rng(cfg.seed);
    if (cfg.ic.kind == "smooth_random") {
        std::normal_distribution<double> nrm(0.0, 1.0);
        for (int c = 0; c < 2; ++c) {
            std::vector<double> p(h * w);
            for (double& v : p) v = nrm(rng);
            detail::blur_plane_circular(p, h, w, cfg.ic.sigma);
            double mean = 0.0;
            for (double v : p) mean += v;
            mean /= static_cast<double>(p.size());
            double mx = 0.0;
            for (double& v : p) {
                v -= mean;
                mx = std::max(mx, std::fabs(v));
            }
            const double scale = mx > 0.0 ? cfg.ic.amplitude / mx : 0.0;
            double* dst = state.plane(0, c);
            for (std::size_t i = 0; i < p.size(); ++i) dst[i] = cfg.ic.offset + scale * p[i];
        }
        return state;
    }
    if (cfg.ic.kind == "square_seed") {
        // u = 1, v = 0 everywhere; a perturbed square in the center kicks off
        // pattern formation.
        double* u = state.plane(0, 0);
        double* v = state.plane(0, 1);
        for (std::size_t i = 0; i < h * w; ++i) u[i] = 1.0;
        const long cy = static_cast<long>(h) / 2, cx = static_cast<long>(w) / 2;
        const long r = std::max<long>(2, static_cast<long>(h) / 10);
        for (long y = cy - r; y <= cy + r; ++y) {
            for (long x = cx - r; x <= cx + r; ++x) {
                u[y * w + x] = 0.5;
                v[y * w + x] = 0.25;
            }
        }
        std::uniform_real_distribution<double> uni(-0.02, 0.02);
        for (std::size_t i = 0; i < h * w; ++i) u[i] = std::max(0.0, u[i] + uni(rng));
        for (std::size_t i = 0; i < h * w; ++i) v[i] = std::max(0.0, v[i] + uni(rng));
        return state;
    }
    throw std::invalid_argument("unknown ic kind: " + cfg.ic.kind);
}

// --- Time integration -------------------------------------------------------

/// Classical 4-stage Runge-Kutta step.
inline FieldTensor rk4_step(const RhsEvaluator& ev, const PdeSystem& sys,
                            const FieldTensor& state, double dt, long step = -1) {
    const std::size_t n = state.size();
    FieldTensor k1 = ev.rhs(sys, state, 0, step);
    FieldTensor tmp(1, state.nc(), state.h(), state.w());
    for (std::size_t i = 0; i < n; ++i) tmp.data()[i] = state.data()[i] + 0.5 * dt * k1.data()[i];
    FieldTensor k2 = ev.rhs(sys, tmp, 0, step);
    for (std::size_t i = 0; i < n; ++i) tmp.data()[i] = state.data()[i] + 0.5 * dt * k2.data()[i];
    FieldTensor k3 = ev.rhs(sys, tmp, 0, step);
    for (std::size_t i = 0; i < n; ++i) tmp.data()[i] = state.data()[i] + dt * k3.data()[i];
    FieldTensor k4 = ev.rhs(sys, tmp, 0, step);
    FieldTensor out(1, state.nc(), state.h(), state.w());
    for (std::size_t i = 0; i < n; ++i) {
        out.data()[i] = state.data()[i] +
                        (dt / 6.0) * (k1.data()[i] + 2.0 * k2.data()[i] +
                                      2.0 * k3.data()[i] + k4.data()[i]);
    }
    if (!out.all_finite()) throw BlowupError("rk4_step: non-finite state", step);
    return out;
}

/// Forward-Euler step: out[i] = state[i] + dt * rhs[i]. The element order of
/// this expression is relied on elsewhere for bit-exact equivalence checks.
inline FieldTensor euler_step(const RhsEvaluator& ev, const PdeSystem& sys,
                              const FieldTensor& state, double dt, long step = -1) {
    FieldTensor r = ev.rhs(sys, state, 0, step);
    FieldTensor out(1, state.nc(), state.h(), state.w());
    for (std::size_t i = 0; i < state.size(); ++i) {
        out.data()[i] = state.data()[i] + dt * r.data()[i];
    }
    if (!out.all_finite()) throw BlowupError("euler_step: non-finite state", step);
    return out;
}

/// Emits a warning when the explicit step size looks unstable for the system.
/// Rates: Laplacian terms scale as 8/dx^2, first derivatives as 1/dx,
/// reaction terms as 1.
inline void warn_if_unstable(const SimConfig& cfg, const PdeSystem& sys) {
    const double dx = cfg.dx();
    double worst = 0.0;
    for (const auto& comp : sys.comps) {
        for (const auto& [term, coeff] : comp) {
            double rate = std::fabs(coeff);
            switch (term.deriv) {
                case DerivFactor::LapU:
                case DerivFactor::LapV: rate *= 8.0 / (dx * dx); break;
                case DerivFactor::One: break;
                default: rate *= 1.0 / dx; break;
            }
            worst = std::max(worst, rate);
        }
    }
    if (cfg.dt * worst > cfg.stability_bound) {
        std::cerr << "warning: dt * max term rate = " << cfg.dt * worst
                  << " exceeds stability bound " << cfg.stability_bound << "\n";
    }
}

/// Integrates the configured system and returns (n_steps + 1, 2, h, w)
/// including the initial state.
inline FieldTensor generate_ground_truth(const SimConfig& cfg) {
    PdeSystem sys = system_from_config(cfg);
    warn_if_unstable(cfg, sys);
    RhsEvaluator ev(cfg.dx());
    FieldTensor state = initial_condition(cfg);
    FieldTensor out(cfg.n_steps + 1, 2, cfg.ny, cfg.nx);
    out.set_frame(0, state);
    const bool euler = cfg.integrator == "euler";
    for (std::size_t s = 0; s < cfg.n_steps; ++s) {
        state = euler ? euler_step(ev, sys, state, cfg.dt, static_cast<long>(s))
                      : rk4_step(ev, sys, state, cfg.dt, static_cast<long>(s));
        out.set_frame(s + 1, state);
    }
    return out;
}

// --- Measurement synthesis --------------------------------------------------

/// Adds Gaussian noise to the full-resolution solution first (level times the
/// per-component population std), then subsamples space and time with the
/// given strides. Spatial strides must satisfy (dim - 1) % stride == 0 so the
/// first and last grid lines are retained.
inline FieldTensor synthesize_measurements(const FieldTensor& truth,
                                           const MeasurementConfig& mc) {
    if (mc.spatial_stride < 1 || mc.temporal_stride < 1) {
        throw std::invalid_argument("synthesize_measurements: strides must be >= 1");
    }
    if ((truth.h() - 1) % mc.spatial_stride != 0 ||
        (truth.w() - 1) % mc.spatial_stride != 0) {
        throw std::invalid_argument(
            "synthesize_measurements: spatial stride must divide dim - 1");
    }
    if (mc.noise_level < 0.0) {
        throw std::invalid_argument("synthesize_measurements: negative noise level");
    }

    FieldTensor noisy = truth;
    if (mc.noise_level > 0.0) {
        // population std per component over all space-time
        std::vector<double> stds(truth.nc(), 0.0);
        for (std::size_t c = 0; c < truth.nc(); ++c) {
            double mean = 0.0, n = 0.0;
            for (std::size_t t = 0; t < truth.nt(); ++t) {
                const double* p = truth.plane(t, c);
                for (std::size_t i = 0; i < truth.h() * truth.w(); ++i, n += 1.0) mean += p[i];
            }
            mean /= n;
            double var = 0.0;
            for (std::size_t t = 0; t < truth.nt(); ++t) {
                const double* p = truth.plane(t, c);
                for (std::size_t i = 0; i < truth.h() * truth.w(); ++i) {
                    var += (p[i] - mean) * (p[i] - mean);
                }
            }
            stds[c] = std::sqrt(var / n);
        }
        std::mt19937_64 rng(mc.seed);
        std::normal_distribution<double> nrm(0.0, 1.0);
        for (std::size_t t = 0; t < truth.nt(); ++t) {
            for (std::size_t c = 0; c < truth.nc(); ++c) {
                double* p = noisy.plane(t, c);
                const double s = mc.noise_level * stds[c];
                for (std::size_t i = 0; i < truth.h() * truth.w(); ++i) {
                    p[i] += s * nrm(rng);
                }
            }
        }
    }

    std::size_t n_frames = (truth.nt() - 1) / mc.temporal_stride + 1;
    if (mc.max_frames > 0) n_frames = std::min(n_frames, mc.max_frames);
    const std::size_t lh = (truth.h() - 1) / mc.spatial_stride + 1;
    const std::size_t lw = (truth.w() - 1) / mc.spatial_stride + 1;

    FieldTensor out(n_frames, truth.nc(), lh, lw);
    for (std::size_t f = 0; f < n_frames; ++f) {
        const std::size_t t = f * mc.temporal_stride;
        for (std::size_t c = 0; c < truth.nc(); ++c) {
            const double* src = noisy.plane(t, c);
            double* dst = out.plane(f, c);
            for (std::size_t y = 0; y < lh; ++y) {
                for (std::size_t x = 0; x < lw; ++x) {
                    dst[y * lw + x] =
                        src[(y * mc.spatial_stride) * truth.w() + x * mc.spatial_stride];
                }
            }
        }
    }
    return out;
}

} // namespace pdedisc
