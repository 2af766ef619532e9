#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pdedisc/autodiff.hpp"
#include "pdedisc/errors.hpp"
#include "pdedisc/field.hpp"
#include "pdedisc/optim.hpp"
#include "pdedisc/resample.hpp"
#include "pdedisc/stencil.hpp"

namespace pdedisc {

// --- Symbols for frozen channels and interpretation -------------------------

/// Field symbols a parallel-layer channel can represent: the two state
/// components and their frozen derivative stencils.
enum class Sym { U, V, Ux, Uy, Vx, Vy, LapU, LapV };

inline const char* sym_name(Sym s) {
    switch (s) {
        case Sym::U: return "u";
        case Sym::V: return "v";
        case Sym::Ux: return "u_x";
        case Sym::Uy: return "u_y";
        case Sym::Vx: return "v_x";
        case Sym::Vy: return "v_y";
        case Sym::LapU: return "lap(u)";
        case Sym::LapV: return "lap(v)";
    }
    return "?";
}

inline Sym sym_from_name(const std::string& s) {
    for (Sym y : {Sym::U, Sym::V, Sym::Ux, Sym::Uy, Sym::Vx, Sym::Vy, Sym::LapU,
                  Sym::LapV}) {
        if (s == sym_name(y)) return y;
    }
    throw std::invalid_argument("unknown symbol: " + s);
}

// --- Configuration ----------------------------------------------------------

/// One parallel layer: either a trainable conv bank or a frozen bank of
/// field symbols (identity or derivative stencils), one symbol per channel.
struct LayerSpec {
    bool frozen = false;
    std::vector<Sym> bank;
};

struct BlockConfig {
    int n_layers = 3;
    int n_channels = 8;
    int kernel = 3;
    bool diffusion_path = true;
    bool diffusion_trainable = true;
    double diffusion_init = 1e-3;
    std::size_t h = 33, w = 33;
    double dx = 1.0 / 32;
    double dt = 5e-4;
    std::size_t n_steps = 100;
    std::vector<LayerSpec> layers; // empty = all trainable

    void validate() const {
        if (n_layers < 1 || n_channels < 1) {
            throw std::invalid_argument("BlockConfig: layer/channel counts must be >= 1");
        }
        if (kernel < 1 || kernel % 2 == 0) {
            throw std::invalid_argument("BlockConfig: kernel size must be odd");
        }
        if (dt <= 0.0) throw std::invalid_argument("BlockConfig: dt must be positive");
        if (dx <= 0.0) throw std::invalid_argument("BlockConfig: dx must be positive");
        if (h < 5 || w < 5) throw std::invalid_argument("BlockConfig: grid too small");
        if (!layers.empty() && layers.size() != static_cast<std::size_t>(n_layers)) {
            throw std::invalid_argument("BlockConfig: layer spec count mismatch");
        }
        for (const LayerSpec& l : layers) {
            if (l.frozen && l.bank.size() != static_cast<std::size_t>(n_channels)) {
                throw std::invalid_argument("BlockConfig: frozen bank size mismatch");
            }
        }
    }

    bool layer_frozen(int l) const {
        return !layers.empty() && layers[static_cast<std::size_t>(l)].frozen;
    }
};

struct GeneratorConfig {
    std::string interp = "bicubic"; // or "bilinear"
    int depth = 3;
    int channels = 16;
    int kernel = 3;
    long pretrain_iters = 2000;

    void validate() const {
        if (depth < 1 || channels < 1) {
            throw std::invalid_argument("GeneratorConfig: depth/channels must be >= 1");
        }
        if (kernel < 1 || kernel % 2 == 0) {
            throw std::invalid_argument("GeneratorConfig: kernel size must be odd");
        }
        if (pretrain_iters < 0) {
            throw std::invalid_argument("GeneratorConfig: negative pretraining length");
        }
    }
};

struct TrainConfig {
    long iterations = 3000;
    AdamConfig adam;       // lr 0.002, decay 0.97 per 200 by default
    double eta = 1.0;      // weight of the initial-state consistency term
    std::uint64_t seed = 0;
    long checkpoint_every = 500;
    long max_recoveries = 10;

    void validate() const {
        if (iterations < 0) throw std::invalid_argument("TrainConfig: negative iterations");
        if (eta < 0.0) throw std::invalid_argument("TrainConfig: eta must be >= 0");
        if (checkpoint_every < 1) {
            throw std::invalid_argument("TrainConfig: checkpoint interval must be >= 1");
        }
    }
};

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
    j = {{"frozen", l.frozen}};
    if (l.frozen) {
        std::vector<std::string> names;
        for (Sym s : l.bank) names.push_back(sym_name(s));
        j["bank"] = names;
    }
}
inline void from_json(const nlohmann::json& j, LayerSpec& l) {
    l.frozen = j.value("frozen", false);
    l.bank.clear();
    if (j.contains("bank")) {
        for (const auto& n : j.at("bank")) l.bank.push_back(sym_from_name(n.get<std::string>()));
    }
}

inline void to_json(nlohmann::json& j, const BlockConfig& c) {
    j = {{"n_layers", c.n_layers},   {"n_channels", c.n_channels},
         {"kernel", c.kernel},       {"diffusion_path", c.diffusion_path},
         {"diffusion_trainable", c.diffusion_trainable},
         {"diffusion_init", c.diffusion_init},
         {"grid", {c.h, c.w}},       {"dx", c.dx},
         {"dt", c.dt},               {"n_steps", c.n_steps}};
    if (!c.layers.empty()) j["layers"] = c.layers;
}
inline void from_json(const nlohmann::json& j, BlockConfig& c) {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_channels = j.value("n_channels", c.n_channels);
    c.kernel = j.value("kernel", c.kernel);
    c.diffusion_path = j.value("diffusion_path", c.diffusion_path);
    c.diffusion_trainable = j.value("diffusion_trainable", c.diffusion_trainable);
    c.diffusion_init = j.value("diffusion_init", c.diffusion_init);
    if (j.contains("grid")) {
        c.h = j.at("grid").at(0).get<std::size_t>();
        c.w = j.at("grid").at(1).get<std::size_t>();
    }
    c.dx = j.value("dx", c.dx);
    c.dt = j.value("dt", c.dt);
    c.n_steps = j.value("n_steps", c.n_steps);
    c.layers.clear();
    if (j.contains("layers")) {
        for (const auto& l : j.at("layers")) c.layers.push_back(l.get<LayerSpec>());
    }
}

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"interp", c.interp}, {"depth", c.depth}, {"channels", c.channels},
         {"kernel", c.kernel}, {"pretrain_iters", c.pretrain_iters}};
}
inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    c.interp = j.value("interp", c.interp);
    c.depth = j.value("depth", c.depth);
    c.channels = j.value("channels", c.channels);
    c.kernel = j.value("kernel", c.kernel);
    c.pretrain_iters = j.value("pretrain_iters", c.pretrain_iters);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"iterations", c.iterations}, {"lr", c.adam.lr},
         {"decay", c.adam.decay},      {"decay_every", c.adam.decay_every},
         {"eta", c.eta},               {"seed", c.seed},
         {"checkpoint_every", c.checkpoint_every},
         {"max_recoveries", c.max_recoveries}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.iterations = j.value("iterations", c.iterations);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.decay = j.value("decay", c.adam.decay);
    c.adam.decay_every = j.value("decay_every", c.adam.decay_every);
    c.eta = j.value("eta", c.eta);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.max_recoveries = j.value("max_recoveries", c.max_recoveries);
}

// --- Model ------------------------------------------------------------------

namespace detail {

/// Embeds a stencil kernel into the center of an n x n plane.
inline void embed_kernel(double* plane, int n, const Stencil& s) {
    const int off = (n - s.n) / 2;
    for (int a = 0; a < s.n; ++a)
        for (int b = 0; b < s.n; ++b) plane[(a + off) * n + (b + off)] = s.at(a, b);
}

inline int sym_source(Sym s) {
    switch (s) {
        case Sym::U: case Sym::Ux: case Sym::Uy: case Sym::LapU: return 0;
        default: return 1;
    }
}

/// Builds the (n_channels, 2, 5, 5) kernel bank of a frozen layer using the
/// shared derivative convention (4th-order first derivatives, 9-point
/// Laplacian).
inline FieldTensor build_bank(const std::vector<Sym>& bank, double dx) {
    const Stencil fx = taylor_filter(1, 0, 5, dx, dx);
    const Stencil fy = taylor_filter(0, 1, 5, dx, dx);
    const Stencil lap = laplacian9(dx);
    FieldTensor w(bank.size(), 2, 5, 5, 0.0);
    for (std::size_t c = 0; c < bank.size(); ++c) {
        double* plane = w.plane(c, sym_source(bank[c]));
        switch (bank[c]) {
            case Sym::U: case Sym::V: plane[2 * 5 + 2] = 1.0; break;
            case Sym::Ux: case Sym::Vx: embed_kernel(plane, 5, fx); break;
            case Sym::Uy: case Sym::Vy: embed_kernel(plane, 5, fy); break;
            case Sym::LapU: case Sym::LapV: embed_kernel(plane, 5, lap); break;
        }
    }
    return w;
}

} // namespace detail

/// The reconstruction network: a recurrent block approximating the PDE
/// right-hand side (parallel conv banks combined multiplicatively, a 1x1
/// mixing layer, and a frozen-Laplacian diffusion path with trainable
/// per-component coefficient) plus an initial-state generator that refines
/// the interpolated first measurement frame.
struct ReconModel {
    BlockConfig block;
    GeneratorConfig generator;
    std::uint64_t seed = 0;

    std::vector<FieldTensor> layer_w; // (n_channels, 2, k, k); frozen banks use k=5
    std::vector<FieldTensor> layer_b; // (1, n_channels, 1, 1)
    FieldTensor combine_w;            // (2, n_channels, 1, 1)
    FieldTensor combine_b;            // (1, 2, 1, 1)
    FieldTensor diffusion_raw;          // (1, 2, 1, 1), coefficient = exp(raw)
    FieldTensor diffusion_kernel;       // (2, 2, 5, 5), frozen
    std::vector<FieldTensor> gen_w, gen_b;

    ReconModel(BlockConfig bc, GeneratorConfig ic, std::uint64_t sd)
        : block(std::move(bc)), generator(std::move(ic)), seed(sd) {
        block.validate();
        generator.validate();
        std::mt19937_64 rng(seed);
        auto uniform_init = [&rng](FieldTensor& t, std::size_t fan_in) {
            std::uniform_real_distribution<double> d(-0.5, 0.5);
            const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = s * d(rng);
        };

        const std::size_t nc = static_cast<std::size_t>(block.n_channels);
        const int k = block.kernel;
        for (int l = 0; l < block.n_layers; ++l) {
            if (block.layer_frozen(l)) {
                layer_w.push_back(detail::build_bank(
                    block.layers[static_cast<std::size_t>(l)].bank, block.dx));
                layer_b.emplace_back(1, nc, 1, 1, 0.0);
            } else {
                FieldTensor w(nc, 2, k, k);
                uniform_init(w, 2 * static_cast<std::size_t>(k) * k);
                layer_w.push_back(std::move(w));
                layer_b.emplace_back(1, nc, 1, 1, 0.1);
            }
        }
        combine_w = FieldTensor(2, nc, 1, 1, 1.0 / static_cast<double>(block.n_channels));
        combine_b = FieldTensor(1, 2, 1, 1, 0.0);
        if (block.diffusion_init <= 0.0) {
            throw std::invalid_argument("ReconModel: diffusion coefficient must be positive");
        }
        diffusion_raw = FieldTensor(1, 2, 1, 1, std::log(block.diffusion_init));
        diffusion_kernel = FieldTensor(2, 2, 5, 5, 0.0);
        const Stencil lap = laplacian5x5(block.dx);
        detail::embed_kernel(diffusion_kernel.plane(0, 0), 5, lap);
        detail::embed_kernel(diffusion_kernel.plane(1, 1), 5, lap);

        const std::size_t ch = static_cast<std::size_t>(generator.channels);
        for (int d = 0; d < generator.depth; ++d) {
            const std::size_t ci = d == 0 ? 2 : ch;
            const std::size_t co = d == generator.depth - 1 ? 2 : ch;
            FieldTensor w(co, ci, generator.kernel, generator.kernel);
            uniform_init(w, ci * static_cast<std::size_t>(generator.kernel) * generator.kernel);
            gen_w.push_back(std::move(w));
            gen_b.emplace_back(1, co, 1, 1, 0.0);
        }

        std::size_t have = 0;
        for (const auto& [name, p] : parameters()) have += p->size();
        if (have != expected_parameter_count()) {
            throw std::logic_error("ReconModel: parameter count mismatch");
        }
    }

    /// Trainable parameters in a fixed order. The frozen diffusion kernel and
    /// frozen layer banks are deliberately absent.
    std::vector<std::pair<std::string, FieldTensor*>> parameters() {
        std::vector<std::pair<std::string, FieldTensor*>> out;
        for (int l = 0; l < block.n_layers; ++l) {
            if (block.layer_frozen(l)) continue;
            out.push_back({"layer" + std::to_string(l) + ".w", &layer_w[l]});
            out.push_back({"layer" + std::to_string(l) + ".b", &layer_b[l]});
        }
        out.push_back({"combine.w", &combine_w});
        out.push_back({"combine.b", &combine_b});
        if (block.diffusion_path && block.diffusion_trainable) {
            out.push_back({"diffusion.raw", &diffusion_raw});
        }
        for (int d = 0; d < generator.depth; ++d) {
            out.push_back({"generator" + std::to_string(d) + ".w", &gen_w[d]});
            out.push_back({"generator" + std::to_string(d) + ".b", &gen_b[d]});
        }
        return out;
    }

    std::vector<std::pair<std::string, FieldTensor*>> generator_parameters() {
        std::vector<std::pair<std::string, FieldTensor*>> out;
        for (int d = 0; d < generator.depth; ++d) {
            out.push_back({"generator" + std::to_string(d) + ".w", &gen_w[d]});
            out.push_back({"generator" + std::to_string(d) + ".b", &gen_b[d]});
        }
        return out;
    }

    /// Closed-form count implied by the configuration; checked at build time.
    std::size_t expected_parameter_count() const {
        const std::size_t nc = static_cast<std::size_t>(block.n_channels);
        const std::size_t kk = static_cast<std::size_t>(block.kernel) * block.kernel;
        std::size_t n = 0;
        for (int l = 0; l < block.n_layers; ++l) {
            if (!block.layer_frozen(l)) n += nc * 2 * kk + nc;
        }
        n += 2 * nc + 2;
        if (block.diffusion_path && block.diffusion_trainable) n += 2;
        const std::size_t ch = static_cast<std::size_t>(generator.channels);
        const std::size_t ik = static_cast<std::size_t>(generator.kernel) * generator.kernel;
        for (int d = 0; d < generator.depth; ++d) {
            const std::size_t ci = d == 0 ? 2 : ch;
            const std::size_t co = d == generator.depth - 1 ? 2 : ch;
            n += co * ci * ik + co;
        }
        return n;
    }
};

// --- Tape assembly ----------------------------------------------------------

/// Leaf ids of one model bound into a tape, plus the (parameter, leaf)
/// pairing used to collect gradients after backward().
struct ModelNodes {
    std::vector<int> layer_w, layer_b;
    int combine_w = -1, combine_b = -1;
    int diffusion_kernel = -1, diffusion_bias = -1, diffusion_coeff = -1;
    std::vector<int> gen_w, gen_b;
    std::vector<std::pair<FieldTensor*, int>> trainable;
};

inline ModelNodes bind_model(Tape& t, ReconModel& m, bool trainable,
                             bool generator_only = false) {
    ModelNodes n;
    auto bind = [&](FieldTensor& p, bool tr) {
        int id = t.leaf(p, tr);
        if (tr) n.trainable.push_back({&p, id});
        return id;
    };
    if (!generator_only) {
        for (int l = 0; l < m.block.n_layers; ++l) {
            const bool frozen = m.block.layer_frozen(l);
            n.layer_w.push_back(bind(m.layer_w[l], trainable && !frozen));
            n.layer_b.push_back(bind(m.layer_b[l], trainable && !frozen));
        }
        n.combine_w = bind(m.combine_w, trainable);
        n.combine_b = bind(m.combine_b, trainable);
        if (m.block.diffusion_path) {
            n.diffusion_kernel = t.constant(m.diffusion_kernel);
            n.diffusion_bias = t.constant(FieldTensor(1, 2, 1, 1, 0.0));
            if (m.block.diffusion_trainable) {
                n.diffusion_coeff = t.exp_elem(bind(m.diffusion_raw, trainable));
            } else {
                n.diffusion_coeff =
                    t.constant(FieldTensor(1, 2, 1, 1, m.block.diffusion_init));
            }
        }
    }
    for (int d = 0; d < m.generator.depth; ++d) {
        n.gen_w.push_back(bind(m.gen_w[d], trainable));
        n.gen_b.push_back(bind(m.gen_b[d], trainable));
    }
    return n;
}

/// One evaluation of the learned right-hand side on a (1, 2, H, W) state.
inline int block_forward(Tape& t, const ReconModel& m, const ModelNodes& n, int state) {
    const FieldTensor& sv = t.value(state);
    if (sv.nt() != 1 || sv.nc() != 2 || sv.h() != m.block.h || sv.w() != m.block.w) {
        throw std::invalid_argument("block_forward: state shape mismatch");
    }
    int prod = -1;
    for (int l = 0; l < m.block.n_layers; ++l) {
        int h = t.conv2d(state, n.layer_w[l], n.layer_b[l]);
        prod = l == 0 ? h : t.mul(prod, h);
    }
    int out = t.conv2d(prod, n.combine_w, n.combine_b);
    if (m.block.diffusion_path) {
        int lap = t.conv2d(state, n.diffusion_kernel, n.diffusion_bias);
        out = t.add(out, t.channel_scale(lap, n.diffusion_coeff));
    }
    return out;
}

/// Initial-state generator: interpolated coarse frame plus a learned conv
/// residual (square nonlinearity after the first conv).
inline int generator_forward(Tape& t, const ReconModel& m, const ModelNodes& n,
                       const FieldTensor& interp) {
    if (interp.nt() != 1 || interp.nc() != 2 || interp.h() != m.block.h ||
        interp.w() != m.block.w) {
        throw std::invalid_argument("generator_forward: interpolated frame shape mismatch");
    }
    int x = t.constant(interp);
    int h = t.conv2d(x, n.gen_w[0], n.gen_b[0]);
    if (m.generator.depth > 1) {
        h = t.mul(h, h);
        for (int d = 1; d < m.generator.depth; ++d) h = t.conv2d(h, n.gen_w[d], n.gen_b[d]);
    }
    return t.add(x, h);
}

/// Interpolates a coarse measurement frame onto the model grid.
inline FieldTensor interp_to_grid(const ReconModel& m, const FieldTensor& lr_frame) {
    if ((m.block.h - 1) % (lr_frame.h() - 1) != 0 ||
        (m.block.w - 1) % (lr_frame.w() - 1) != 0 ||
        (m.block.h - 1) / (lr_frame.h() - 1) != (m.block.w - 1) / (lr_frame.w() - 1)) {
        throw std::invalid_argument("interp_to_grid: coarse grid does not embed");
    }
    return upsample(lr_frame, (m.block.h - 1) / (lr_frame.h() - 1), m.generator.interp);
}

/// Forward-Euler rollout of the learned dynamics; returns the node of every
/// frame including the start.
inline std::vector<int> rollout(Tape& t, const ReconModel& m, const ModelNodes& n,
                                int init, std::size_t n_steps) {
    if (n_steps < 1) throw std::invalid_argument("rollout: n_steps must be >= 1");
    std::vector<int> frames{init};
    int state = init;
    for (std::size_t k = 0; k < n_steps; ++k) {
        int f = block_forward(t, m, n, state);
        state = t.add(state, t.scale(f, m.block.dt));
        if (!t.value(state).all_finite()) {
            throw BlowupError("rollout: non-finite state", static_cast<long>(k));
        }
        frames.push_back(state);
    }
    return frames;
}

/// Plain (no-gradient) rollout from a concrete initial state.
inline FieldTensor rollout_values(ReconModel& m, const FieldTensor& hr_init,
                                  std::size_t n_steps) {
    Tape t;
    ModelNodes n = bind_model(t, m, false);
    std::vector<int> frames = rollout(t, m, n, t.constant(hr_init), n_steps);
    FieldTensor out(frames.size(), 2, m.block.h, m.block.w);
    for (std::size_t k = 0; k < frames.size(); ++k) out.set_frame(k, t.value(frames[k]));
    return out;
}

// --- Loss -------------------------------------------------------------------

struct LossNodes {
    int total = -1, data = -1, ic = -1;
};

/// Measurement misfit plus the weighted initial-state consistency term.
/// Frame f of the measurements corresponds to rollout frame f * tau with
/// tau = n_steps / n_frames; spatially the coarse grid samples every
/// stride-th point of the fine grid.
inline LossNodes reconstruction_loss(Tape& t, const std::vector<int>& frames,
                                     const FieldTensor& meas,
                                     const FieldTensor& interp_init, double eta) {
    const FieldTensor& f0 = t.value(frames[0]);
    const std::size_t n_steps = frames.size() - 1;
    if (n_steps % meas.nt() != 0) {
        throw std::invalid_argument(
            "reconstruction_loss: rollout length must be a multiple of frame count");
    }
    const std::size_t tau = n_steps / meas.nt();
    if ((f0.h() - 1) % (meas.h() - 1) != 0 ||
        (f0.h() - 1) / (meas.h() - 1) != (f0.w() - 1) / (meas.w() - 1)) {
        throw std::invalid_argument("reconstruction_loss: measurement grid mismatch");
    }
    const std::size_t stride = (f0.h() - 1) / (meas.h() - 1);

    LossNodes out;
    int acc = -1;
    for (std::size_t f = 0; f < meas.nt(); ++f) {
        int samp = stride == 1 ? frames[f * tau] : t.stride_sample(frames[f * tau], stride);
        int m = t.mse_against(samp, meas.frame(f));
        acc = f == 0 ? m : t.add(acc, m);
    }
    out.data = t.scale(acc, 1.0 / static_cast<double>(meas.nt()));
    out.ic = t.mse_against(frames[0], interp_init);
    out.total = t.add(out.data, t.scale(out.ic, eta));
    return out;
}

// --- Training ---------------------------------------------------------------

struct TrainRow {
    long iteration = 0;
    double loss = 0.0, data_term = 0.0, ic_term = 0.0, lr = 0.0;
};

struct TrainResult {
    std::vector<TrainRow> history;
    double final_loss = 0.0;
    long recoveries = 0;
};

inline void write_history_csv(const std::string& path, const std::vector<TrainRow>& h) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_history_csv: cannot open " + path);
    os << "iteration,loss,data_term,ic_term,lr\n";
    os.precision(17);
    for (const TrainRow& r : h) {
        os << r.iteration << ',' << r.loss << ',' << r.data_term << ',' << r.ic_term
           << ',' << r.lr << '\n';
    }
}

namespace detail {

struct Snapshot {
    std::vector<FieldTensor> params;
    AdamState opt;
    long iteration = 0;
    std::size_t history_len = 0;
};

inline Snapshot take_snapshot(ReconModel& m, const AdamState& st, long it,
                              std::size_t hist) {
    Snapshot s{{}, st, it, hist};
    for (auto& [name, p] : m.parameters()) s.params.push_back(*p);
    return s;
}

inline void restore_snapshot(ReconModel& m, AdamState& st, const Snapshot& s) {
    auto ps = m.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) *ps[i].second = s.params[i];
    const AdamConfig keep = st.cfg; // keep the (possibly halved) learning rate
    st = s.opt;
    st.cfg = keep;
}

} // namespace detail

/// Pretrains the initial-state generator toward the plain interpolant, then
/// jointly trains all parameters on the measurement misfit. Deterministic for
/// a fixed seed. On numerical blowup the last checkpoint is restored and the
/// learning rate halved, up to max_recoveries times.
inline TrainResult train(ReconModel& m, const TrainConfig& cfg, const FieldTensor& meas) {
    cfg.validate();
    if (meas.nc() != 2) throw std::invalid_argument("train: measurements need 2 channels");
    const FieldTensor interp0 = interp_to_grid(m, meas.frame(0));

    // stage 1: teach the generator to reproduce the interpolant
    {
        AdamState st(cfg.adam);
        std::vector<std::size_t> sizes;
        for (auto& [name, p] : m.generator_parameters()) sizes.push_back(p->size());
        st.init(sizes);
        for (long it = 0; it < m.generator.pretrain_iters; ++it) {
            Tape t;
            ModelNodes n = bind_model(t, m, true, true);
            int loss = t.mse_against(generator_forward(t, m, n, interp0), interp0);
            t.backward(loss);
            std::vector<FieldTensor*> ps;
            std::vector<const FieldTensor*> gs;
            for (auto& [p, id] : n.trainable) {
                ps.push_back(p);
                gs.push_back(&t.grad(id));
            }
            adam_step(st, ps, gs);
        }
    }

    // stage 2: joint training on the rollout misfit
    TrainResult out;
    AdamState st(cfg.adam);
    std::vector<std::size_t> sizes;
    for (auto& [name, p] : m.parameters()) sizes.push_back(p->size());
    st.init(sizes);
    detail::Snapshot snap = detail::take_snapshot(m, st, 0, 0);

    long it = 0;
    while (it < cfg.iterations) {
        const double lr_now = effective_lr(st);
        bool blew_up = false;
        try {
            Tape t;
            ModelNodes n = bind_model(t, m, true);
            int init = generator_forward(t, m, n, interp0);
            std::vector<int> frames = rollout(t, m, n, init, m.block.n_steps);
            LossNodes loss = reconstruction_loss(t, frames, meas, interp0, cfg.eta);
            const double lv = t.value(loss.total).data()[0];
            if (!std::isfinite(lv)) throw BlowupError("train: non-finite loss", it);
            t.backward(loss.total);
            std::vector<FieldTensor*> ps;
            std::vector<const FieldTensor*> gs;
            for (auto& [p, id] : n.trainable) {
                ps.push_back(p);
                gs.push_back(&t.grad(id));
            }
            adam_step(st, ps, gs);
            out.history.push_back({it, lv, t.value(loss.data).data()[0],
                                   t.value(loss.ic).data()[0], lr_now});
        } catch (const BlowupError&) {
            blew_up = true;
        }
        if (blew_up) {
            if (out.recoveries >= cfg.max_recoveries) {
                throw BlowupError("train: numerical blowup persists after " +
                                      std::to_string(out.recoveries) + " recoveries",
                                  it);
            }
            ++out.recoveries;
            st.cfg.lr *= 0.5;
            detail::restore_snapshot(m, st, snap);
            out.history.resize(snap.history_len);
            it = snap.iteration;
            continue;
        }
        ++it;
        if (it % cfg.checkpoint_every == 0) {
            snap = detail::take_snapshot(m, st, it, out.history.size());
        }
    }
    out.final_loss = out.history.empty() ? 0.0 : out.history.back().loss;
    return out;
}

/// Runs the generator on the first measurement frame and rolls the learned
/// dynamics forward; the reconstructed fine-grid trajectory.
inline FieldTensor reconstruct(ReconModel& m, const FieldTensor& meas) {
    Tape t;
    ModelNodes n = bind_model(t, m, false);
    int init = generator_forward(t, m, n, interp_to_grid(m, meas.frame(0)));
    std::vector<int> frames = rollout(t, m, n, init, m.block.n_steps);
    FieldTensor out(frames.size(), 2, m.block.h, m.block.w);
    for (std::size_t k = 0; k < frames.size(); ++k) out.set_frame(k, t.value(frames[k]));
    return out;
}

// --- Symbolic interpretation ------------------------------------------------

struct Monomial {
    std::vector<Sym> syms; // sorted; empty = constant
    double coeff = 0.0;
};

inline std::string monomial_name(const std::vector<Sym>& syms) {
    if (syms.empty()) return "1";
    std::string out;
    std::size_t i = 0;
    while (i < syms.size()) {
        std::size_t j = i;
        while (j < syms.size() && syms[j] == syms[i]) ++j;
        if (!out.empty()) out += "*";
        out += sym_name(syms[i]);
        if (j - i > 1) out += "^" + std::to_string(j - i);
        i = j;
    }
    return out;
}

/// Expands the trained block into a polynomial over the channel symbols.
/// Requires the interpretable regime: every layer either frozen or 1x1.
inline std::array<std::vector<Monomial>, 2> interpret(const ReconModel& m,
                                                      double rel_threshold = 1e-3) {
    for (int l = 0; l < m.block.n_layers; ++l) {
        if (!m.block.layer_frozen(l) && m.block.kernel != 1) {
            throw UnsupportedConfig(
                "interpret: trainable layers must use 1x1 kernels (layer " +
                std::to_string(l) + " does not)");
        }
    }
    using Expr = std::vector<std::pair<std::vector<Sym>, double>>;
    std::array<std::map<std::vector<Sym>, double>, 2> acc;

    for (int c = 0; c < m.block.n_channels; ++c) {
        Expr cur{{{}, 1.0}};
        for (int l = 0; l < m.block.n_layers; ++l) {
            Expr factor;
            if (m.block.layer_frozen(l)) {
                factor.push_back({{m.block.layers[l].bank[c]}, 1.0});
            } else {
                const double wu = m.layer_w[l](c, 0, 0, 0);
                const double wv = m.layer_w[l](c, 1, 0, 0);
                const double b = m.layer_b[l].data()[c];
                if (wu != 0.0) factor.push_back({{Sym::U}, wu});
                if (wv != 0.0) factor.push_back({{Sym::V}, wv});
                if (b != 0.0) factor.push_back({{}, b});
            }
            Expr next;
            for (const auto& [s1, c1] : cur) {
                for (const auto& [s2, c2] : factor) {
                    std::vector<Sym> merged = s1;
                    merged.insert(merged.end(), s2.begin(), s2.end());
                    std::sort(merged.begin(), merged.end());
                    next.push_back({std::move(merged), c1 * c2});
                }
            }
            cur = std::move(next);
        }
        for (int comp = 0; comp < 2; ++comp) {
            const double f = m.combine_w(comp, c, 0, 0);
            if (f == 0.0) continue;
            for (const auto& [s, v] : cur) acc[comp][s] += f * v;
        }
    }
    for (int comp = 0; comp < 2; ++comp) acc[comp][{}] += m.combine_b.data()[comp];
    if (m.block.diffusion_path) {
        const double lu = m.block.diffusion_trainable ? std::exp(m.diffusion_raw.data()[0])
                                                    : m.block.diffusion_init;
        const double lv = m.block.diffusion_trainable ? std::exp(m.diffusion_raw.data()[1])
                                                    : m.block.diffusion_init;
        acc[0][{Sym::LapU}] += lu;
        acc[1][{Sym::LapV}] += lv;
    }

    std::array<std::vector<Monomial>, 2> out;
    for (int comp = 0; comp < 2; ++comp) {
        double mx = 0.0;
        for (const auto& [s, v] : acc[comp]) mx = std::max(mx, std::fabs(v));
        for (const auto& [s, v] : acc[comp]) {
            if (v == 0.0 || std::fabs(v) < rel_threshold * mx) continue;
            out[comp].push_back({s, v});
        }
    }
    return out;
}

// --- Checkpoints ------------------------------------------------------------

/// Checkpoint file: magic "PDCK", u64 LE header length, JSON header
/// (configs, seed, iteration, parameter manifest with byte offsets), then the
/// concatenated f64 parameter payload.
inline void save_checkpoint(const std::string& path, ReconModel& m, long iteration) {
    nlohmann::json header{{"block", m.block}, {"generator", m.generator}, {"seed", m.seed},
                          {"iteration", iteration}};
    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    auto params = m.parameters();
    for (auto& [name, p] : params) {
        manifest.push_back({{"name", name},
                            {"shape", {p->nt(), p->nc(), p->h(), p->w()}},
                            {"offset", offset}});
        offset += p->size() * sizeof(double);
    }
    header["params"] = manifest;
    const std::string htext = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write("PDCK", 4);
    std::string lenbytes;
    detail::put_u64(lenbytes, htext.size());
    os.write(lenbytes.data(), 8);
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (auto& [name, p] : params) {
        os.write(reinterpret_cast<const char*>(p->data()),
                 static_cast<std::streamsize>(p->size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("save_checkpoint: short write to " + path);
}

struct Checkpoint {
    ReconModel model;
    long iteration = 0;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    unsigned char lenb[8];
    is.read(magic, 4);
    is.read(reinterpret_cast<char*>(lenb), 8);
    if (!is || std::memcmp(magic, "PDCK", 4) != 0) {
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    }
    std::string htext(detail::get_u64(lenb), '\0');
    is.read(htext.data(), static_cast<std::streamsize>(htext.size()));
    if (!is) throw std::runtime_error("load_checkpoint: truncated header in " + path);
    nlohmann::json header = nlohmann::json::parse(htext);

    Checkpoint ck{ReconModel(header.at("block").get<BlockConfig>(),
                             header.at("generator").get<GeneratorConfig>(),
                             header.at("seed").get<std::uint64_t>()),
                  header.at("iteration").get<long>()};
    auto params = ck.model.parameters();
    std::size_t idx = 0;
    for (const auto& entry : header.at("params")) {
        if (idx >= params.size() ||
            entry.at("name").get<std::string>() != params[idx].first) {
            throw std::runtime_error("load_checkpoint: parameter manifest mismatch");
        }
        FieldTensor* p = params[idx].second;
        const auto& sh = entry.at("shape");
        if (sh.at(0).get<std::size_t>() != p->nt() || sh.at(1).get<std::size_t>() != p->nc() ||
            sh.at(2).get<std::size_t>() != p->h() || sh.at(3).get<std::size_t>() != p->w()) {
            throw std::runtime_error("load_checkpoint: parameter shape mismatch");
        }
        is.read(reinterpret_cast<char*>(p->data()),
                static_cast<std::streamsize>(p->size() * sizeof(double)));
        ++idx;
    }
    if (!is || idx != params.size()) {
        throw std::runtime_error("load_checkpoint: truncated payload in " + path);
    }
    return ck;
}

} // namespace pdedisc
