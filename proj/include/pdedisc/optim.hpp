#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "pdedisc/field.hpp"

namespace pdedisc {

struct AdamConfig {
    double lr = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double decay = 0.97;       // learning-rate multiplier
    long decay_every = 200;    // iterations per decay step
};

/// Moment accumulators for a fixed list of parameter tensors. `step` counts
/// completed updates.
struct AdamState {
    AdamConfig cfg;
    std::vector<std::vector<double>> m, v;
    long step = 0;

    explicit AdamState(AdamConfig c = {}) : cfg(c) {}

    void init(const std::vector<std::size_t>& sizes) {
        m.clear();
        v.clear();
        for (std::size_t s : sizes) {
            m.emplace_back(s, 0.0);
            v.emplace_back(s, 0.0);
        }
        step = 0;
    }
};

inline double effective_lr(const AdamState& s) {
    return s.cfg.lr * std::pow(s.cfg.decay, static_cast<double>(s.step / s.cfg.decay_every));
}

/// One Adam update over the full parameter list. Gradients and parameters are
/// raw views; entry k must match the size registered at init.
inline void adam_step(AdamState& s, const std::vector<double*>& params,
                      const std::vector<const double*>& grads) {
    if (params.size() != s.m.size() || grads.size() != s.m.size()) {
        throw std::invalid_argument("adam_step: parameter list does not match state");
    }
    const double lr = effective_lr(s);
    const double t = static_cast<double>(s.step + 1);
    const double bc1 = 1.0 - std::pow(s.cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(s.cfg.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        double* p = params[k];
        const double* g = grads[k];
        std::vector<double>& m = s.m[k];
        std::vector<double>& v = s.v[k];
        for (std::size_t i = 0; i < m.size(); ++i) {
            m[i] = s.cfg.beta1 * m[i] + (1.0 - s.cfg.beta1) * g[i];
            v[i] = s.cfg.beta2 * v[i] + (1.0 - s.cfg.beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p[i] -= lr * mh / (std::sqrt(vh) + s.cfg.eps);
        }
    }
    ++s.step;
}

/// Convenience overload updating FieldTensor parameters in place.
inline void adam_step(AdamState& s, std::vector<FieldTensor*> params,
                      const std::vector<const FieldTensor*>& grads) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
    }
    std::vector<double*> p;
    std::vector<const double*> g;
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (!params[k]->same_shape(*grads[k])) {
            throw std::invalid_argument("adam_step: gradient shape mismatch");
        }
        p.push_back(params[k]->data());
        g.push_back(grads[k]->data());
    }
    adam_step(s, p, g);
}

} // namespace pdedisc
