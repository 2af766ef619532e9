#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pdedisc/errors.hpp"
#include "pdedisc/field.hpp"
#include "pdedisc/pde.hpp"
#include "pdedisc/stencil.hpp"

namespace pdedisc {

namespace detail {

/// out[y, x] += kv * in[(y + dy) mod h, (x + dx) mod w], |dx| < w required.
inline void add_shifted_scaled(double* out, const double* in, std::size_t h,
                               std::size_t w, long dy, long dx, double kv) {
    const long hh = static_cast<long>(h), ww = static_cast<long>(w);
    const long lo = std::max<long>(0, -dx);
    const long hi = std::min<long>(ww, ww - dx);
    for (long y = 0; y < hh; ++y) {
        const long sy = ((y + dy) % hh + hh) % hh;
        const double* row = in + sy * ww;
        double* orow = out + y * ww;
        for (long x = 0; x < lo; ++x) orow[x] += kv * row[x + dx + ww];
        for (long x = lo; x < hi; ++x) orow[x] += kv * row[x + dx];
        for (long x = hi; x < ww; ++x) orow[x] += kv * row[x + dx - ww];
    }
}

/// sum_{y,x} a[y, x] * b[(y + dy) mod h, (x + dx) mod w]
inline double dot_shifted(const double* a, const double* b, std::size_t h,
                          std::size_t w, long dy, long dx) {
    const long hh = static_cast<long>(h), ww = static_cast<long>(w);
    const long lo = std::max<long>(0, -dx);
    const long hi = std::min<long>(ww, ww - dx);
    double s = 0.0;
    for (long y = 0; y < hh; ++y) {
        const long sy = ((y + dy) % hh + hh) % hh;
        const double* brow = b + sy * ww;
        const double* arow = a + y * ww;
        for (long x = 0; x < lo; ++x) s += arow[x] * brow[x + dx + ww];
        for (long x = lo; x < hi; ++x) s += arow[x] * brow[x + dx];
        for (long x = hi; x < ww; ++x) s += arow[x] * brow[x + dx - ww];
    }
    return s;
}

/// Applies the transpose of a stencil: out += S^T g, i.e. the same kernel with
/// both offsets negated.
inline void accumulate_stencil_adjoint(const Stencil& s, const double* g, double* out,
                                       std::size_t h, std::size_t w, double gain = 1.0) {
    const int c = (s.n - 1) / 2;
    for (int a = 0; a < s.n; ++a) {
        for (int b = 0; b < s.n; ++b) {
            const double kv = s.at(a, b);
            if (kv == 0.0) continue;
            add_shifted_scaled(out, g, h, w, -(a - c), -(b - c), gain * kv);
        }
    }
}

} // namespace detail

/// Eager reverse-mode tape over the primitive set used by the reconstruction
/// and fine-tuning models. Each op runs its forward pass immediately and
/// records parents; backward() walks the recording in reverse. Values and
/// gradients are rank-4 tensors; scalars use shape (1, 1, 1, 1). A tape is
/// rebuilt per training iteration; parameters live outside as FieldTensors
/// and enter through trainable leaves.
class Tape {
public:
    enum class Op {
        Leaf,
        Conv2d,         // x (1,ci,h,w), weight (co,ci,n,n), bias (1,co,1,1)
        Mul,            // elementwise, same shape
        Add,            // elementwise, same shape
        Scale,          // multiply by compile-time constant
        Exp,            // elementwise exp
        ChannelScale,   // x (1,c,h,w) * s (1,c,1,1), broadcast over space
        SelectChannel,  // (1,c,h,w) -> (1,1,h,w)
        ConcatChannels, // stack two tensors along the channel axis
        StrideSample,   // keep every s-th row/column, endpoints included
        MseAgainst,     // mean squared difference against a constant tensor
        MeanAll,        // mean over all elements -> scalar
        PhysicsRhs,     // symbolic PDE right-hand side, coefficients trainable
    };

    int leaf(const FieldTensor& value, bool trainable) {
        Node n;
        n.op = Op::Leaf;
        n.value = value;
        n.requires_grad = trainable;
        return push(std::move(n));
    }
    int constant(const FieldTensor& value) { return leaf(value, false); }

    int conv2d(int x, int w, int b) {
        const FieldTensor& xv = value(x);
        const FieldTensor& wv = value(w);
        const FieldTensor& bv = value(b);
        if (xv.nt() != 1) throw std::invalid_argument("conv2d: input must be one frame");
        const std::size_t co = wv.nt(), ci = wv.nc(), n = wv.h();
        if (wv.w() != n || n % 2 == 0) {
            throw std::invalid_argument("conv2d: kernel must be square with odd side");
        }
        if (ci != xv.nc()) throw std::invalid_argument("conv2d: channel mismatch");
        if (n > xv.h() || n > xv.w()) {
            throw std::invalid_argument("conv2d: kernel larger than field");
        }
        if (bv.nt() != 1 || bv.nc() != co || bv.h() != 1 || bv.w() != 1) {
            throw std::invalid_argument("conv2d: bias must have shape (1, out_channels, 1, 1)");
        }
        Node nd;
        nd.op = Op::Conv2d;
        nd.parents = {x, w, b};
        nd.value = FieldTensor(1, co, xv.h(), xv.w());
        for (std::size_t o = 0; o < co; ++o) {
            double* out = nd.value.plane(0, o);
            for (std::size_t i = 0; i < ci; ++i) {
                correlate_plane_circular(xv.plane(0, i), out, xv.h(), xv.w(),
                                         wv.plane(o, i), static_cast<int>(n), i > 0);
            }
            const double bias = bv.data()[o];
            for (std::size_t j = 0; j < xv.h() * xv.w(); ++j) out[j] += bias;
        }
        return push(std::move(nd));
    }

    int mul(int a, int b) {
        const FieldTensor& av = value(a);
        const FieldTensor& bv = value(b);
        if (!av.same_shape(bv)) throw std::invalid_argument("mul: shape mismatch");
        Node nd;
        nd.op = Op::Mul;
        nd.parents = {a, b};
        nd.value = av;
        for (std::size_t i = 0; i < av.size(); ++i) nd.value.data()[i] *= bv.data()[i];
        return push(std::move(nd));
    }

    int add(int a, int b) {
        const FieldTensor& av = value(a);
        const FieldTensor& bv = value(b);
        if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
        Node nd;
        nd.op = Op::Add;
        nd.parents = {a, b};
        nd.value = av;
        for (std::size_t i = 0; i < av.size(); ++i) nd.value.data()[i] += bv.data()[i];
        return push(std::move(nd));
    }

    int scale(int x, double s) {
        Node nd;
        nd.op = Op::Scale;
        nd.parents = {x};
        nd.scalar = s;
        nd.value = value(x);
        for (std::size_t i = 0; i < nd.value.size(); ++i) nd.value.data()[i] *= s;
        return push(std::move(nd));
    }

    int exp_elem(int x) {
        Node nd;
        nd.op = Op::Exp;
        nd.parents = {x};
        nd.value = value(x);
        for (std::size_t i = 0; i < nd.value.size(); ++i) {
            nd.value.data()[i] = std::exp(nd.value.data()[i]);
        }
        return push(std::move(nd));
    }

    int channel_scale(int x, int s) {
        const FieldTensor& xv = value(x);
        const FieldTensor& sv = value(s);
        if (sv.nt() != 1 || sv.nc() != xv.nc() || sv.h() != 1 || sv.w() != 1) {
            throw std::invalid_argument("channel_scale: scale must be (1, nc, 1, 1)");
        }
        Node nd;
        nd.op = Op::ChannelScale;
        nd.parents = {x, s};
        nd.value = xv;
        for (std::size_t c = 0; c < xv.nc(); ++c) {
            const double f = sv.data()[c];
            double* p = nd.value.plane(0, c);
            for (std::size_t i = 0; i < xv.h() * xv.w(); ++i) p[i] *= f;
        }
        return push(std::move(nd));
    }

    int select_channel(int x, std::size_t c) {
        const FieldTensor& xv = value(x);
        if (c >= xv.nc()) throw std::invalid_argument("select_channel: index out of range");
        Node nd;
        nd.op = Op::SelectChannel;
        nd.parents = {x};
        nd.channel = c;
        nd.value = FieldTensor(1, 1, xv.h(), xv.w());
        std::memcpy(nd.value.data(), xv.plane(0, c), xv.h() * xv.w() * sizeof(double));
        return push(std::move(nd));
    }

    int concat_channels(int a, int b) {
        const FieldTensor& av = value(a);
        const FieldTensor& bv = value(b);
        if (av.nt() != 1 || bv.nt() != 1 || av.h() != bv.h() || av.w() != bv.w()) {
            throw std::invalid_argument("concat_channels: spatial shape mismatch");
        }
        Node nd;
        nd.op = Op::ConcatChannels;
        nd.parents = {a, b};
        nd.value = FieldTensor(1, av.nc() + bv.nc(), av.h(), av.w());
        std::memcpy(nd.value.data(), av.data(), av.size() * sizeof(double));
        std::memcpy(nd.value.data() + av.size(), bv.data(), bv.size() * sizeof(double));
        return push(std::move(nd));
    }

    int stride_sample(int x, std::size_t stride) {
        const FieldTensor& xv = value(x);
        if (stride < 1 || (xv.h() - 1) % stride != 0 || (xv.w() - 1) % stride != 0) {
            throw std::invalid_argument("stride_sample: stride must divide dim - 1");
        }
        const std::size_t lh = (xv.h() - 1) / stride + 1, lw = (xv.w() - 1) / stride + 1;
        Node nd;
        nd.op = Op::StrideSample;
        nd.parents = {x};
        nd.stride = stride;
        nd.value = FieldTensor(1, xv.nc(), lh, lw);
        for (std::size_t c = 0; c < xv.nc(); ++c) {
            const double* src = xv.plane(0, c);
            double* dst = nd.value.plane(0, c);
            for (std::size_t y = 0; y < lh; ++y)
                for (std::size_t x2 = 0; x2 < lw; ++x2)
                    dst[y * lw + x2] = src[y * stride * xv.w() + x2 * stride];
        }
        return push(std::move(nd));
    }

    int mse_against(int x, FieldTensor target) {
        const FieldTensor& xv = value(x);
        if (!xv.same_shape(target)) throw std::invalid_argument("mse_against: shape mismatch");
        Node nd;
        nd.op = Op::MseAgainst;
        nd.parents = {x};
        nd.aux = std::move(target);
        nd.value = FieldTensor(1, 1, 1, 1);
        double s = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double d = xv.data()[i] - nd.aux.data()[i];
            s += d * d;
        }
        nd.value.data()[0] = s / static_cast<double>(xv.size());
        return push(std::move(nd));
    }

    int mean_all(int x) {
        Node nd;
        nd.op = Op::MeanAll;
        nd.parents = {x};
        nd.value = FieldTensor(1, 1, 1, 1);
        double s = 0.0;
        for (std::size_t i = 0; i < value(x).size(); ++i) s += value(x).data()[i];
        nd.value.data()[0] = s / static_cast<double>(value(x).size());
        return push(std::move(nd));
    }

    /// Records the symbolic right-hand side of a two-component system whose
    /// per-term coefficients are the entries of two coefficient nodes (shape
    /// (1, 1, 1, n_terms)). The forward pass routes through the shared
    /// evaluator, so its arithmetic matches plain simulation bit for bit.
    /// The evaluator must outlive the tape.
    int physics_rhs(int state, std::array<int, 2> coeffs,
                    std::array<std::vector<TermDescriptor>, 2> terms,
                    const RhsEvaluator& ev) {
        const FieldTensor& sv = value(state);
        if (sv.nt() != 1 || sv.nc() != 2) {
            throw std::invalid_argument("physics_rhs: state must be (1, 2, h, w)");
        }
        PdeSystem sys;
        for (int c = 0; c < 2; ++c) {
            const FieldTensor& cv = value(coeffs[c]);
            if (cv.size() != terms[c].size()) {
                throw std::invalid_argument("physics_rhs: coefficient/term count mismatch");
            }
            for (std::size_t j = 0; j < terms[c].size(); ++j) {
                sys.comps[c].push_back({terms[c][j], cv.data()[j]});
            }
        }
        Node nd;
        nd.op = Op::PhysicsRhs;
        nd.parents = {state, coeffs[0], coeffs[1]};
        nd.terms = std::move(terms);
        nd.evaluator = &ev;
        nd.value = ev.rhs(sys, sv);
        return push(std::move(nd));
    }

    const FieldTensor& value(int id) const { return nodes_.at(id).value; }

    /// Gradient of the last backward() target with respect to node id.
    const FieldTensor& grad(int id) const {
        const Node& n = nodes_.at(id);
        if (!n.requires_grad || !n.grad.same_shape(n.value)) {
            throw std::invalid_argument("grad: node has no gradient");
        }
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(int loss) {
        Node& ln = nodes_.at(loss);
        if (ln.value.size() != 1) {
            throw std::invalid_argument("backward: loss node must be scalar");
        }
        for (Node& n : nodes_) {
            if (n.requires_grad) {
                n.grad = FieldTensor(n.value.nt(), n.value.nc(), n.value.h(), n.value.w());
            }
        }
        if (!ln.requires_grad) return; // loss does not depend on any trainable leaf
        ln.grad.data()[0] = 1.0;
        for (int id = loss; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.requires_grad || n.op == Op::Leaf) continue;
            backprop(n);
        }
    }

private:
    struct Node {
        Op op = Op::Leaf;
        FieldTensor value;
        FieldTensor grad;
        std::vector<int> parents;
        bool requires_grad = false;
        double scalar = 0.0;
        std::size_t channel = 0;
        std::size_t stride = 1;
        FieldTensor aux; // MseAgainst target
        std::array<std::vector<TermDescriptor>, 2> terms;
        const RhsEvaluator* evaluator = nullptr;
    };

    int push(Node&& n) {
        for (int p : n.parents) {
            if (nodes_.at(p).requires_grad) n.requires_grad = true;
        }
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    bool wants(int id) const { return nodes_[id].requires_grad; }
    double* gptr(int id) { return nodes_[id].grad.data(); }

    void backprop(Node& n) {
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Conv2d: {
                Node& x = nodes_[n.parents[0]];
                Node& w = nodes_[n.parents[1]];
                Node& b = nodes_[n.parents[2]];
                const std::size_t co = w.value.nt(), ci = w.value.nc();
                const int kn = static_cast<int>(w.value.h());
                const int c = (kn - 1) / 2;
                const std::size_t h = x.value.h(), wd = x.value.w();
                for (std::size_t o = 0; o < co; ++o) {
                    const double* g = n.grad.plane(0, o);
                    if (b.requires_grad) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < h * wd; ++i) s += g[i];
                        b.grad.data()[o] += s;
                    }
                    for (std::size_t i = 0; i < ci; ++i) {
                        if (w.requires_grad) {
                            double* gw = w.grad.plane(o, i);
                            for (int a = 0; a < kn; ++a)
                                for (int bb = 0; bb < kn; ++bb)
                                    gw[a * kn + bb] += detail::dot_shifted(
                                        g, x.value.plane(0, i), h, wd, a - c, bb - c);
                        }
                        if (x.requires_grad) {
                            double* gx = x.grad.plane(0, i);
                            const double* kw = w.value.plane(o, i);
                            for (int a = 0; a < kn; ++a) {
                                for (int bb = 0; bb < kn; ++bb) {
                                    const double kv = kw[a * kn + bb];
                                    if (kv == 0.0) continue;
                                    detail::add_shifted_scaled(gx, g, h, wd, -(a - c),
                                                               -(bb - c), kv);
                                }
                            }
                        }
                    }
                }
                break;
            }
            case Op::Mul: {
                Node& a = nodes_[n.parents[0]];
                Node& b = nodes_[n.parents[1]];
                for (std::size_t i = 0; i < n.value.size(); ++i) {
                    const double g = n.grad.data()[i];
                    if (a.requires_grad) a.grad.data()[i] += g * b.value.data()[i];
                    if (b.requires_grad) b.grad.data()[i] += g * a.value.data()[i];
                }
                break;
            }
            case Op::Add: {
                for (int side = 0; side < 2; ++side) {
                    Node& p = nodes_[n.parents[side]];
                    if (!p.requires_grad) continue;
                    for (std::size_t i = 0; i < n.value.size(); ++i) {
                        p.grad.data()[i] += n.grad.data()[i];
                    }
                }
                break;
            }
            case Op::Scale: {
                Node& p = nodes_[n.parents[0]];
                if (p.requires_grad) {
                    for (std::size_t i = 0; i < n.value.size(); ++i) {
                        p.grad.data()[i] += n.scalar * n.grad.data()[i];
                    }
                }
                break;
            }
            case Op::Exp: {
                Node& p = nodes_[n.parents[0]];
                if (p.requires_grad) {
                    for (std::size_t i = 0; i < n.value.size(); ++i) {
                        p.grad.data()[i] += n.grad.data()[i] * n.value.data()[i];
                    }
                }
                break;
            }
            case Op::ChannelScale: {
                Node& x = nodes_[n.parents[0]];
                Node& s = nodes_[n.parents[1]];
                const std::size_t hw = n.value.h() * n.value.w();
                for (std::size_t c = 0; c < n.value.nc(); ++c) {
                    const double* g = n.grad.plane(0, c);
                    if (x.requires_grad) {
                        const double f = s.value.data()[c];
                        double* gx = x.grad.plane(0, c);
                        for (std::size_t i = 0; i < hw; ++i) gx[i] += f * g[i];
                    }
                    if (s.requires_grad) {
                        const double* xp = x.value.plane(0, c);
                        double acc = 0.0;
                        for (std::size_t i = 0; i < hw; ++i) acc += g[i] * xp[i];
                        s.grad.data()[c] += acc;
                    }
                }
                break;
            }
            case Op::SelectChannel: {
                Node& p = nodes_[n.parents[0]];
                if (p.requires_grad) {
                    double* gx = p.grad.plane(0, n.channel);
                    const double* g = n.grad.data();
                    for (std::size_t i = 0; i < n.value.size(); ++i) gx[i] += g[i];
                }
                break;
            }
            case Op::ConcatChannels: {
                Node& a = nodes_[n.parents[0]];
                Node& b = nodes_[n.parents[1]];
                if (a.requires_grad) {
                    for (std::size_t i = 0; i < a.value.size(); ++i) {
                        a.grad.data()[i] += n.grad.data()[i];
                    }
                }
                if (b.requires_grad) {
                    for (std::size_t i = 0; i < b.value.size(); ++i) {
                        b.grad.data()[i] += n.grad.data()[a.value.size() + i];
                    }
                }
                break;
            }
            case Op::StrideSample: {
                Node& p = nodes_[n.parents[0]];
                if (p.requires_grad) {
                    const std::size_t lh = n.value.h(), lw = n.value.w();
                    for (std::size_t c = 0; c < n.value.nc(); ++c) {
                        const double* g = n.grad.plane(0, c);
                        double* gx = p.grad.plane(0, c);
                        for (std::size_t y = 0; y < lh; ++y)
                            for (std::size_t x = 0; x < lw; ++x)
                                gx[y * n.stride * p.value.w() + x * n.stride] +=
                                    g[y * lw + x];
                    }
                }
                break;
            }
            case Op::MseAgainst: {
                Node& p = nodes_[n.parents[0]];
                if (p.requires_grad) {
                    const double g = n.grad.data()[0];
                    const double f = 2.0 / static_cast<double>(p.value.size());
                    for (std::size_t i = 0; i < p.value.size(); ++i) {
                        p.grad.data()[i] += g * f * (p.value.data()[i] - n.aux.data()[i]);
                    }
                }
                break;
            }
            case Op::MeanAll: {
                Node& p = nodes_[n.parents[0]];
                if (p.requires_grad) {
                    const double g = n.grad.data()[0] / static_cast<double>(p.value.size());
                    for (std::size_t i = 0; i < p.value.size(); ++i) p.grad.data()[i] += g;
                }
                break;
            }
            case Op::PhysicsRhs: {
                Node& st = nodes_[n.parents[0]];
                const RhsEvaluator& ev = *n.evaluator;
                DerivPlanes dp = ev.derivatives(st.value);
                const std::size_t hw = st.value.h() * st.value.w();
                const double* u = st.value.plane(0, 0);
                const double* v = st.value.plane(0, 1);
                std::vector<double> wpl(hw);
                for (int comp = 0; comp < 2; ++comp) {
                    Node& cn = nodes_[n.parents[1 + comp]];
                    const double* g = n.grad.plane(0, comp);
                    for (std::size_t j = 0; j < n.terms[comp].size(); ++j) {
                        const TermDescriptor& t = n.terms[comp][j];
                        const double* d = dp.get(t.deriv);
                        const double coeff = cn.value.data()[j];
                        if (cn.requires_grad) {
                            double acc = 0.0;
                            for (std::size_t i = 0; i < hw; ++i) {
                                acc += g[i] * RhsEvaluator::poly_at(t, u[i], v[i]) * d[i];
                            }
                            cn.grad.data()[j] += acc;
                        }
                        if (!st.requires_grad) continue;
                        double* gu = st.grad.plane(0, 0);
                        double* gv = st.grad.plane(0, 1);
                        // polynomial-factor path
                        if (t.pu > 0) {
                            for (std::size_t i = 0; i < hw; ++i) {
                                gu[i] += g[i] * coeff * t.pu *
                                         RhsEvaluator::poly_at({t.pu - 1, t.pv, t.deriv},
                                                               u[i], v[i]) *
                                         d[i];
                            }
                        }
                        if (t.pv > 0) {
                            for (std::size_t i = 0; i < hw; ++i) {
                                gv[i] += g[i] * coeff * t.pv *
                                         RhsEvaluator::poly_at({t.pu, t.pv - 1, t.deriv},
                                                               u[i], v[i]) *
                                         d[i];
                            }
                        }
                        // derivative-factor path
                        if (t.deriv == DerivFactor::One) continue;
                        for (std::size_t i = 0; i < hw; ++i) {
                            wpl[i] = g[i] * coeff * RhsEvaluator::poly_at(t, u[i], v[i]);
                        }
                        const bool on_u = t.deriv == DerivFactor::Ux ||
                                          t.deriv == DerivFactor::Uy ||
                                          t.deriv == DerivFactor::LapU;
                        const Stencil& s =
                            (t.deriv == DerivFactor::Ux || t.deriv == DerivFactor::Vx)
                                ? ev.first_x()
                                : (t.deriv == DerivFactor::Uy || t.deriv == DerivFactor::Vy)
                                      ? ev.first_y()
                                      : ev.laplacian();
                        detail::accumulate_stencil_adjoint(s, wpl.data(), on_u ? gu : gv,
                                                           st.value.h(), st.value.w());
                    }
                }
                break;
            }
        }
    }

    std::vector<Node> nodes_;
};

} // namespace pdedisc
