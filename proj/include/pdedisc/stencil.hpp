#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdedisc/field.hpp"

namespace pdedisc {

/// Square convolution kernel representing one finite-difference differential
/// operator, together with the grid spacing it was built for.
///
/// Applying a stencil reads, for kernel offsets (a, b) measured from the
/// center c = (n-1)/2:
///
///   out[y, x] = sum_{a,b} k[a, b] * in[(y + a - c) mod H, (x + b - c) mod W]
///
/// i.e. the first kernel axis moves along y (height) and the second along x
/// (width), with circular (periodic) index wrapping.
struct Stencil {
    std::vector<double> k; // n*n, row-major
    int n = 0;
    double dx = 1.0, dy = 1.0;
    int order_x = 0, order_y = 0; // derivative orders (d/dx^i d/dy^j)
    std::string name;

    double at(int a, int b) const { return k[static_cast<std::size_t>(a) * n + b]; }
    double& at(int a, int b) { return k[static_cast<std::size_t>(a) * n + b]; }
};

namespace detail {

/// Solves a small dense linear system A x = b in place by Gaussian
/// elimination with partial pivoting. A is n x n row-major.
inline std::vector<double> solve_dense(std::vector<double> a, std::vector<double> b) {
    const int n = static_cast<int>(b.size());
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r) {
            if (std::fabs(a[r * n + col]) > std::fabs(a[piv * n + col])) piv = r;
        }
        if (a[piv * n + col] == 0.0) {
            throw std::runtime_error("solve_dense: singular system");
        }
        if (piv != col) {
            for (int j = 0; j < n; ++j) std::swap(a[col * n + j], a[piv * n + j]);
            std::swap(b[col], b[piv]);
        }
        const double d = a[col * n + col];
        for (int r = col + 1; r < n; ++r) {
            const double f = a[r * n + col] / d;
            if (f == 0.0) continue;
            for (int j = col; j < n; ++j) a[r * n + j] -= f * a[col * n + j];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n, 0.0);
    for (int r = n - 1; r >= 0; --r) {
        double s = b[r];
        for (int j = r + 1; j < n; ++j) s -= a[r * n + j] * x[j];
        x[r] = s / a[r * n + r];
    }
    return x;
}

/// 1D central weights w_k (k = -m..m, m = (n-1)/2) with
/// sum_k w_k k^p = p! delta_{p,order} / h^order for p = 0..n-1.
inline std::vector<double> fd_weights_1d(int order, int n, double h) {
    const int m = (n - 1) / 2;
    std::vector<double> a(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<double> b(n, 0.0);
    for (int p = 0; p < n; ++p) {
        for (int k = -m; k <= m; ++k) {
            a[p * n + (k + m)] = std::pow(static_cast<double>(k), p);
        }
    }
    double fact = 1.0;
    for (int i = 2; i <= order; ++i) fact *= i;
    b[order] = fact / std::pow(h, order);
    return solve_dense(std::move(a), std::move(b));
}

} // namespace detail

/// Builds a kernel whose entries are the Taylor-matching coefficients for the
/// mixed derivative d^{i+j} / dx^i dy^j on an n x n footprint. Separable by
/// construction: the kernel is the tensor product of 1D central weights.
inline Stencil taylor_filter(int order_x, int order_y, int n, double dx, double dy) {
    if (n < 1 || n % 2 == 0) {
        throw std::invalid_argument("taylor_filter: kernel size must be odd and positive");
    }
    if (order_x < 0 || order_y < 0) {
        throw std::invalid_argument("taylor_filter: negative derivative order");
    }
    if (order_x + order_y > n - 1) {
        throw std::invalid_argument("taylor_filter: order too high for kernel size");
    }
    if (dx <= 0.0 || dy <= 0.0) {
        throw std::invalid_argument("taylor_filter: spacings must be positive");
    }
    std::vector<double> wx = detail::fd_weights_1d(order_x, n, dx);
    std::vector<double> wy = detail::fd_weights_1d(order_y, n, dy);

    Stencil s;
    s.n = n;
    s.dx = dx;
    s.dy = dy;
    s.order_x = order_x;
    s.order_y = order_y;
    s.name = "d" + std::to_string(order_x) + "x_d" + std::to_string(order_y) + "y_n" +
             std::to_string(n);
    s.k.resize(static_cast<std::size_t>(n) * n);
    for (int a = 0; a < n; ++a) {
        for (int b = 0; b < n; ++b) {
            s.at(a, b) = wy[a] * wx[b];
        }
    }
    return s;
}

/// Nine-point Laplacian (1/(6 dx^2)) [[1,4,1],[4,-20,4],[1,4,1]].
inline Stencil laplacian9(double dx) {
    if (dx <= 0.0) throw std::invalid_argument("laplacian9: dx must be positive");
    Stencil s;
    s.n = 3;
    s.dx = s.dy = dx;
    s.order_x = s.order_y = -1;
    s.name = "laplacian9";
    const double f = 1.0 / (6.0 * dx * dx);
    s.k = {f * 1, f * 4, f * 1, f * 4, f * -20, f * 4, f * 1, f * 4, f * 1};
    return s;
}

/// Fourth-order 5x5 Laplacian built from Taylor-matched (2,0) and (0,2) parts.
inline Stencil laplacian5x5(double dx) {
    Stencil sx = taylor_filter(2, 0, 5, dx, dx);
    Stencil sy = taylor_filter(0, 2, 5, dx, dx);
    Stencil s;
    s.n = 5;
    s.dx = s.dy = dx;
    s.order_x = s.order_y = -1;
    s.name = "laplacian5x5";
    s.k.resize(25);
    for (int i = 0; i < 25; ++i) s.k[i] = sx.k[i] + sy.k[i];
    return s;
}

/// Core circular-padded correlation of one h*w plane with a raw kernel.
/// Shared by the plain stencil path and the autodiff convolution so both
/// produce identical arithmetic.
inline void correlate_plane_circular(const double* in, double* out, std::size_t h,
                                     std::size_t w, const double* kernel, int n,
                                     bool accumulate = false) {
    const int c = (n - 1) / 2;
    const long hh = static_cast<long>(h), ww = static_cast<long>(w);
    if (!accumulate) {
        for (std::size_t i = 0; i < h * w; ++i) out[i] = 0.0;
    }
    for (int a = 0; a < n; ++a) {
        for (int b = 0; b < n; ++b) {
            const double kv = kernel[a * n + b];
            if (kv == 0.0) continue;
            const long dy = a - c, dx = b - c;
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
    }
}

/// Applies a stencil to one channel of a single-frame tensor.
inline FieldTensor apply_stencil(const Stencil& s, const FieldTensor& frame,
                                 std::size_t channel = 0, std::size_t t = 0) {
    if (s.n % 2 == 0 || s.n < 1) {
        throw std::invalid_argument("apply_stencil: kernel side must be odd");
    }
    if (static_cast<std::size_t>(s.n) > frame.h() || static_cast<std::size_t>(s.n) > frame.w()) {
        throw std::invalid_argument("apply_stencil: kernel larger than field");
    }
    FieldTensor out(1, 1, frame.h(), frame.w());
    correlate_plane_circular(frame.plane(t, channel), out.plane(0, 0), frame.h(),
                             frame.w(), s.k.data(), s.n);
    return out;
}

/// In-place variant writing into a caller-provided plane.
inline void apply_stencil_plane(const Stencil& s, const double* in, double* out,
                                std::size_t h, std::size_t w) {
    if (static_cast<std::size_t>(s.n) > h || static_cast<std::size_t>(s.n) > w) {
        throw std::invalid_argument("apply_stencil_plane: kernel larger than field");
    }
    correlate_plane_circular(in, out, h, w, s.k.data(), s.n);
}

} // namespace pdedisc
