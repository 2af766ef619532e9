#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdedisc/field.hpp"

namespace pdedisc {

namespace detail {

/// Cubic convolution weight, a = -1/2 (Catmull-Rom).
inline double cubic_weight(double t) {
    t = std::fabs(t);
    if (t <= 1.0) return ((1.5 * t - 2.5) * t) * t + 1.0;
    if (t < 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
    return 0.0;
}

inline double linear_weight(double t) {
    t = std::fabs(t);
    return t < 1.0 ? 1.0 - t : 0.0;
}

} // namespace detail

/// Upsamples every frame of a coarse tensor onto the grid refined by an
/// integer stride per axis: (h, w) -> ((h-1)*s + 1, (w-1)*s + 1), so coarse
/// points land exactly on fine points and keep their stored values. Grids are
/// endpoint-inclusive on a periodic domain, so out-of-range neighbor indices
/// wrap with period (dim - 1). mode: "bicubic" (default) or "bilinear".
inline FieldTensor upsample(const FieldTensor& lr, std::size_t stride,
                            const std::string& mode = "bicubic") {
    if (stride < 1) throw std::invalid_argument("upsample: stride must be >= 1");
    if (lr.h() < 2 || lr.w() < 2) {
        throw std::invalid_argument("upsample: grid too small");
    }
    const bool cubic = mode == "bicubic";
    if (!cubic && mode != "bilinear") {
        throw std::invalid_argument("upsample: unknown mode " + mode);
    }
    const std::size_t H = (lr.h() - 1) * stride + 1;
    const std::size_t W = (lr.w() - 1) * stride + 1;
    const long py = static_cast<long>(lr.h()) - 1; // wrap periods
    const long px = static_cast<long>(lr.w()) - 1;
    const int r = cubic ? 2 : 1;
    auto weight = cubic ? detail::cubic_weight : detail::linear_weight;

    // per-axis weights repeat with period `stride`; precompute one period
    std::vector<double> wtab(stride * (2 * r), 0.0);
    for (std::size_t ph = 0; ph < stride; ++ph) {
        const double f = static_cast<double>(ph) / static_cast<double>(stride);
        for (int m = -r + 1; m <= r; ++m) {
            wtab[ph * 2 * r + (m + r - 1)] = weight(f - m);
        }
    }

    FieldTensor out(lr.nt(), lr.nc(), H, W);
    for (std::size_t t = 0; t < lr.nt(); ++t) {
        for (std::size_t c = 0; c < lr.nc(); ++c) {
            const double* src = lr.plane(t, c);
            double* dst = out.plane(t, c);
            for (std::size_t y = 0; y < H; ++y) {
                const long y0 = static_cast<long>(y / stride);
                const std::size_t phy = y % stride;
                const double* wy = wtab.data() + phy * 2 * r;
                for (std::size_t x = 0; x < W; ++x) {
                    const long x0 = static_cast<long>(x / stride);
                    const std::size_t phx = x % stride;
                    const double* wx = wtab.data() + phx * 2 * r;
                    double acc = 0.0;
                    for (int m = -r + 1; m <= r; ++m) {
                        const double wym = wy[m + r - 1];
                        if (wym == 0.0) continue;
                        long sy = y0 + m;
                        while (sy < 0) sy += py;
                        while (sy > py) sy -= py;
                        for (int n = -r + 1; n <= r; ++n) {
                            const double wxn = wx[n + r - 1];
                            if (wxn == 0.0) continue;
                            long sx = x0 + n;
                            while (sx < 0) sx += px;
                            while (sx > px) sx -= px;
                            acc += wym * wxn * src[sy * lr.w() + sx];
                        }
                    }
                    dst[y * W + x] = acc;
                }
            }
        }
    }
    return out;
}

} // namespace pdedisc
