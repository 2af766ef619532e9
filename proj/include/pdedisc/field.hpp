#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pdedisc/errors.hpp"

namespace pdedisc {

/// Dense rank-4 array of f64 values with layout (time, channel, height, width),
/// row-major and time-major. Holds solutions, measurements and predictions.
class FieldTensor {
public:
    FieldTensor() = default;

    FieldTensor(std::size_t nt, std::size_t nc, std::size_t h, std::size_t w,
                double fill = 0.0)
        : nt_(nt), nc_(nc), h_(h), w_(w), data_(nt * nc * h * w, fill) {
        if (nt == 0 || nc == 0 || h == 0 || w == 0) {
            throw std::invalid_argument("FieldTensor: zero-sized dimension");
        }
    }

    std::size_t nt() const { return nt_; }
    std::size_t nc() const { return nc_; }
    std::size_t h() const { return h_; }
    std::size_t w() const { return w_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t t, std::size_t c, std::size_t y, std::size_t x) {
        return data_[((t * nc_ + c) * h_ + y) * w_ + x];
    }
    double operator()(std::size_t t, std::size_t c, std::size_t y, std::size_t x) const {
        return data_[((t * nc_ + c) * h_ + y) * w_ + x];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    /// Pointer to the (t, c) plane of h*w contiguous values.
    double* plane(std::size_t t, std::size_t c) {
        return data_.data() + (t * nc_ + c) * h_ * w_;
    }
    const double* plane(std::size_t t, std::size_t c) const {
        return data_.data() + (t * nc_ + c) * h_ * w_;
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    /// Copy of a single time step as a (1, nc, h, w) tensor.
    FieldTensor frame(std::size_t t) const {
        FieldTensor out(1, nc_, h_, w_);
        std::memcpy(out.data(), data_.data() + t * nc_ * h_ * w_,
                    nc_ * h_ * w_ * sizeof(double));
        return out;
    }

    void set_frame(std::size_t t, const FieldTensor& f) {
        if (f.nc_ != nc_ || f.h_ != h_ || f.w_ != w_ || f.nt_ != 1) {
            throw std::invalid_argument("set_frame: shape mismatch");
        }
        std::memcpy(data_.data() + t * nc_ * h_ * w_, f.data(),
                    nc_ * h_ * w_ * sizeof(double));
    }

    /// Circular spatial shift by (dy, dx); shifts every frame and channel.
    FieldTensor shifted(long dy, long dx) const {
        FieldTensor out(nt_, nc_, h_, w_);
        const long hh = static_cast<long>(h_), ww = static_cast<long>(w_);
        for (std::size_t t = 0; t < nt_; ++t) {
            for (std::size_t c = 0; c < nc_; ++c) {
                const double* src = plane(t, c);
                double* dst = out.plane(t, c);
                for (long y = 0; y < hh; ++y) {
                    long sy = ((y - dy) % hh + hh) % hh;
                    for (long x = 0; x < ww; ++x) {
                        long sx = ((x - dx) % ww + ww) % ww;
                        dst[y * ww + x] = src[sy * ww + sx];
                    }
                }
            }
        }
        return out;
    }

    bool same_shape(const FieldTensor& o) const {
        return nt_ == o.nt_ && nc_ == o.nc_ && h_ == o.h_ && w_ == o.w_;
    }

private:
    std::size_t nt_ = 0, nc_ = 0, h_ = 0, w_ = 0;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// PFT1 binary format
//
//   magic "PFT1" | u32 rank (always 4) | 4 x u64 LE dims (nt, nc, h, w) |
//   nt*nc*h*w f64 LE values, row-major, time-major.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

} // namespace detail

inline void write_pft(const std::string& path, const FieldTensor& f) {
    std::string header = "PFT1";
    detail::put_u32(header, 4u);
    detail::put_u64(header, f.nt());
    detail::put_u64(header, f.nc());
    detail::put_u64(header, f.h());
    detail::put_u64(header, f.w());

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_pft: cannot open " + path);
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    // f64 little-endian; assumes an LE host for the payload, as do the readers.
    static_assert(sizeof(double) == 8);
    os.write(reinterpret_cast<const char*>(f.data()),
             static_cast<std::streamsize>(f.size() * sizeof(double)));
    if (!os) throw std::runtime_error("write_pft: short write to " + path);
}

inline FieldTensor read_pft(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_pft: cannot open " + path);
    unsigned char head[4 + 4 + 32];
    is.read(reinterpret_cast<char*>(head), sizeof(head));
    if (!is) throw std::runtime_error("read_pft: truncated header in " + path);
    if (std::memcmp(head, "PFT1", 4) != 0) {
        throw std::runtime_error("read_pft: bad magic in " + path);
    }
    if (detail::get_u32(head + 4) != 4u) {
        throw std::runtime_error("read_pft: unsupported rank in " + path);
    }
    std::uint64_t nt = detail::get_u64(head + 8);
    std::uint64_t nc = detail::get_u64(head + 16);
    std::uint64_t h = detail::get_u64(head + 24);
    std::uint64_t w = detail::get_u64(head + 32);
    FieldTensor f(nt, nc, h, w);
    is.read(reinterpret_cast<char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(double)));
    if (!is) throw std::runtime_error("read_pft: truncated payload in " + path);
    return f;
}

} // namespace pdedisc
