#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdedisc/field.hpp"
#include "pdedisc/pde.hpp"

namespace pdedisc {

/// Candidate-term matrix and time-derivative targets sampled on the interior
/// frames of a fine-grid trajectory. Row r of theta holds every term of the
/// dictionary evaluated at one space-time point; ut[c][r] is the matching
/// central time difference of component c.
struct CandidateLibrary {
    struct RowIndex {
        std::size_t t = 0, y = 0, x = 0;
        bool operator==(const RowIndex&) const = default;
    };

    std::size_t rows = 0, cols = 0;
    std::vector<double> theta; // row-major rows x cols
    std::array<std::vector<double>, 2> ut;
    std::vector<TermDescriptor> terms;
    std::vector<RowIndex> index;

    double at(std::size_t r, std::size_t c) const { return theta[r * cols + c]; }

    std::vector<double> column(std::size_t c) const {
        std::vector<double> out(rows);
        for (std::size_t r = 0; r < rows; ++r) out[r] = theta[r * cols + c];
        return out;
    }
};

/// Evaluates every dictionary term over the interior frames of a trajectory.
/// Spatial derivatives use the shared stencil convention; the time derivative
/// is a 2nd-order central difference, so the first and last frames carry no
/// rows.
inline CandidateLibrary build_library(const FieldTensor& hr, double dx, double dt,
                                      std::vector<TermDescriptor> terms = default_dictionary()) {
    if (hr.nt() < 3) {
        throw std::invalid_argument("build_library: need at least 3 frames");
    }
    if (hr.nc() != 2) throw std::invalid_argument("build_library: need 2 components");
    if (dx <= 0.0 || dt <= 0.0) {
        throw std::invalid_argument("build_library: spacings must be positive");
    }
    if (terms.empty()) throw std::invalid_argument("build_library: empty dictionary");
    if (!hr.all_finite()) throw std::invalid_argument("build_library: non-finite input");

    CandidateLibrary lib;
    lib.terms = std::move(terms);
    lib.cols = lib.terms.size();
    const std::size_t h = hr.h(), w = hr.w(), n = h * w;
    lib.rows = (hr.nt() - 2) * n;
    lib.theta.resize(lib.rows * lib.cols);
    lib.ut[0].resize(lib.rows);
    lib.ut[1].resize(lib.rows);
    lib.index.resize(lib.rows);

    RhsEvaluator ev(dx);
    std::size_t row = 0;
    for (std::size_t t = 1; t + 1 < hr.nt(); ++t) {
        DerivPlanes dp = ev.derivatives(hr, t);
        const double* u = hr.plane(t, 0);
        const double* v = hr.plane(t, 1);
        for (std::size_t i = 0; i < n; ++i, ++row) {
            lib.index[row] = {t, i / w, i % w};
            double* out = &lib.theta[row * lib.cols];
            for (std::size_t c = 0; c < lib.cols; ++c) {
                out[c] = RhsEvaluator::poly_at(lib.terms[c], u[i], v[i]) *
                         dp.get(lib.terms[c].deriv)[i];
            }
            for (std::size_t comp = 0; comp < 2; ++comp) {
                lib.ut[comp][row] = (hr.plane(t + 1, comp)[i] - hr.plane(t - 1, comp)[i]) /
                                    (2.0 * dt);
            }
        }
    }
    return lib;
}

/// Keeps a seeded uniform sample of rows (without replacement, original order
/// preserved). fraction 1 returns the library unchanged.
inline CandidateLibrary subsample_rows(const CandidateLibrary& lib, double fraction,
                                       std::uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0) {
        throw std::invalid_argument("subsample_rows: fraction must be in (0, 1]");
    }
    std::size_t keep = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(lib.rows)));
    keep = std::max<std::size_t>(1, std::min(keep, lib.rows));

    CandidateLibrary out;
    out.cols = lib.cols;
    out.terms = lib.terms;
    out.rows = keep;
    out.theta.reserve(keep * lib.cols);
    out.ut[0].reserve(keep);
    out.ut[1].reserve(keep);
    out.index.reserve(keep);

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::size_t need = keep;
    for (std::size_t r = 0; r < lib.rows && need > 0; ++r) {
        const std::size_t left = lib.rows - r;
        if (unit(rng) * static_cast<double>(left) < static_cast<double>(need)) {
            out.theta.insert(out.theta.end(), lib.theta.begin() + r * lib.cols,
                             lib.theta.begin() + (r + 1) * lib.cols);
            out.ut[0].push_back(lib.ut[0][r]);
            out.ut[1].push_back(lib.ut[1][r]);
            out.index.push_back(lib.index[r]);
            --need;
        }
    }
    return out;
}

/// Dumps theta (rows x cols) and the two target vectors in the field file
/// format, plus a JSON manifest naming every column.
inline void dump_library(const CandidateLibrary& lib, const std::string& theta_path,
                         const std::string& ut_path, const std::string& terms_path) {
    FieldTensor th(1, 1, lib.rows, lib.cols);
    std::copy(lib.theta.begin(), lib.theta.end(), th.data());
    write_pft(theta_path, th);

    FieldTensor ut(1, 2, lib.rows, 1);
    std::copy(lib.ut[0].begin(), lib.ut[0].end(), ut.plane(0, 0));
    std::copy(lib.ut[1].begin(), lib.ut[1].end(), ut.plane(0, 1));
    write_pft(ut_path, ut);

    nlohmann::json manifest = nlohmann::json::array();
    for (std::size_t c = 0; c < lib.cols; ++c) {
        manifest.push_back({{"index", c},
                            {"name", lib.terms[c].name()},
                            {"pu", lib.terms[c].pu},
                            {"pv", lib.terms[c].pv},
                            {"deriv", deriv_name(lib.terms[c].deriv)}});
    }
    std::ofstream os(terms_path);
    if (!os) throw std::runtime_error("dump_library: cannot open " + terms_path);
    os << manifest.dump(2) << '\n';
}

} // namespace pdedisc
