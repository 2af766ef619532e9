#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdedisc/pde.hpp"

namespace pdedisc {

/// Aligns a system's coefficients over the full dictionary: component 0
/// first, then component 1, zeros for absent terms. Duplicate terms
/// accumulate.
inline std::vector<double> coefficient_vector(
    const PdeSystem& sys,
    const std::vector<TermDescriptor>& dict = default_dictionary()) {
    std::vector<double> out(2 * dict.size(), 0.0);
    for (int c = 0; c < 2; ++c) {
        for (const auto& [td, coeff] : sys.comps[c]) {
            const int idx = find_term(dict, td);
            if (idx < 0) {
                throw std::invalid_argument("coefficient_vector: term not in dictionary: " +
                                            td.name());
            }
            out[c * dict.size() + static_cast<std::size_t>(idx)] += coeff;
        }
    }
    return out;
}

/// ||identified - truth||_2 / ||truth||_2 over aligned coefficient vectors.
inline double relative_l2(const std::vector<double>& identified,
                          const std::vector<double>& truth) {
    if (identified.size() != truth.size()) {
        throw std::invalid_argument("relative_l2: length mismatch");
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double d = identified[i] - truth[i];
        num += d * d;
        den += truth[i] * truth[i];
    }
    if (den == 0.0) throw std::invalid_argument("relative_l2: true vector is zero");
    return std::sqrt(num) / std::sqrt(den);
}

struct PrecisionRecall {
    double precision = 0.0;
    double recall = 0.0;
};

/// Support-recovery quality with nonzero defined as |coefficient| > 1e-12:
/// precision = hits / |identified support|, recall = hits / |true support|.
inline PrecisionRecall precision_recall(const std::vector<double>& identified,
                                        const std::vector<double>& truth) {
    if (identified.size() != truth.size()) {
        throw std::invalid_argument("precision_recall: length mismatch");
    }
    const auto nonzero = [](double v) { return std::fabs(v) > 1e-12; };
    std::size_t n_id = 0, n_true = 0, hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const bool a = nonzero(identified[i]), b = nonzero(truth[i]);
        n_id += a;
        n_true += b;
        hits += a && b;
    }
    if (n_id == 0) {
        throw std::invalid_argument("precision_recall: identified vector is zero");
    }
    if (n_true == 0) {
        throw std::invalid_argument("precision_recall: true vector is zero");
    }
    return {static_cast<double>(hits) / static_cast<double>(n_id),
            static_cast<double>(hits) / static_cast<double>(n_true)};
}

struct MetricsRow {
    std::string name;
    double noise = 0.0;
    double rel_l2 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricsRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    os << "case,noise,rel_l2,precision,recall\n";
    os.precision(17);
    for (const MetricsRow& r : rows) {
        os << r.name << ',' << r.noise << ',' << r.rel_l2 << ',' << r.precision << ','
           << r.recall << '\n';
    }
}

} // namespace pdedisc
