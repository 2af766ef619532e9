#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <vector>

#include "pdedisc/finetune.hpp"
#include "pdedisc/sim.hpp"

using namespace pdedisc;
namespace fs = std::filesystem;

namespace {

FieldTensor smooth_state(std::size_t n, std::uint64_t seed, double amplitude) {
    SimConfig sc;
    sc.nx = n;
    sc.ny = n;
    sc.seed = seed;
    sc.ic.kind = "smooth_random";
    sc.ic.amplitude = amplitude;
    return initial_condition(sc);
}

FieldTensor sample_measurements(const FieldTensor& roll, std::size_t n_frames,
                                std::size_t tau, std::size_t stride) {
    const std::size_t lh = (roll.h() - 1) / stride + 1;
    const std::size_t lw = (roll.w() - 1) / stride + 1;
    FieldTensor meas(n_frames, 2, lh, lw);
    for (std::size_t f = 0; f < n_frames; ++f) {
        for (std::size_t c = 0; c < 2; ++c) {
            for (std::size_t y = 0; y < lh; ++y) {
                for (std::size_t x = 0; x < lw; ++x) {
                    meas(f, c, y, x) = roll(f * tau, c, y * stride, x * stride);
                }
            }
        }
    }
    return meas;
}

std::vector<double> concat_coeffs(const PhysicsModel& m) {
    std::vector<double> out = m.coeffs[0];
    out.insert(out.end(), m.coeffs[1].begin(), m.coeffs[1].end());
    return out;
}

double rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / den);
}

} // namespace

TEST_CASE("building a coefficient model validates terms and inputs") {
    const FieldTensor init = smooth_state(9, 3, 0.4);
    const PdeSystem sys = burgers(0.005);

    PhysicsModel m = build_physics_model(sys, init, 0.125, 1e-3, 4);
    REQUIRE(m.terms[0].size() == 3);
    REQUIRE(m.terms[1].size() == 3);
    CHECK(m.coeffs[0][0] == 0.005);
    CHECK(m.coeffs[0][1] == -1.0);
    CHECK(m.coeffs[1][2] == -1.0);

    // round trip through the term list
    const PdeSystem back = m.system();
    for (int c = 0; c < 2; ++c) {
        REQUIRE(back.comps[c].size() == sys.comps[c].size());
        for (std::size_t j = 0; j < back.comps[c].size(); ++j) {
            CHECK(back.comps[c][j].first == sys.comps[c][j].first);
            CHECK(back.comps[c][j].second == sys.comps[c][j].second);
        }
    }

    PdeSystem bad;
    bad.comps[0].push_back({{4, 0, DerivFactor::One}, 1.0});
    CHECK_THROWS_AS(build_physics_model(bad, init, 0.125, 1e-3, 4),
                    std::invalid_argument);
    bad.comps[0][0] = {{2, 2, DerivFactor::Ux}, 1.0};
    CHECK_THROWS_AS(build_physics_model(bad, init, 0.125, 1e-3, 4),
                    std::invalid_argument);
    bad.comps[0][0] = {{1, 0, DerivFactor::Ux},
                       std::numeric_limits<double>::quiet_NaN()};
    CHECK_THROWS_AS(build_physics_model(bad, init, 0.125, 1e-3, 4),
                    std::invalid_argument);

    CHECK_THROWS_AS(build_physics_model(sys, FieldTensor(2, 2, 9, 9), 0.125, 1e-3, 4),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_physics_model(sys, FieldTensor(1, 1, 9, 9), 0.125, 1e-3, 4),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_physics_model(sys, init, 0.0, 1e-3, 4), std::invalid_argument);
    CHECK_THROWS_AS(build_physics_model(sys, init, 0.125, 0.0, 4), std::invalid_argument);
    CHECK_THROWS_AS(build_physics_model(sys, init, 0.125, 1e-3, 0), std::invalid_argument);
}

TEST_CASE("the rollout is bit-identical to an Euler-integrated simulation") {
    const std::size_t n = 25;
    const FieldTensor init = smooth_state(n, 11, 0.5);
    const PdeSystem sys = burgers(0.005);
    PhysicsModel m = build_physics_model(sys, init, 1.0 / (n - 1.0), 2e-4, 40);

    const FieldTensor roll = physics_rollout(m);
    REQUIRE(roll.nt() == 41);
    REQUIRE(roll.h() == n);

    const fs::path p = fs::temp_directory_path() / "pdedisc_ft_init.pft";
    write_pft(p.string(), init);

    nlohmann::json comps = nlohmann::json::array();
    for (int c = 0; c < 2; ++c) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& [td, coeff] : sys.comps[c]) {
            arr.push_back({{"pu", td.pu},
                           {"pv", td.pv},
                           {"deriv", deriv_name(td.deriv)},
                           {"coeff", coeff}});
        }
        comps.push_back(arr);
    }
    SimConfig sc;
    sc.preset = "custom";
    sc.params["components"] = comps;
    sc.domain = 1.0;
    sc.nx = sc.ny = n;
    sc.dt = 2e-4;
    sc.n_steps = 40;
    sc.integrator = "euler";
    sc.ic.kind = "file";
    sc.ic.path = p.string();

    const FieldTensor truth = generate_ground_truth(sc);
    fs::remove(p);
    REQUIRE(truth.nt() == roll.nt());
    REQUIRE(truth.size() == roll.size());
    CHECK(std::memcmp(truth.data(), roll.data(), roll.size() * sizeof(double)) == 0);
}

TEST_CASE("an empty term set freezes the state") {
    const FieldTensor init = smooth_state(9, 5, 0.3);
    PhysicsModel m = build_physics_model(PdeSystem{}, init, 0.125, 1e-3, 5);

    const FieldTensor roll = physics_rollout(m);
    REQUIRE(roll.nt() == 6);
    for (std::size_t k = 0; k < roll.nt(); ++k) {
        CHECK(std::memcmp(roll.frame(k).data(), init.data(),
                          init.size() * sizeof(double)) == 0);
    }

    // nothing to train, but the loop still runs and reports
    const FieldTensor meas = sample_measurements(roll, 5, 1, 2);
    TrainConfig cfg = finetune_defaults();
    cfg.iterations = 3;
    TrainResult r = finetune(m, cfg, meas);
    REQUIRE(r.history.size() == 3);
    CHECK(r.final_loss == 0.0);
    CHECK(r.recoveries == 0);
    CHECK(m.terms[0].empty());
    CHECK(m.terms[1].empty());
}

TEST_CASE("an exact-fit start leaves the coefficients untouched") {
    const std::size_t n = 17;
    const FieldTensor init = smooth_state(n, 21, 0.5);
    PhysicsModel m =
        build_physics_model(burgers(0.005), init, 1.0 / (n - 1.0), 5e-4, 8);

    const FieldTensor meas = sample_measurements(physics_rollout(m), 4, 2, 2);
    const std::vector<double> before = concat_coeffs(m);

    TrainConfig cfg = finetune_defaults();
    cfg.iterations = 40;
    TrainResult r = finetune(m, cfg, meas);

    REQUIRE(r.history.size() == 40);
    for (const TrainRow& row : r.history) {
        CHECK(row.data_term == 0.0); // the taped forward matches the plain one
        CHECK(row.loss == 0.0);
    }
    const std::vector<double> after = concat_coeffs(m);
    REQUIRE(after.size() == before.size());
    for (std::size_t i = 0; i < after.size(); ++i) {
        REQUIRE(std::fabs(after[i] - before[i]) <= 1e-6);
    }
    CHECK(r.recoveries == 0);
}

TEST_CASE("fine-tuning pulls perturbed coefficients back toward the data") {
    const std::size_t n = 17;
    const FieldTensor init = smooth_state(n, 29, 0.5);
    const double dx = 1.0 / (n - 1.0);

    PhysicsModel truth = build_physics_model(burgers(0.005), init, dx, 5e-4, 20);
    const FieldTensor meas = sample_measurements(physics_rollout(truth), 5, 4, 2);
    const std::vector<double> target = concat_coeffs(truth);

    PhysicsModel m = truth;
    const std::array<double, 6> bump = {1.3, 0.85, 1.2, 0.75, 1.15, 0.9};
    std::size_t k = 0;
    for (int c = 0; c < 2; ++c) {
        for (double& coeff : m.coeffs[c]) coeff *= bump[k++];
    }

    const double before = rel_l2(concat_coeffs(m), target);
    TrainConfig cfg = finetune_defaults();
    cfg.iterations = 400;
    TrainResult r = finetune(m, cfg, meas);
    const double after = rel_l2(concat_coeffs(m), target);

    REQUIRE(after <= 1.05 * before);
    CHECK(after < 0.5 * before);
    CHECK(r.final_loss < r.history.front().loss);

    // structure untouched: same terms, same counts
    for (int c = 0; c < 2; ++c) {
        REQUIRE(m.terms[c].size() == truth.terms[c].size());
        for (std::size_t j = 0; j < m.terms[c].size(); ++j) {
            CHECK(m.terms[c][j] == truth.terms[c][j]);
        }
    }
}

TEST_CASE("a persistent blowup aborts once the recovery budget is spent") {
    const FieldTensor init = smooth_state(9, 7, 1.0);
    PdeSystem sys;
    sys.comps[0].push_back({{3, 0, DerivFactor::One}, 1e200});
    PhysicsModel m = build_physics_model(sys, init, 0.125, 1e-3, 4);

    const FieldTensor meas = sample_measurements(physics_rollout(
                                 build_physics_model(PdeSystem{}, init, 0.125, 1e-3, 4)),
                                 2, 2, 2);
    TrainConfig cfg = finetune_defaults();
    cfg.iterations = 5;
    cfg.max_recoveries = 2;
    REQUIRE_THROWS_AS(finetune(m, cfg, meas), BlowupError);
}

TEST_CASE("measurement shape mismatches are rejected") {
    const std::size_t n = 17;
    const FieldTensor init = smooth_state(n, 3, 0.4);
    PhysicsModel m =
        build_physics_model(burgers(0.005), init, 1.0 / (n - 1.0), 5e-4, 8);
    const FieldTensor roll = physics_rollout(m);

    TrainConfig cfg = finetune_defaults();
    cfg.iterations = 1;
    // frame count must divide the rollout length
    CHECK_THROWS_AS(finetune(m, cfg, sample_measurements(roll, 3, 2, 2)),
                    std::invalid_argument);
    // coarse grid must embed into the fine one
    CHECK_THROWS_AS(finetune(m, cfg, FieldTensor(4, 2, 10, 10)),
                    std::invalid_argument);
    CHECK_THROWS_AS(finetune(m, cfg, FieldTensor(4, 1, 9, 9)),
                    std::invalid_argument);
}

TEST_CASE("the discovered equation is reported as text and json") {
    PdeSystem sys;
    sys.comps[0].push_back({{0, 0, DerivFactor::LapU}, 0.0050113});
    sys.comps[0].push_back({{1, 0, DerivFactor::Ux}, -1.004});
    sys.comps[0].push_back({{0, 1, DerivFactor::Uy}, -1.004});

    CHECK(pde_text(sys) ==
          "u_t = 0.0050113*lap(u) - 1.004*u*u_x - 1.004*v*u_y\nv_t = 0\n");

    sys.comps[1].push_back({{0, 0, DerivFactor::LapV}, 0.0049953});
    sys.comps[1].push_back({{1, 1, DerivFactor::One}, 0.062});

    const nlohmann::json j = pde_json(sys);
    REQUIRE(j.size() == 5);
    CHECK(j[0].at("component") == 0);
    CHECK(j[0].at("term") == "lap(u)");
    CHECK(j[0].at("coefficient").get<double>() == 0.0050113);
    CHECK(j[4].at("component") == 1);
    CHECK(j[4].at("term") == "u*v");

    const PdeSystem back = system_from_pde_json(j);
    for (int c = 0; c < 2; ++c) {
        REQUIRE(back.comps[c].size() == sys.comps[c].size());
        for (std::size_t t = 0; t < back.comps[c].size(); ++t) {
            CHECK(back.comps[c][t].first == sys.comps[c][t].first);
            CHECK(back.comps[c][t].second == sys.comps[c][t].second);
        }
    }

    nlohmann::json badterm = nlohmann::json::array();
    badterm.push_back({{"component", 0}, {"term", "u^9"}, {"coefficient", 1.0}});
    CHECK_THROWS_AS(system_from_pde_json(badterm), std::invalid_argument);
    nlohmann::json badcomp = nlohmann::json::array();
    badcomp.push_back({{"component", 2}, {"term", "u"}, {"coefficient", 1.0}});
    CHECK_THROWS_AS(system_from_pde_json(badcomp), std::invalid_argument);
}

TEST_CASE("refinement defaults use a longer, gentler schedule") {
    const TrainConfig cfg = finetune_defaults();
    CHECK(cfg.iterations == 5000);
    CHECK(cfg.adam.lr == 0.001);
    CHECK(cfg.eta == 0.0);
    CHECK(cfg.adam.decay == 0.97);
    CHECK(cfg.adam.decay_every == 200);
}
