#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>

#include "pdedisc/autodiff.hpp"
#include "pdedisc/optim.hpp"

using namespace pdedisc;
using Catch::Matchers::WithinAbs;

namespace {

constexpr double kPi = 3.14159265358979323846;

FieldTensor randu(std::mt19937_64& rng, std::size_t nt, std::size_t nc, std::size_t h,
                  std::size_t w, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    FieldTensor f(nt, nc, h, w);
    for (std::size_t i = 0; i < f.size(); ++i) f.data()[i] = d(rng);
    return f;
}

// Builds the graph from the given parameter values; fills one leaf id per
// parameter and returns the scalar loss node.
using Builder =
    std::function<int(Tape&, const std::vector<FieldTensor>&, bool, std::vector<int>&)>;

double forward_only(const Builder& build, const std::vector<FieldTensor>& params) {
    Tape t;
    std::vector<int> ids;
    return t.value(build(t, params, false, ids)).data()[0];
}

/// max_i |g_ad - g_fd| / max(||g_fd||_inf, 1e-12) over all parameter entries
double gradcheck(const Builder& build, std::vector<FieldTensor> params,
                 double h = 1e-6) {
    Tape t;
    std::vector<int> ids;
    int loss = build(t, params, true, ids);
    t.backward(loss);
    std::vector<FieldTensor> ad;
    for (int id : ids) ad.push_back(t.grad(id));

    double fd_inf = 0.0, max_diff = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t e = 0; e < params[p].size(); ++e) {
            const double orig = params[p].data()[e];
            params[p].data()[e] = orig + h;
            const double lp = forward_only(build, params);
            params[p].data()[e] = orig - h;
            const double lm = forward_only(build, params);
            params[p].data()[e] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            fd_inf = std::max(fd_inf, std::fabs(fd));
            max_diff = std::max(max_diff, std::fabs(ad[p].data()[e] - fd));
        }
    }
    return max_diff / std::max(fd_inf, 1e-12);
}

} // namespace

TEST_CASE("convolution gradients match finite differences") {
    std::mt19937_64 rng(11);
    FieldTensor x = randu(rng, 1, 2, 8, 8);
    FieldTensor w = randu(rng, 3, 2, 3, 3, -0.5, 0.5);
    FieldTensor b = randu(rng, 1, 3, 1, 1, -0.2, 0.2);
    FieldTensor target = randu(rng, 1, 3, 8, 8);

    Builder build = [&target](Tape& t, const std::vector<FieldTensor>& p, bool tr,
                              std::vector<int>& ids) {
        ids = {t.leaf(p[0], tr), t.leaf(p[1], tr), t.leaf(p[2], tr)};
        return t.mse_against(t.conv2d(ids[0], ids[1], ids[2]), target);
    };
    REQUIRE(gradcheck(build, {x, w, b}) < 1e-6);
}

TEST_CASE("one-by-one channel combination gradients match finite differences") {
    std::mt19937_64 rng(12);
    FieldTensor x = randu(rng, 1, 4, 6, 6);
    FieldTensor w = randu(rng, 2, 4, 1, 1);
    FieldTensor b = randu(rng, 1, 2, 1, 1);
    FieldTensor target = randu(rng, 1, 2, 6, 6);

    Builder build = [&target](Tape& t, const std::vector<FieldTensor>& p, bool tr,
                              std::vector<int>& ids) {
        ids = {t.leaf(p[0], tr), t.leaf(p[1], tr), t.leaf(p[2], tr)};
        return t.mse_against(t.conv2d(ids[0], ids[1], ids[2]), target);
    };
    REQUIRE(gradcheck(build, {x, w, b}) < 1e-6);
}

TEST_CASE("elementwise product and sum gradients match finite differences") {
    std::mt19937_64 rng(13);
    FieldTensor a = randu(rng, 1, 2, 6, 6);
    FieldTensor b = randu(rng, 1, 2, 6, 6);
    FieldTensor target = randu(rng, 1, 2, 6, 6);

    Builder build = [&target](Tape& t, const std::vector<FieldTensor>& p, bool tr,
                              std::vector<int>& ids) {
        ids = {t.leaf(p[0], tr), t.leaf(p[1], tr)};
        int y = t.scale(t.add(t.mul(ids[0], ids[1]), ids[0]), 0.7);
        return t.mse_against(y, target);
    };
    REQUIRE(gradcheck(build, {a, b}) < 1e-6);
}

TEST_CASE("exp and per-channel scaling gradients match finite differences") {
    std::mt19937_64 rng(14);
    FieldTensor x = randu(rng, 1, 2, 5, 5);
    FieldTensor raw = randu(rng, 1, 2, 1, 1, -1.0, 0.5);
    FieldTensor target = randu(rng, 1, 2, 5, 5);

    Builder build = [&target](Tape& t, const std::vector<FieldTensor>& p, bool tr,
                              std::vector<int>& ids) {
        ids = {t.leaf(p[0], tr), t.leaf(p[1], tr)};
        return t.mse_against(t.channel_scale(ids[0], t.exp_elem(ids[1])), target);
    };
    REQUIRE(gradcheck(build, {x, raw}) < 1e-6);
}

TEST_CASE("channel select and concat gradients match finite differences") {
    std::mt19937_64 rng(15);
    FieldTensor x = randu(rng, 1, 3, 6, 6);
    FieldTensor target = randu(rng, 1, 2, 6, 6);

    Builder build = [&target](Tape& t, const std::vector<FieldTensor>& p, bool tr,
                              std::vector<int>& ids) {
        ids = {t.leaf(p[0], tr)};
        int y = t.concat_channels(t.select_channel(ids[0], 2), t.select_channel(ids[0], 0));
        return t.mse_against(y, target);
    };
    REQUIRE(gradcheck(build, {x}) < 1e-6);

    // the never-selected channel receives exactly zero gradient
    Tape t;
    std::vector<int> ids;
    t.backward(build(t, {x}, true, ids));
    const FieldTensor& g = t.grad(ids[0]);
    for (std::size_t i = 0; i < 36; ++i) REQUIRE(g.plane(0, 1)[i] == 0.0);
}

TEST_CASE("strided sampling gradients match finite differences") {
    std::mt19937_64 rng(16);
    FieldTensor x = randu(rng, 1, 2, 9, 9);
    FieldTensor target = randu(rng, 1, 2, 5, 5);

    Builder build = [&target](Tape& t, const std::vector<FieldTensor>& p, bool tr,
                              std::vector<int>& ids) {
        ids = {t.leaf(p[0], tr)};
        return t.mse_against(t.stride_sample(ids[0], 2), target);
    };
    REQUIRE(gradcheck(build, {x}) < 1e-6);
}

TEST_CASE("physics right-hand-side gradients match finite differences") {
    std::mt19937_64 rng(17);
    FieldTensor state = randu(rng, 1, 2, 8, 8);
    FieldTensor cu(1, 1, 1, 3);
    cu.data()[0] = 0.3; cu.data()[1] = -0.8; cu.data()[2] = 0.1;
    FieldTensor cv(1, 1, 1, 3);
    cv.data()[0] = 0.2; cv.data()[1] = 0.6; cv.data()[2] = -0.5;
    FieldTensor target = randu(rng, 1, 2, 8, 8);
    RhsEvaluator ev(0.5);
    std::array<std::vector<TermDescriptor>, 2> terms = {
        std::vector<TermDescriptor>{{0, 0, DerivFactor::LapU},
                                    {1, 0, DerivFactor::Ux},
                                    {2, 1, DerivFactor::One}},
        std::vector<TermDescriptor>{{0, 0, DerivFactor::LapV},
                                    {0, 1, DerivFactor::Vy},
                                    {1, 2, DerivFactor::One}}};

    Builder build = [&](Tape& t, const std::vector<FieldTensor>& p, bool tr,
                        std::vector<int>& ids) {
        ids = {t.leaf(p[0], tr), t.leaf(p[1], tr), t.leaf(p[2], tr)};
        return t.mse_against(t.physics_rhs(ids[0], {ids[1], ids[2]}, terms, ev), target);
    };
    REQUIRE(gradcheck(build, {state, cu, cv}) < 1e-6);
}

TEST_CASE("a deep mixed-op composite passes the finite-difference check") {
    std::mt19937_64 rng(18);
    FieldTensor x = randu(rng, 1, 2, 9, 9);
    FieldTensor w1 = randu(rng, 4, 2, 3, 3, -0.4, 0.4);
    FieldTensor b1 = randu(rng, 1, 4, 1, 1, -0.1, 0.1);
    FieldTensor w2 = randu(rng, 2, 4, 1, 1);
    FieldTensor b2 = randu(rng, 1, 2, 1, 1, -0.1, 0.1);
    FieldTensor lam = randu(rng, 1, 2, 1, 1, -1.0, 0.0);
    FieldTensor target = randu(rng, 1, 2, 5, 5);
    FieldTensor target0 = randu(rng, 1, 2, 9, 9);

    Builder build = [&](Tape& t, const std::vector<FieldTensor>& p, bool tr,
                        std::vector<int>& ids) {
        ids.clear();
        for (const FieldTensor& f : p) ids.push_back(t.leaf(f, tr));
        int h1 = t.conv2d(ids[0], ids[1], ids[2]);
        int h2 = t.mul(h1, h1);
        int y = t.conv2d(h2, ids[3], ids[4]);
        int hw = t.channel_scale(y, t.exp_elem(ids[5]));
        int next = t.add(ids[0], t.scale(hw, 0.05));
        int l1 = t.mse_against(t.stride_sample(next, 2), target);
        int l2 = t.mse_against(next, target0);
        return t.add(l1, t.scale(l2, 0.3));
    };
    REQUIRE(gradcheck(build, {x, w1, b1, w2, b2, lam}) < 1e-6);
}

TEST_CASE("mse against itself has an exactly zero gradient") {
    std::mt19937_64 rng(19);
    FieldTensor x = randu(rng, 1, 2, 7, 7);
    Tape t;
    int xi = t.leaf(x, true);
    int loss = t.mse_against(xi, x);
    t.backward(loss);
    REQUIRE(t.value(loss).data()[0] == 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(t.grad(xi).data()[i] == 0.0);
}

TEST_CASE("mean of a product differentiates to the fixed factor over count") {
    std::mt19937_64 rng(20);
    FieldTensor a = randu(rng, 1, 1, 6, 6);
    FieldTensor b = randu(rng, 1, 1, 6, 6);
    Tape t;
    int ai = t.constant(a);
    int bi = t.leaf(b, true);
    t.backward(t.mean_all(t.mul(ai, bi)));
    for (std::size_t i = 0; i < b.size(); ++i) {
        REQUIRE_THAT(t.grad(bi).data()[i], WithinAbs(a.data()[i] / 36.0, 1e-15));
    }
}

TEST_CASE("identity kernel reproduces the input through the tape") {
    std::mt19937_64 rng(21);
    FieldTensor x = randu(rng, 1, 2, 8, 8);
    FieldTensor w(2, 2, 3, 3, 0.0);
    w(0, 0, 1, 1) = 1.0;
    w(1, 1, 1, 1) = 1.0;
    FieldTensor b(1, 2, 1, 1, 0.0);
    Tape t;
    int y = t.conv2d(t.constant(x), t.constant(w), t.constant(b));
    for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(t.value(y).data()[i] == x.data()[i]);
}

TEST_CASE("five-point Laplacian kernel behaves like the analytic operator") {
    const std::size_t n = 32;
    const double h = 1.0 / 32;
    Stencil sx = taylor_filter(2, 0, 3, h, h);
    Stencil sy = taylor_filter(0, 2, 3, h, h);
    FieldTensor w(1, 1, 3, 3);
    for (int i = 0; i < 9; ++i) w.data()[i] = sx.k[i] + sy.k[i];
    FieldTensor b(1, 1, 1, 1, 0.0);

    // constant field -> exactly zero
    Tape t0;
    int zc = t0.conv2d(t0.constant(FieldTensor(1, 1, 8, 8, 3.7)), t0.constant(w),
                       t0.constant(b));
    for (std::size_t i = 0; i < 64; ++i)
        REQUIRE_THAT(t0.value(zc).data()[i], WithinAbs(0.0, 1e-9));

    FieldTensor f(1, 1, n, n);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
            f(0, 0, y, x) = std::sin(2 * kPi * x * h) * std::sin(2 * kPi * y * h);
    Tape t;
    int lap = t.conv2d(t.constant(f), t.constant(w), t.constant(b));
    double max_err = 0.0;
    for (std::size_t i = 0; i < n * n; ++i) {
        max_err = std::max(max_err,
                           std::fabs(t.value(lap).data()[i] + 8 * kPi * kPi * f.data()[i]));
    }
    REQUIRE(max_err < 0.5);
}

TEST_CASE("tape convolution commutes with circular shifts") {
    std::mt19937_64 rng(22);
    FieldTensor x = randu(rng, 1, 2, 9, 11);
    FieldTensor w = randu(rng, 2, 2, 3, 3);
    FieldTensor b = randu(rng, 1, 2, 1, 1);

    auto run = [&](const FieldTensor& in) {
        Tape t;
        return t.value(t.conv2d(t.constant(in), t.constant(w), t.constant(b)));
    };
    FieldTensor a = run(x.shifted(2, -3));
    FieldTensor c = run(x).shifted(2, -3);
    for (std::size_t i = 0; i < a.size(); ++i){
        REQUIRE_THAT(a.data()[i], WithinAbs(c.data()[i], 1e-12));
    }
}

TEST_CASE("tape rejects malformed graphs") {
    Tape t;
    int x = t.leaf(FieldTensor(1, 2, 8, 8, 1.0), true);
    int y = t.leaf(FieldTensor(1, 2, 8, 6, 1.0), true);
    REQUIRE_THROWS_AS(t.add(x, y), std::invalid_argument);
    REQUIRE_THROWS_AS(t.mul(x, y), std::invalid_argument);
    REQUIRE_THROWS_AS(t.select_channel(x, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(t.stride_sample(x, 3), std::invalid_argument);

    int even = t.leaf(FieldTensor(1, 2, 2, 2, 0.1), true);
    int bias = t.leaf(FieldTensor(1, 1, 1, 1, 0.0), true);
    REQUIRE_THROWS_AS(t.conv2d(x, even, bias), std::invalid_argument);
    int big = t.leaf(FieldTensor(1, 2, 9, 9, 0.1), true);
    REQUIRE_THROWS_AS(t.conv2d(x, big, bias), std::invalid_argument);

    REQUIRE_THROWS_AS(t.backward(x), std::invalid_argument); // non-scalar loss
    int c = t.constant(FieldTensor(1, 1, 1, 1, 2.0));
    REQUIRE_THROWS_AS(t.grad(c), std::invalid_argument);
}

TEST_CASE("adam with zero gradients leaves parameters untouched") {
    FieldTensor p(1, 1, 2, 3);
    for (std::size_t i = 0; i < p.size(); ++i) p.data()[i] = 0.1 * static_cast<double>(i);
    FieldTensor p0 = p;
    FieldTensor g(1, 1, 2, 3, 0.0);

    AdamState st;
    st.init({p.size()});
    adam_step(st, {&p}, {(const FieldTensor*)&g});
    REQUIRE(st.step == 1);
    for (std::size_t i = 0; i < p.size(); ++i) REQUIRE(p.data()[i] == p0.data()[i]);
}

TEST_CASE("learning rate decays by 3 percent every 200 steps") {
    AdamState st;
    st.cfg.lr = 0.002;
    st.init({1});
    REQUIRE_THAT(effective_lr(st), WithinAbs(0.002, 1e-15));
    st.step = 199;
    REQUIRE_THAT(effective_lr(st), WithinAbs(0.002, 1e-15));
    st.step = 200;
    REQUIRE_THAT(effective_lr(st), WithinAbs(0.00194, 1e-12));
    st.step = 400;
    REQUIRE_THAT(effective_lr(st), WithinAbs(0.002 * 0.97 * 0.97, 1e-15));
}

TEST_CASE("adam matches a hand-written reference loop") {
    // reference loop written out independently
    double rp = 0.0, rm = 0.0, rv = 0.0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01;

    AdamState st;
    st.cfg.lr = lr;
    st.cfg.decay_every = 200;
    st.init({1});
    double p = 0.0;
    double prev = 1e300;
    for (int k = 0; k < 1000; ++k) {
        const double g = 1.0;
        double pg = g;
        adam_step(st, std::vector<double*>{&p}, std::vector<const double*>{&pg});

        rm = b1 * rm + (1 - b1) * g;
        rv = b2 * rv + (1 - b2) * g * g;
        const double mhat = rm / (1 - std::pow(b1, k + 1));
        const double vhat = rv / (1 - std::pow(b2, k + 1));
        const double step_lr = lr * std::pow(0.97, k / 200);
        rp -= step_lr * mhat / (std::sqrt(vhat) + eps);

        REQUIRE_THAT(p, WithinAbs(rp, 1e-12));
        REQUIRE(p < prev);
        prev = p;
    }
    REQUIRE(st.step == 1000);
}

TEST_CASE("adam rejects mismatched parameter lists") {
    AdamState st;
    st.init({4});
    FieldTensor p(1, 1, 2, 2, 0.0), g(1, 1, 1, 2, 0.0);
    REQUIRE_THROWS_AS(adam_step(st, {&p}, {(const FieldTensor*)&g}), std::invalid_argument);
    FieldTensor g2(1, 1, 2, 2, 0.0);
    REQUIRE_THROWS_AS(adam_step(st, {&p, &p}, {(const FieldTensor*)&g2}),
                      std::invalid_argument);
}
