#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flowsr/flow_layers.hpp"
#include "flowsr/ops.hpp"
#include "flowsr/rng.hpp"
#include "oracle.hpp"

using namespace flowsr;
namespace ops = flowsr::ops;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.vec().size(); ++i) m = std::max(m, std::fabs(a.vec()[i] - b.vec()[i]));
    return m;
}

// Fills every parameter with small Gaussians so zero-initialized heads
// become active (bijectivity must hold for arbitrary parameters).
template <class Layer>
void randomize_params(Layer& layer, Rng& rng, double sd = 0.3) {
    layer.visit_params("", [&](const std::string&, Tensor& t) {
        for (double& v : t.vec()) v = sd * rng.gaussian();
    });
}

}  // namespace

// ---- actnorm ----

TEST_CASE("fresh actnorm is the identity with zero logdet") {
    ActNorm an(3);
    Rng rng(1);
    Tensor h = gauss_sample(rng, {2, 3, 4, 4}, 1.0);
    Tensor ld({2}, 0.0);
    Tensor out = an.forward(h, ld);
    CHECK(max_abs_diff(out, h) == 0.0);
    for (double v : ld.vec()) CHECK(v == 0.0);
    CHECK_FALSE(an.initialized());
}

TEST_CASE("actnorm applies scale then shift with the exact logdet") {
    ActNorm an(1);
    an.scale().vec() = {2.0};
    an.bias().vec() = {0.5};
    Tensor h = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor ld({1}, 0.0);
    Tensor out = an.forward(h, ld);
    CHECK(out.vec()[0] == doctest::Approx(2.5));
    CHECK(out.vec()[1] == doctest::Approx(4.5));
    CHECK(out.vec()[2] == doctest::Approx(6.5));
    CHECK(out.vec()[3] == doctest::Approx(8.5));
    CHECK(ld.vec()[0] == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));

    Tensor back = an.inverse(out);
    CHECK(max_abs_diff(back, h) < 1e-12);
}

TEST_CASE("actnorm logdet matches the finite-difference Jacobian") {
    ActNorm an(2);
    Rng rng(2);
    an.scale().vec() = {1.7, -0.6};
    an.bias().vec() = {0.2, -0.4};
    Tensor probe = gauss_sample(rng, {1, 2, 2, 2}, 1.0);
    auto fn = [&](const std::vector<double>& x) {
        Tensor h = Tensor::from_data({1, 2, 2, 2}, x);
        Tensor ld({1}, 0.0);
        return an.forward(h, ld).vec();
    };
    double numeric = oracle::numeric_logdet(fn, probe.vec());
    Tensor ld({1}, 0.0);
    an.forward(probe, ld);
    CHECK(oracle::rel_err(ld.vec()[0], numeric) < 1e-5);
}

TEST_CASE("actnorm data init whitens the batch per channel") {
    ActNorm an(3);
    Rng rng(3);
    Tensor h = gauss_sample(rng, {4, 3, 5, 5}, 1.0);
    // move the channels around so init has work to do
    for (int64_t c = 0; c < 3; ++c) {
        for (int64_t b = 0; b < 4; ++b) {
            for (int64_t y = 0; y < 5; ++y) {
                for (int64_t x = 0; x < 5; ++x) {
                    h.at4(b, c, y, x) = 3.0 * h.at4(b, c, y, x) + 0.7 * static_cast<double>(c + 1);
                }
            }
        }
    }
    an.init_from(h);
    CHECK(an.initialized());
    Tensor ld({4}, 0.0);
    Tensor out = an.forward(h, ld);
    // per-channel mean ~ 0 and sample variance ~ 1
    int64_t n = 4 * 5 * 5;
    for (int64_t c = 0; c < 3; ++c) {
        double mu = 0.0;
        for (int64_t b = 0; b < 4; ++b) {
            for (int64_t y = 0; y < 5; ++y) {
                for (int64_t x = 0; x < 5; ++x) mu += out.at4(b, c, y, x);
            }
        }
        mu /= static_cast<double>(n);
        double ss = 0.0;
        for (int64_t b = 0; b < 4; ++b) {
            for (int64_t y = 0; y < 5; ++y) {
                for (int64_t x = 0; x < 5; ++x) {
                    double d = out.at4(b, c, y, x) - mu;
                    ss += d * d;
                }
            }
        }
        double var = ss / static_cast<double>(n - 1);
        CHECK(std::fabs(mu) < 1e-6);
        CHECK(std::fabs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("actnorm rejects a zero scale") {
    ActNorm an(2);
    an.scale().vec() = {1.0, 0.0};
    Tensor h({1, 2, 2, 2}, 1.0);
    Tensor ld({1}, 0.0);
    CHECK_THROWS_AS(an.forward(h, ld), SingularError);
    CHECK_THROWS_AS(an.inverse(h), SingularError);
}

// ---- invertible 1x1 ----

TEST_CASE("1x1 with identity matrix is the identity") {
    Rng rng(4);
    Inv1x1 layer(3, rng);
    layer.weight() = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor h = gauss_sample(rng, {2, 3, 2, 2}, 1.0);
    Tensor ld({2}, 0.0);
    Tensor out = layer.forward(h, ld);
    CHECK(max_abs_diff(out, h) < 1e-15);
    for (double v : ld.vec()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("1x1 with a swap matrix permutes channels at zero logdet") {
    Rng rng(5);
    Inv1x1 layer(2, rng);
    layer.weight() = Tensor::from_data({2, 2}, {0, 1, 1, 0});
    Tensor h = gauss_sample(rng, {1, 2, 3, 3}, 1.0);
    Tensor ld({1}, 0.0);
    Tensor out = layer.forward(h, ld);
    for (int64_t y = 0; y < 3; ++y) {
        for (int64_t x = 0; x < 3; ++x) {
            CHECK(out.at4(0, 0, y, x) == h.at4(0, 1, y, x));
            CHECK(out.at4(0, 1, y, x) == h.at4(0, 0, y, x));
        }
    }
    CHECK(ld.vec()[0] == doctest::Approx(0.0));  // |det| = 1
}

TEST_CASE("1x1 doubling matrix has logdet H*W*log det") {
    Rng rng(6);
    Inv1x1 layer(2, rng);
    layer.weight() = Tensor::from_data({2, 2}, {2, 0, 0, 2});
    Tensor h({1, 2, 3, 3}, 1.0);
    Tensor ld({1}, 0.0);
    layer.forward(h, ld);
    CHECK(ld.vec()[0] == doctest::Approx(9.0 * std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("1x1 starts as a rotation: zero logdet, exact round trip") {
    Rng rng(7);
    Inv1x1 layer(6, rng);
    Tensor h = gauss_sample(rng, {2, 6, 3, 3}, 1.0);
    Tensor ld({2}, 0.0);
    Tensor out = layer.forward(h, ld);
    for (double v : ld.vec()) CHECK(std::fabs(v) < 1e-9);
    CHECK(max_abs_diff(layer.inverse(out), h) < 1e-9);
}

TEST_CASE("1x1 logdet matches the finite-difference Jacobian") {
    Rng rng(8);
    Inv1x1 layer(3, rng);
    // skew the rotation so the determinant is not trivially 1
    layer.weight().vec()[0] += 0.4;
    layer.weight().vec()[4] -= 0.2;
    Tensor probe = gauss_sample(rng, {1, 3, 2, 2}, 1.0);
    auto fn = [&](const std::vector<double>& x) {
        Tensor h = Tensor::from_data({1, 3, 2, 2}, x);
        Tensor ld({1}, 0.0);
        return layer.forward(h, ld).vec();
    };
    double numeric = oracle::numeric_logdet(fn, probe.vec());
    Tensor ld({1}, 0.0);
    layer.forward(probe, ld);
    CHECK(oracle::rel_err(ld.vec()[0], numeric) < 1e-5);
}

TEST_CASE("1x1 rejects a singular matrix") {
    Rng rng(9);
    Inv1x1 layer(2, rng);
    layer.weight() = Tensor({2, 2}, 0.0);
    Tensor h({1, 2, 2, 2}, 1.0);
    Tensor ld({1}, 0.0);
    CHECK_THROWS_AS(layer.forward(h, ld), SingularError);
    CHECK_THROWS_AS(layer.inverse(h), SingularError);
}

// ---- affine coupling ----

TEST_CASE("zero-initialized coupling is an exact identity") {
    Rng rng(10);
    AffineCoupling layer(4, 0, 8, rng);
    Tensor h = gauss_sample(rng, {2, 4, 4, 4}, 1.0);
    Tensor ld({2}, 0.0);
    Tensor out = layer.forward(h, Tensor(), ld);
    CHECK(max_abs_diff(out, h) == 0.0);
    for (double v : ld.vec()) CHECK(v == 0.0);
}

TEST_CASE("coupling with a constant stubbed scale has the closed-form logdet") {
    Rng rng(11);
    AffineCoupling layer(4, 0, 8, rng);
    const double raw = 0.3;
    layer.net().scale_head_bias().vec() = {raw, raw};
    double s_eff = kScaleClamp * std::tanh(raw / kScaleClamp);
    Tensor h = gauss_sample(rng, {3, 4, 5, 5}, 1.0);
    Tensor ld({3}, 0.0);
    layer.forward(h, Tensor(), ld);
    // scale acts on C/2 = 2 channels over 5x5 positions
    for (double v : ld.vec()) CHECK(v == doctest::Approx(s_eff * 2 * 25).epsilon(1e-10));
}

TEST_CASE("conditional coupling round-trips under random parameters") {
    Rng rng(12);
    AffineCoupling layer(4, 3, 8, rng);
    randomize_params(layer, rng);
    Tensor h = gauss_sample(rng, {2, 4, 4, 4}, 1.0);
    Tensor u = gauss_sample(rng, {2, 3, 4, 4}, 1.0);
    Tensor ld({2}, 0.0);
    Tensor out = layer.forward(h, u, ld);
    CHECK(max_abs_diff(out, h) > 1e-3);  // actually transforms
    CHECK(max_abs_diff(layer.inverse(out, u), h) < 1e-9);
}

TEST_CASE("unconditional coupling round-trips under random parameters") {
    Rng rng(13);
    AffineCoupling layer(6, 0, 8, rng);
    randomize_params(layer, rng);
    Tensor h = gauss_sample(rng, {2, 6, 4, 4}, 1.0);
    Tensor ld({2}, 0.0);
    Tensor out = layer.forward(h, Tensor(), ld);
    CHECK(max_abs_diff(layer.inverse(out, Tensor()), h) < 1e-9);
}

TEST_CASE("coupling ignores the passthrough half in its logdet: FD oracle") {
    Rng rng(14);
    AffineCoupling layer(4, 2, 8, rng);
    randomize_params(layer, rng);
    Tensor u = gauss_sample(rng, {1, 2, 2, 2}, 1.0);
    Tensor probe = gauss_sample(rng, {1, 4, 2, 2}, 1.0);
    auto fn = [&](const std::vector<double>& x) {
        Tensor h = Tensor::from_data({1, 4, 2, 2}, x);
        Tensor ld({1}, 0.0);
        return layer.forward(h, u, ld).vec();
    };
    double numeric = oracle::numeric_logdet(fn, probe.vec());
    Tensor ld({1}, 0.0);
    layer.forward(probe, u, ld);
    CHECK(oracle::rel_err(ld.vec()[0], numeric) < 1e-5);
}

TEST_CASE("coupling requires an even channel count") {
    Rng rng(15);
    CHECK_THROWS_AS(AffineCoupling(5, 0, 8, rng), ConfigError);
}

TEST_CASE("conditional coupling demands matching conditioning") {
    Rng rng(16);
    AffineCoupling layer(4, 3, 8, rng);
    Tensor h({1, 4, 4, 4}, 0.0);
    Tensor ld({1}, 0.0);
    CHECK_THROWS_AS(layer.forward(h, Tensor(), ld), ShapeError);          // missing
    Tensor u_bad({1, 3, 2, 2}, 0.0);                                      // wrong size
    CHECK_THROWS_AS(layer.forward(h, u_bad, ld), ShapeError);
    Tensor u_ch({1, 2, 4, 4}, 0.0);                                       // wrong channels
    CHECK_THROWS_AS(layer.forward(h, u_ch, ld), ShapeError);
}

TEST_CASE("clamped scales keep the round trip tight even for huge raw outputs") {
    Rng rng(17);
    AffineCoupling layer(4, 0, 8, rng);
    randomize_params(layer, rng);
    layer.net().scale_head_bias().vec() = {1000.0, -1000.0};  // clamps to +-kScaleClamp
    Tensor h = gauss_sample(rng, {1, 4, 4, 4}, 1.0);
    Tensor ld({1}, 0.0);
    Tensor out = layer.forward(h, Tensor(), ld);
    CHECK(max_abs_diff(layer.inverse(out, Tensor()), h) < 1e-9);
    bool finite = true;
    for (double v : out.vec()) finite = finite && std::isfinite(v);
    CHECK(finite);
}

// ---- affine injector ----

TEST_CASE("zero-initialized injector is an exact identity") {
    Rng rng(18);
    AffineInjector layer(4, 3, 8, rng);
    Tensor h = gauss_sample(rng, {2, 4, 4, 4}, 1.0);
    Tensor u = gauss_sample(rng, {2, 3, 4, 4}, 1.0);
    Tensor ld({2}, 0.0);
    Tensor out = layer.forward(h, u, ld);
    CHECK(max_abs_diff(out, h) == 0.0);
    for (double v : ld.vec()) CHECK(v == 0.0);
}

TEST_CASE("injector with constant stubbed scale covers all channels and positions") {
    Rng rng(19);
    AffineInjector layer(4, 2, 8, rng);
    const double raw = -0.4;
    layer.net().scale_head_bias().vec() = {raw, raw, raw, raw};
    double s_eff = kScaleClamp * std::tanh(raw / kScaleClamp);
    Tensor h = gauss_sample(rng, {2, 4, 3, 3}, 1.0);
    Tensor u = gauss_sample(rng, {2, 2, 3, 3}, 1.0);
    Tensor ld({2}, 0.0);
    layer.forward(h, u, ld);
    for (double v : ld.vec()) CHECK(v == doctest::Approx(s_eff * 4 * 9).epsilon(1e-10));
}

TEST_CASE("injector round-trips under random parameters") {
    Rng rng(20);
    AffineInjector layer(4, 3, 8, rng);
    randomize_params(layer, rng);
    Tensor h = gauss_sample(rng, {2, 4, 4, 4}, 1.0);
    Tensor u = gauss_sample(rng, {2, 3, 4, 4}, 1.0);
    Tensor ld({2}, 0.0);
    Tensor out = layer.forward(h, u, ld);
    CHECK(max_abs_diff(out, h) > 1e-3);
    CHECK(max_abs_diff(layer.inverse(out, u), h) < 1e-9);
}

TEST_CASE("injector logdet matches the finite-difference Jacobian") {
    Rng rng(21);
    AffineInjector layer(2, 2, 8, rng);
    randomize_params(layer, rng);
    Tensor u = gauss_sample(rng, {1, 2, 2, 2}, 1.0);
    Tensor probe = gauss_sample(rng, {1, 2, 2, 2}, 1.0);
    auto fn = [&](const std::vector<double>& x) {
        Tensor h = Tensor::from_data({1, 2, 2, 2}, x);
        Tensor ld({1}, 0.0);
        return layer.forward(h, u, ld).vec();
    };
    double numeric = oracle::numeric_logdet(fn, probe.vec());
    Tensor ld({1}, 0.0);
    layer.forward(probe, u, ld);
    CHECK(oracle::rel_err(ld.vec()[0], numeric) < 1e-5);
}

TEST_CASE("injector cannot be built without conditioning") {
    Rng rng(22);
    CHECK_THROWS_AS(AffineInjector(4, 0, 8, rng), ConfigError);
}

// ---- squeeze ordering (documented contract) ----

TEST_CASE("squeeze flattens one 2x2 cell in reading order") {
    Tensor h = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});  // a b / c d
    Tensor s = ops::squeeze2x2(h);
    CHECK(s.shape() == std::vector<int64_t>({1, 4, 1, 1}));
    CHECK(s.vec() == std::vector<double>({1, 2, 3, 4}));
    Tensor back = ops::unsqueeze2x2(s);
    CHECK(max_abs_diff(back, h) == 0.0);
}

TEST_CASE("parameter visitation covers every trainable tensor") {
    Rng rng(23);
    AffineCoupling layer(4, 2, 8, rng);
    std::vector<std::string> names;
    layer.visit_params("step.", [&](const std::string& n, Tensor&) { names.push_back(n); });
    REQUIRE(names.size() == 8);
    CHECK(names[0] == "step.net.conv1.weight");
    CHECK(names.back() == "step.net.shift_head.bias");

    ActNorm an(2);
    names.clear();
    an.visit_params("an.", [&](const std::string& n, Tensor&) { names.push_back(n); });
    REQUIRE(names.size() == 2);
    CHECK(names[0] == "an.scale");
    CHECK(names[1] == "an.bias");
}

TEST_CASE("gradients flow through a coupling layer's parameters") {
    Rng rng(24);
    AffineCoupling layer(4, 2, 8, rng);
    std::vector<Tensor> params;
    layer.visit_params("", [&](const std::string&, Tensor& t) {
        t.set_requires_grad(true);
        params.push_back(t);
    });
    Tensor h = gauss_sample(rng, {1, 4, 3, 3}, 1.0);
    Tensor u = gauss_sample(rng, {1, 2, 3, 3}, 1.0);
    auto build = [&]() {
        Tensor ld({1}, 0.0);
        Tensor out = layer.forward(h, u, ld);
        return ops::add(ops::mean(ops::mul(out, out)), ops::mean(ld));
    };
    auto res = oracle::gradcheck(build, params);
    INFO(res.describe());
    CHECK(res.max_rel < 1e-5);
}
