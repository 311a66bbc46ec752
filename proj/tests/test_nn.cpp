#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "seld/nn.hpp"
#include "testutil.hpp"

using namespace seld;
using testutil::grad_check;

namespace {

MultiheadSelfAttention<double> make_mhsa(std::int64_t embed, std::int64_t heads,
                                         std::uint64_t seed) {
    CounterRng rng(seed);
    MultiheadSelfAttention<double> m;
    m.init(embed, heads, 0.0, seed, 0, rng);
    return m;
}

}  // namespace

TEST_CASE("mhsa rejects embed not divisible by heads") {
    CounterRng rng(1);
    MultiheadSelfAttention<double> m;
    CHECK_THROWS_AS(m.init(10, 3, 0.0, 1, 0, rng), ConfigError);
}

TEST_CASE("mhsa with a single token reduces to out_proj(v_proj(x))") {
    auto m = make_mhsa(8, 2, 2);
    CounterRng rng(3);
    TensorD x = TensorD::rand_normal({2, 1, 8}, rng);
    TensorD got = m.forward(x, false);
    TensorD expect = m.out_proj.forward(m.v_proj.forward(x));
    CHECK(testutil::max_abs_diff(got, expect) <= 1e-12);
}

TEST_CASE("mhsa is permutation-equivariant over the sequence axis") {
    auto m = make_mhsa(16, 4, 4);
    CounterRng rng(5);
    const std::int64_t s = 6, e = 16;
    TensorD x = TensorD::rand_normal({1, s, e}, rng);
    TensorD y = m.forward(x, false);

    // cyclic permutation of the sequence
    std::vector<double> px(static_cast<std::size_t>(s * e));
    for (std::int64_t i = 0; i < s; ++i)
        for (std::int64_t j = 0; j < e; ++j)
            px[static_cast<std::size_t>(i * e + j)] = x.data()[((i + 1) % s) * e + j];
    TensorD xp = TensorD::from({1, s, e}, px);
    TensorD yp = m.forward(xp, false);
    for (std::int64_t i = 0; i < s; ++i)
        for (std::int64_t j = 0; j < e; ++j) {
            const double a = yp.data()[i * e + j];
            const double b = y.data()[((i + 1) % s) * e + j];
            REQUIRE(std::abs(a - b) <= 1e-10);
        }
}

TEST_CASE("mhsa: 2-token single-head hand computation") {
    // hand-set projections: q = [1 0; 0 0], k = [0 1; 0 0], v = identity,
    // out = identity, all biases zero, embed 2, one head, scale 1/sqrt(2)
    MultiheadSelfAttention<double> m;
    CounterRng rng(6);
    m.init(2, 1, 0.0, 1, 0, rng);
    m.q_proj.weight = TensorD::from({2, 2}, {1, 0, 0, 0}).set_requires_grad(true);
    m.k_proj.weight = TensorD::from({2, 2}, {0, 1, 0, 0}).set_requires_grad(true);
    m.v_proj.weight = TensorD::from({2, 2}, {1, 0, 0, 1}).set_requires_grad(true);
    m.out_proj.weight = TensorD::from({2, 2}, {1, 0, 0, 1}).set_requires_grad(true);
    m.q_proj.bias = TensorD::zeros({2}).set_requires_grad(true);
    m.k_proj.bias = TensorD::zeros({2}).set_requires_grad(true);
    m.v_proj.bias = TensorD::zeros({2}).set_requires_grad(true);
    m.out_proj.bias = TensorD::zeros({2}).set_requires_grad(true);

    const double x00 = 0.3, x01 = -0.7, x10 = 1.1, x11 = 0.4;
    TensorD x = TensorD::from({1, 2, 2}, {x00, x01, x10, x11});
    TensorD y = m.forward(x, false);

    // scalar transcription of scaled dot-product attention
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double q0 = x00, q1 = x10;     // q = first feature
    const double k0 = x01, k1 = x11;     // k = second feature
    const double s00 = q0 * k0 * inv_sqrt2, s01 = q0 * k1 * inv_sqrt2;
    const double s10 = q1 * k0 * inv_sqrt2, s11 = q1 * k1 * inv_sqrt2;
    const double a00 = std::exp(s00) / (std::exp(s00) + std::exp(s01));
    const double a01 = std::exp(s01) / (std::exp(s00) + std::exp(s01));
    const double a10 = std::exp(s10) / (std::exp(s10) + std::exp(s11));
    const double a11 = std::exp(s11) / (std::exp(s10) + std::exp(s11));
    const double y00 = a00 * x00 + a01 * x10;
    const double y01 = a00 * x01 + a01 * x11;
    const double y10 = a10 * x00 + a11 * x10;
    const double y11 = a10 * x01 + a11 * x11;

    CHECK(y.data()[0] == doctest::Approx(y00).epsilon(1e-6));
    CHECK(y.data()[1] == doctest::Approx(y01).epsilon(1e-6));
    CHECK(y.data()[2] == doctest::Approx(y10).epsilon(1e-6));
    CHECK(y.data()[3] == doctest::Approx(y11).epsilon(1e-6));
}

TEST_CASE("gradcheck: mhsa end to end") {
    for (int rep = 0; rep < 5; ++rep) {
        auto m = make_mhsa(8, 2, 100 + static_cast<std::uint64_t>(rep));
        CounterRng rng(200 + static_cast<std::uint64_t>(rep));
        TensorD x = TensorD::rand_normal({2, 3, 8}, rng).set_requires_grad(true);
        std::vector<TensorD> leaves = {x,
                                       m.q_proj.weight, m.q_proj.bias,
                                       m.k_proj.weight, m.k_proj.bias,
                                       m.v_proj.weight, m.v_proj.bias,
                                       m.out_proj.weight, m.out_proj.bias};
        CHECK(grad_check([&] {
                  TensorD y = m.forward(x, false);
                  return mean_all(mul(y, y));
              }, leaves) <= 1e-4);
    }
}

TEST_CASE("batch norm keeps running statistics out of train-mode outputs") {
    CounterRng rng(7);
    BatchNorm2dLayer<double> bn;
    bn.init(3, rng);
    TensorD x = TensorD::rand_normal({4, 3, 2, 2}, rng, 2.0, 3.0);
    TensorD y = bn.forward(x, true);
    // per channel: normalized output has ~zero mean and ~unit variance
    for (std::int64_t c = 0; c < 3; ++c) {
        double s = 0.0, s2 = 0.0;
        for (std::int64_t b = 0; b < 4; ++b)
            for (std::int64_t i = 0; i < 4; ++i) {
                const double v = y.data()[(b * 3 + c) * 4 + i];
                s += v;
                s2 += v * v;
            }
        const double mean = s / 16.0;
        const double var = s2 / 16.0 - mean * mean;
        CHECK(std::abs(mean) <= 1e-10);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
    // running stats moved toward the batch statistics
    CHECK(bn.running_mean.data()[0] != 0.0);
    CHECK(bn.running_var.data()[0] != 1.0);
}

TEST_CASE("batch norm eval mode uses the running buffers") {
    CounterRng rng(8);
    BatchNorm2dLayer<double> bn;
    bn.init(2, rng);
    bn.running_mean.data()[0] = 1.0;
    bn.running_mean.data()[1] = -1.0;
    bn.running_var.data()[0] = 4.0;
    bn.running_var.data()[1] = 0.25;
    TensorD x = TensorD::from({1, 2, 1, 1}, {3.0, 0.0});
    TensorD y = bn.forward(x, false);
    CHECK(y.data()[0] == doctest::Approx((3.0 - 1.0) / std::sqrt(4.0 + 1e-5)).epsilon(1e-9));
    CHECK(y.data()[1] == doctest::Approx((0.0 + 1.0) / std::sqrt(0.25 + 1e-5)).epsilon(1e-9));
}

TEST_CASE("layer norm normalizes each row of the last axis") {
    CounterRng rng(9);
    LayerNormLayer<double> ln;
    ln.init(6, rng);
    TensorD x = TensorD::rand_normal({5, 6}, rng, -3.0, 10.0);
    TensorD y = ln.forward(x);
    for (std::int64_t r = 0; r < 5; ++r) {
        double s = 0.0, s2 = 0.0;
        for (std::int64_t j = 0; j < 6; ++j) {
            s += y.data()[r * 6 + j];
            s2 += y.data()[r * 6 + j] * y.data()[r * 6 + j];
        }
        CHECK(std::abs(s / 6.0) <= 1e-10);
        CHECK(s2 / 6.0 == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("parameter names are unique and follow the q_proj convention") {
    CounterRng rng(10);
    MultiheadSelfAttention<double> m;
    m.init(8, 2, 0.0, 1, 0, rng);
    std::vector<NamedTensor<double>> params;
    m.collect("cst.0.t_mhsa", params);
    CHECK(params.size() == 8);
    CHECK(params[0].name == "cst.0.t_mhsa.q_proj.weight");
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = i + 1; j < params.size(); ++j)
            CHECK(params[i].name != params[j].name);
}

TEST_CASE("grad clipping rescales to the requested global norm") {
    CounterRng rng(11);
    TensorD a = TensorD::rand_normal({4}, rng).set_requires_grad(true);
    TensorD b = TensorD::rand_normal({4}, rng).set_requires_grad(true);
    sum_all(mul(add(a, b), add(a, b))).backward();
    std::vector<NamedTensor<double>> params = {{"a", a, true}, {"b", b, true}};
    const double before = grad_global_norm(params);
    REQUIRE(before > 1.0);
    clip_grad_norm(params, 1.0);
    CHECK(grad_global_norm(params) == doctest::Approx(1.0).epsilon(1e-9));
}
