#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

#include "msfs/attention.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace msfs;
using msfs::test::random_tensor;

namespace {

template <typename T>
Var<T> cst(Tensor<T> t) {
    return Var<T>::constant(std::move(t));
}

template <typename T>
FCAMParams<T> make_fcam(ParameterStore<T>& store, std::size_t c, std::uint64_t seed, bool perturb) {
    std::mt19937_64 rng(seed);
    ParamBuilder<T> b(store, rng);
    auto p = FCAMParams<T>::create(b, c);
    if (!perturb) return p;
    for (auto [name, v] : store.entries())
        if (name.find("gamma") != std::string::npos || name.find("lambda") != std::string::npos ||
            name.ends_with(".beta"))
            msfs::test::randomize(v, rng, 0.5, 1.5);
        else if (name.find("bias") != std::string::npos || name.find("norm_") != std::string::npos)
            msfs::test::randomize(v, rng, -0.3, 0.3);
    return p;
}

oracle::Map fcam_reference(const Tensor<double>& low, const Tensor<double>& high, const FCAMParams<double>& p) {
    using namespace oracle;
    auto nl = layer_norm(low, p.norm_low.gamma.value(), p.norm_low.beta.value());
    auto nh = layer_norm(high, p.norm_high.gamma.value(), p.norm_high.beta.value());
    auto dir = [](const AttentionParams<double>& a, const Map& src, const Map& dst) {
        return attention(conv(src, a.query.weight.value(), a.query.bias.value()),
                         conv(dst, a.key.weight.value(), a.key.bias.value()),
                         conv(dst, a.value.weight.value(), a.value.bias.value()), a.beta.value()[0]);
    };
    return plus(scale_channels(dir(p.low_to_high, nl, nh), p.scales.low.value()),
                scale_channels(dir(p.high_to_low, nh, nl), p.scales.high.value()));
}

} // namespace

TEST(ScaledDotAttention, SingleTokenReturnsValue) {
    auto q = random_tensor<float>({1, 5}, 1), k = random_tensor<float>({1, 5}, 2), v = random_tensor<float>({1, 5}, 3);
    auto out = scaled_dot_attention(cst(q), cst(k), cst(v), cst(Tensor<float>({1}, 0.7f))).value();
    EXPECT_EQ(out, v);
}

TEST(ScaledDotAttention, IdenticalKeysAverageValues) {
    const std::size_t n = 6, c = 3;
    auto q = random_tensor<double>({n, c}, 4), v = random_tensor<double>({n, c}, 5);
    Tensor<double> k({n, c});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) k[i * c + j] = 0.1 * (j + 1);
    auto out = scaled_dot_attention(cst(q), cst(k), cst(v), cst(Tensor<double>({1}, 1.3))).value();
    for (std::size_t j = 0; j < c; ++j) {
        double m = 0;
        for (std::size_t i = 0; i < n; ++i) m += v[i * c + j] / n;
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(out[i * c + j], m, 1e-12);
    }
}

TEST(ScaledDotAttention, TwoTokenHandComputation) {
    Tensor<double> q({2, 1}, std::vector<double>{0, 1}), k({2, 1}, std::vector<double>{0, 1}),
        v({2, 1}, std::vector<double>{1, 3});
    auto out = scaled_dot_attention(cst(q), cst(k), cst(v), cst(Tensor<double>({1}, 1.0))).value();
    EXPECT_NEAR(out[0], 2.0, 1e-12);
    EXPECT_NEAR(out[1], 2.46212, 1e-5);
}

TEST(ScaledDotAttention, WeightsAreRowStochastic) {
    for (std::size_t n : {1u, 7u, 64u}) {
        auto q = random_tensor<float>({n, 4}, n, -3, 3), k = random_tensor<float>({n, 4}, n + 1, -3, 3);
        auto p = attention_weights(q, k, 2.0f);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < n; ++j) {
                EXPECT_GE(p[i * n + j], 0.f);
                s += p[i * n + j];
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(ScaledDotAttention, FastSoftmaxMatchesDoubleReference) {
    auto q = random_tensor<float>({50, 8}, 11, -4, 4), k = random_tensor<float>({50, 8}, 12, -4, 4),
         v = random_tensor<float>({50, 8}, 13);
    auto out = scaled_dot_attention(cst(q), cst(k), cst(v), cst(Tensor<float>({1}, 1.5f))).value();
    oracle::Map ref_w;
    auto ref = oracle::attention(q.cast<double>().reshaped({50, 1, 8}), k.cast<double>().reshaped({50, 1, 8}),
                                 v.cast<double>().reshaped({50, 1, 8}), 1.5, &ref_w);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-5);
    auto w = attention_weights(q, k, 1.5f);
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], ref_w[i], 1e-6);
}

TEST(ScaledDotAttention, TokenPermutationEquivariance) {
    const std::size_t n = 9, c = 3;
    auto q = random_tensor<double>({n, c}, 21), k = random_tensor<double>({n, c}, 22), v = random_tensor<double>({n, c}, 23);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(5));
    auto permute = [&](const Tensor<double>& t) {
        Tensor<double> r(t.shape());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) r[i * c + j] = t[perm[i] * c + j];
        return r;
    };
    const auto beta = cst(Tensor<double>({1}, 1.7));
    auto out = scaled_dot_attention(cst(q), cst(k), cst(v), beta).value();
    auto outp = scaled_dot_attention(cst(permute(q)), cst(permute(k)), cst(permute(v)), beta).value();
    EXPECT_LE(max_abs_diff(outp, permute(out)), 1e-12);
}

TEST(ScaledDotAttention, Errors) {
    const auto beta = cst(Tensor<float>({1}, 1.f));
    EXPECT_THROW(scaled_dot_attention(cst(Tensor<float>({0, 4})), cst(Tensor<float>({0, 4})),
                                      cst(Tensor<float>({0, 4})), beta),
                 InvalidInputError);
    Tensor<float> big({2, 2}, 1e30f);
    EXPECT_THROW(scaled_dot_attention(cst(big), cst(big), cst(big), beta), NumericalError);
    Tensor<float> nan({2, 2}, 0.f);
    nan[1] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(scaled_dot_attention(cst(nan), cst(Tensor<float>({2, 2}, 1.f)), cst(nan), beta), NumericalError);
    EXPECT_THROW(scaled_dot_attention(cst(Tensor<float>({2, 2})), cst(Tensor<float>({3, 2})),
                                      cst(Tensor<float>({3, 2})), beta),
                 InvalidInputError);
    EXPECT_THROW(scaled_dot_attention(cst(Tensor<float>({2, 2})), cst(Tensor<float>({2, 2})),
                                      cst(Tensor<float>({2, 2})), cst(Tensor<float>({1}, 0.f))),
                 NumericalError);
}

TEST(ScaledDotAttention, TokenGuardOnlyWhenRecording) {
    auto q = Var<float>::leaf(random_tensor<float>({10, 2}, 1));
    auto kv = cst(random_tensor<float>({10, 2}, 2));
    const auto beta = cst(Tensor<float>({1}, 1.f));
    try {
        scaled_dot_attention(q, kv, kv, beta, 8);
        FAIL() << "expected the token guard to trip";
    } catch (const InvalidInputError& e) {
        EXPECT_NE(std::string(e.what()).find("10 tokens"), std::string::npos);
    }
    NoGradGuard ng;
    EXPECT_NO_THROW(scaled_dot_attention(q, kv, kv, beta, 8));
}

TEST(ScaledDotAttention, RecordedAndStreamedForwardAgree) {
    auto q = Var<float>::leaf(random_tensor<float>({30, 4}, 7)), k = cst(random_tensor<float>({30, 4}, 8)),
         v = cst(random_tensor<float>({30, 4}, 9));
    const auto beta = cst(Tensor<float>({1}, 2.f));
    auto a = scaled_dot_attention(q, k, v, beta).value();
    NoGradGuard ng;
    EXPECT_EQ(a, scaled_dot_attention(q, k, v, beta).value());
}

TEST(Fcam, ZeroScalesGiveZero) {
    ParameterStore<float> store;
    auto p = make_fcam(store, 4, 1, false);
    auto out = fcam(cst(random_tensor<float>({5, 5, 4}, 2)), cst(random_tensor<float>({5, 5, 4}, 3)), p).value();
    for (float v : out.values()) EXPECT_EQ(v, 0.f);
}

TEST(Fcam, BetaStartsAtSqrtChannels) {
    ParameterStore<double> store;
    auto p = make_fcam(store, 16, 1, false);
    EXPECT_DOUBLE_EQ(p.low_to_high.beta.value()[0], 4.0);
    EXPECT_DOUBLE_EQ(p.high_to_low.beta.value()[0], 4.0);
}

TEST(Fcam, SinglePixelReducesToValueProjections) {
    ParameterStore<double> store;
    auto p = make_fcam(store, 4, 3, true);
    p.scales.low.mutable_value().fill(1.0);
    p.scales.high.mutable_value().fill(1.0);
    auto low = random_tensor<double>({1, 1, 4}, 4), high = random_tensor<double>({1, 1, 4}, 5);
    auto out = fcam(cst(low), cst(high), p).value();
    using namespace oracle;
    auto nl = layer_norm(low, p.norm_low.gamma.value(), p.norm_low.beta.value());
    auto nh = layer_norm(high, p.norm_high.gamma.value(), p.norm_high.beta.value());
    auto expected = plus(conv(nh, p.low_to_high.value.weight.value(), p.low_to_high.value.bias.value()),
                         conv(nl, p.high_to_low.value.weight.value(), p.high_to_low.value.bias.value()));
    EXPECT_LE(max_abs_diff(out, expected), 1e-12);
}

TEST(Fcam, MatchesBruteForceOracle) {
    ParameterStore<double> dstore;
    auto pd = make_fcam(dstore, 4, 9, true);
    pd.scales.low.mutable_value().fill(1.0);
    pd.scales.high.mutable_value().fill(1.0);
    ParameterStore<float> fstore;
    auto pf = make_fcam(fstore, 4, 9, false);
    fstore.assign_from(dstore);
    auto low = random_tensor<double>({4, 4, 4}, 10), high = random_tensor<double>({4, 4, 4}, 11);
    auto ref = fcam_reference(low, high, pd);
    auto outf = fcam(cst(low.cast<float>()), cst(high.cast<float>()), pf).value();
    EXPECT_LE(max_abs_diff(outf.cast<double>(), ref), 1e-5);
    auto outd = fcam(cst(low), cst(high), pd).value();
    EXPECT_LE(max_abs_diff(outd, ref), 1e-12);
}

TEST(Fcam, StreamShapeMismatchIsConfigError) {
    ParameterStore<float> store;
    auto p = make_fcam(store, 4, 1, false);
    EXPECT_THROW(fcam(cst(Tensor<float>::feature_map(3, 3, 4)), cst(Tensor<float>::feature_map(3, 4, 4)), p),
                 ConfigError);
}

TEST(Fcam, GradientsMatchFiniteDifferences) {
    ParameterStore<double> store;
    auto p = make_fcam(store, 2, 17, true);
    auto low = Var<double>::leaf(random_tensor<double>({3, 3, 2}, 18));
    auto high = Var<double>::leaf(random_tensor<double>({3, 3, 2}, 19));
    auto w = random_tensor<double>({3, 3, 2}, 20);
    auto vars = store.entries();
    vars.emplace_back("low", low);
    vars.emplace_back("high", high);
    auto res = msfs::test::gradcheck([&] { return weighted_sum(fcam(low, high, p), w); }, vars);
    EXPECT_GT(res.checked, 50u);
    EXPECT_LE(res.max_rel_error, 1e-3) << res.worst;
}
