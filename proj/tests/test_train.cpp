#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "msfs/train.hpp"
#include "test_support.hpp"

using namespace msfs;
using msfs::test::random_tensor;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("msfs_test_train_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

ModelConfig micro() {
    ModelConfig c;
    c.width = 4;
    c.enc_blocks = {1, 1, 1, 1};
    c.groups = 2;
    return c;
}

std::vector<ImagePair<float>> noisy_pairs(std::size_t n, std::size_t size, std::uint64_t seed) {
    std::vector<ImagePair<float>> out;
    for (std::size_t i = 0; i < n; ++i) {
        auto c = synth_clean_image<float>(size, size, seed + i);
        out.push_back({add_gaussian_noise(c, 25, seed + 100 + i), c, "img" + std::to_string(i)});
    }
    return out;
}

TrainInputs small_run(const fs::path& out, std::size_t steps) {
    TrainInputs in;
    in.model = micro();
    in.train.total_steps = steps;
    in.train.batch_size = 2;
    in.train.patch = 16;
    in.train.lr_init = 1e-3;
    in.train.seed = 5;
    in.train.eval_every = 2;
    in.data = noisy_pairs(3, 24, 1);
    in.paths.output_dir = out;
    return in;
}

} // namespace

TEST(CosineLr, EndpointsAndMidpoint) {
    TrainConfig c;
    c.total_steps = 1000;
    EXPECT_EQ(cosine_lr(0, c), 2e-4);
    EXPECT_EQ(cosine_lr(1000, c), 1e-7);
    EXPECT_NEAR(cosine_lr(500, c), (2e-4 + 1e-7) / 2, 1e-18);
    for (std::size_t s = 1; s <= 1000; ++s) EXPECT_LE(cosine_lr(s, c), cosine_lr(s - 1, c));
    EXPECT_THROW(cosine_lr(1001, c), InvalidInputError);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.lr_min = 1e-3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.patch = 20;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Adam, FirstStepWithUnitGradientMovesByLr) {
    ParameterStore<double> s;
    auto p = s.add("w", Tensor<double>({1}, 0.7));
    p.mutable_grad()[0] = 1.0;
    AdamState<double> st;
    TrainConfig c;
    adam_step(s, st, 0.01, c);
    // m_hat = v_hat = 1, so the step is lr / (1 + eps).
    EXPECT_NEAR(p.value()[0], 0.7 - 0.01 / (1 + 1e-8), 1e-15);
    EXPECT_EQ(st.step, 1u);
    // Second step, gradient 1 again: m = 0.19, v = 0.001999; corrections 0.19 and 0.001999.
    adam_step(s, st, 0.01, c);
    EXPECT_NEAR(p.value()[0], 0.7 - 2 * 0.01 / (1 + 1e-8), 1e-12);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    ParameterStore<float> s;
    auto a = s.add("a", random_tensor<float>({3, 4}, 1));
    auto b = s.add("b", random_tensor<float>({5}, 2));
    const auto a0 = a.value(), b0 = b.value();
    a.mutable_grad();
    AdamState<float> st;
    adam_step(s, st, 0.1, TrainConfig{});
    EXPECT_EQ(a.value(), a0);
    EXPECT_EQ(b.value(), b0);
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
    ParameterStore<float> s;
    s.add("enc1.block0.naf.expand.weight", Tensor<float>({2}, 0.f));
    auto v = s.get("enc1.block0.naf.expand.weight");
    v.mutable_grad()[1] = std::numeric_limits<float>::quiet_NaN();
    AdamState<float> st;
    try {
        adam_step(s, st, 0.1, TrainConfig{});
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("enc1.block0.naf.expand.weight"), std::string::npos);
    }
    EXPECT_EQ(v.value()[0], 0.f);
}

TEST(Adam, GradientClipScalesUpdateDirection) {
    ParameterStore<double> s;
    auto p = s.add("w", Tensor<double>({2}, 0.0));
    p.mutable_grad()[0] = 30;
    p.mutable_grad()[1] = 40;
    TrainConfig c;
    c.grad_clip = 5;
    AdamState<double> st;
    adam_step(s, st, 0.1, c);
    // First Adam step is sign-like regardless of scale.
    EXPECT_NEAR(p.value()[0], -0.1, 1e-7);
    EXPECT_NEAR(p.value()[1], -0.1, 1e-7);
    EXPECT_NEAR(st.m[0][0], 0.1 * 3, 1e-12);
}

TEST(Sampler, IndependentOfWorkerCountAndEpochCoversData) {
    auto data = noisy_pairs(5, 20, 3);
    PatchSampler s(data, 8, 11);
    auto one = s.batch(0, 10, 1), four = s.batch(0, 10, 4);
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(one[i].clean, four[i].clean);
        EXPECT_EQ(one[i].degraded, four[i].degraded);
    }
    for (std::size_t e = 0; e < 2; ++e) {
        std::set<std::string> ids;
        for (const auto& p : s.batch(e * 5, 5, 1)) ids.insert(p.id);
        EXPECT_EQ(ids.size(), 5u);
    }
    EXPECT_THROW(PatchSampler(std::vector<ImagePair<float>>{}, 8, 1), DataError);
}

TEST(Sampler, OnlineDegradationUsesCleanPatch) {
    auto data = noisy_pairs(2, 16, 4);
    DegradationSpec spec;
    spec.kind = DegradationKind::gaussian_blur;
    PatchSampler s(data, 8, 2, spec);
    auto p = s.sample(3);
    EXPECT_EQ(p.degraded, gaussian_blur(p.clean, spec.blur_sigma, spec.blur_kernel));
}

TEST(Evaluate, CleanVsCleanAndZeroHeadBaseline) {
    auto pairs = noisy_pairs(3, 24, 9);
    auto m = Model<float>::build(micro(), 1);
    m.zero_heads();
    std::vector<ImagePair<float>> clean_pairs;
    for (const auto& p : pairs) clean_pairs.push_back({p.clean, p.clean, p.id});
    auto rep = evaluate(m, clean_pairs, Protocol::rgb);
    EXPECT_TRUE(std::isinf(rep.mean_psnr));
    EXPECT_NEAR(rep.mean_ssim, 1.0, 1e-12);
    EXPECT_EQ(to_json(rep)["psnr_db"], "inf");

    auto zr = evaluate(m, pairs, Protocol::rgb), base = baseline(pairs, Protocol::rgb);
    ASSERT_EQ(zr.images.size(), 3u);
    double sp = 0, ss = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(zr.images[i].psnr, base.images[i].psnr);
        EXPECT_EQ(zr.images[i].ssim, base.images[i].ssim);
        sp += zr.images[i].psnr;
        ss += zr.images[i].ssim;
    }
    EXPECT_NEAR(zr.mean_psnr, sp / 3, 1e-12);
    EXPECT_NEAR(zr.mean_ssim, ss / 3, 1e-12);
}

TEST(Evaluate, YProtocolDiffersOnColouredNoise) {
    auto c = synth_clean_image<float>(24, 24, 2);
    auto d = c;
    // Noise on red only: luma sees a third of it.
    auto n = random_tensor<float>({24, 24, 1}, 3, -0.1, 0.1);
    for (std::size_t p = 0; p < d.pixels(); ++p) d[3 * p] = std::clamp(d[3 * p] + n[p], 0.f, 1.f);
    std::vector<ImagePair<float>> pairs{{d, c, "x"}};
    const double rgb = baseline(pairs, Protocol::rgb).mean_psnr, y = baseline(pairs, Protocol::y).mean_psnr;
    EXPECT_GT(y, rgb + 3);
    EXPECT_EQ(parse_protocol("y_channel"), Protocol::y);
    EXPECT_THROW(parse_protocol("lab"), ConfigError);
}

TEST(Train, ZeroStepRunWritesInitialization) {
    const auto out = scratch("zero");
    auto in = small_run(out, 0);
    auto res = train(in);
    EXPECT_TRUE(res.log.empty());
    auto ck = load_checkpoint(res.checkpoint);
    EXPECT_EQ(ck.step, 0u);
    EXPECT_EQ(ck.seed, 5u);
    EXPECT_EQ(slurp(res.checkpoint), serialize_checkpoint(Model<float>::build(in.model, 5), 0, 5));
    EXPECT_EQ(slurp(res.csv), csv_header() + "\n");
}

TEST(Train, ReplayIsByteIdenticalAndLossDrops) {
    const auto a = scratch("replay_a"), b = scratch("replay_b");
    auto ra = train(small_run(a, 6));
    auto rb = train(small_run(b, 6));
    EXPECT_EQ(slurp(ra.checkpoint), slurp(rb.checkpoint));
    EXPECT_EQ(slurp(ra.csv), slurp(rb.csv));
    ASSERT_EQ(ra.log.size(), 6u);
    EXPECT_TRUE(ra.log[1].eval_psnr.has_value());
    EXPECT_FALSE(ra.log[2].eval_psnr.has_value());
    EXPECT_EQ(load_checkpoint(ra.checkpoint).step, 6u);

    // Worker count must not change anything.
    auto in = small_run(scratch("replay_w"), 6);
    in.train.workers = 3;
    EXPECT_EQ(slurp(train(in).checkpoint), slurp(ra.checkpoint));

    // CSV columns and first row.
    std::istringstream csv(slurp(ra.csv));
    std::string header, first;
    std::getline(csv, header);
    std::getline(csv, first);
    EXPECT_EQ(header, "step,lr,loss_total,loss_spatial,loss_freq,eval_psnr,eval_ssim");
    EXPECT_EQ(first.substr(0, 8), "1,0.001,");
}

TEST(Train, EveryParameterMoves) {
    auto in = small_run({}, 2);
    auto init = Model<float>::build(in.model, in.train.seed);
    auto res = train(in);
    const auto& after = res.model.parameters().entries();
    for (std::size_t i = 0; i < after.size(); ++i) {
        const auto& [path, v] = after[i];
        // Attention projections see no gradient while the fusion scales are zero.
        const bool blocked = path.find(".fcam.l2h.") != std::string::npos || path.find(".fcam.h2l.") != std::string::npos ||
                             path.find(".fcam.norm_") != std::string::npos;
        if (blocked) continue;
        EXPECT_NE(v.value(), init.parameters().entries()[i].second.value()) << path;
    }
}

TEST(Train, NonFiniteLossKeepsLastCheckpoint) {
    const auto out = scratch("nan");
    auto in = small_run(out, 5);
    in.train.checkpoint_every = 1;
    in.on_step = [&](const LogRow& r) {
        if (r.step == 2)
            for (auto& p : in.data) p.degraded.fill(std::numeric_limits<float>::quiet_NaN());
    };
    EXPECT_THROW(train(in), NumericalError);
    EXPECT_EQ(load_checkpoint(out / "checkpoint.msfs").step, 2u);
}

TEST(Train, EmptyDatasetIsDataError) {
    auto in = small_run({}, 1);
    in.data.clear();
    EXPECT_THROW(train(in), DataError);
}

TEST(Workers, EnvironmentOverride) {
    ::setenv("MSFS_NUM_WORKERS", "3", 1);
    EXPECT_EQ(resolve_workers(1), 3u);
    ::setenv("MSFS_NUM_WORKERS", "zero", 1);
    EXPECT_THROW(resolve_workers(1), ConfigError);
    ::unsetenv("MSFS_NUM_WORKERS");
    EXPECT_EQ(resolve_workers(2), 2u);
}
