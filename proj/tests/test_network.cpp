#include <gtest/gtest.h>

#include <set>

#include "msfs/network.hpp"
#include "test_support.hpp"

using namespace msfs;
using msfs::test::random_tensor;

namespace {

ModelConfig tiny(std::size_t width = 8, std::size_t groups = 4) {
    ModelConfig c;
    c.width = width;
    c.enc_blocks = {1, 1, 1, 2};
    c.dec_blocks = {1, 1, 1, 1};
    c.middle_blocks = 1;
    c.groups = groups;
    return c;
}

// Hand-summed scalar counts, one line per layer.
std::size_t conv(std::size_t co, std::size_t ci, std::size_t k) { return co * ci * k * k + co; }
std::size_t ln(std::size_t c) { return 2 * c; }
std::size_t naf(std::size_t c) {
    return 2 * ln(c) + conv(2 * c, c, 1) + 2 * c * 9 + 2 * c + 3 * conv(c, c, 1) + conv(2 * c, c, 1);
}
std::size_t fcam(std::size_t c) { return 2 * ln(c) + 2 * (3 * conv(c, c, 1) + 1) + 2 * c; }
std::size_t dfs_branch(std::size_t c, std::size_t g, std::size_t k) {
    return conv(c, c, 1) + conv(g * k * k, c, 1) + ln(g * k * k) + fcam(c);
}
std::size_t msfs_count(std::size_t c, std::size_t g) {
    return naf(c) + dfs_branch(c, g, 3) + dfs_branch(c, g, 5) + conv(c, 2 * c, 1);
}
std::size_t sfe_count(std::size_t c) { return conv(c, 3, 3) + conv(2 * c, c, 3) + conv(c, c, 3); }

std::size_t expected_scalars(const ModelConfig& m) {
    const std::size_t C = m.width, g = m.groups, total = C * 15, deepest = 8 * C;
    std::size_t n = conv(C, 3, 3);
    for (std::size_t l = 0; l < 4; ++l) {
        const std::size_t c = C << l;
        if (l > 0) n += conv(c, c / 2, 3) + sfe_count(c) + conv(c, 2 * c, 3);
        n += m.enc_blocks[l] * msfs_count(c, g);
        n += m.dec_blocks[l] * msfs_count(c, g);
        if (l < 3) n += conv(4 * c, 2 * c, 1);
        n += conv(c, total, 1) + conv(c, deepest, 1) + conv(2 * c, c, 1) + 2 * conv(c, c, 1) + conv(c, 2 * c, 1);
        n += conv(3, c, 3);
    }
    return n + m.middle_blocks * msfs_count(deepest, g);
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
    return true;
}

} // namespace

TEST(ModelConfig, DefaultsAndValidation) {
    ModelConfig d;
    EXPECT_EQ(d.width, 32u);
    EXPECT_EQ(d.enc_blocks, (std::array<std::size_t, 4>{1, 1, 1, 28}));
    EXPECT_EQ(d.dec_blocks, (std::array<std::size_t, 4>{1, 1, 1, 1}));
    EXPECT_EQ(d.groups, 8u);
    EXPECT_NO_THROW(d.validate());
    auto bad = d;
    bad.width = 12;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = d;
    bad.enc_blocks[2] = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = d;
    bad.groups = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ModelConfig, KeyValueRoundTrip) {
    auto c = tiny(16, 2);
    c.use_sff = false;
    c.max_tokens = 99;
    ModelConfig back;
    for (const auto& [k, v] : to_key_values(c)) set_model_key(back, k, v);
    EXPECT_EQ(back, c);
    EXPECT_THROW(set_model_key(back, "widht", "8"), ConfigError);
    EXPECT_THROW(set_model_key(back, "width", "-3"), ConfigError);
    EXPECT_THROW(set_model_key(back, "enc_blocks", "1,2,3"), ConfigError);
    EXPECT_THROW(set_model_key(back, "use_dfs", "maybe"), ConfigError);
}

TEST(Model, ParameterCountMatchesHandSum) {
    for (auto cfg : {tiny(8, 4), tiny(4, 2), tiny(16, 8)}) {
        auto m = Model<float>::build(cfg, 1);
        EXPECT_EQ(m.parameters().scalar_count(), expected_scalars(cfg)) << "width " << cfg.width;
    }
}

TEST(Model, BothDefaultWidthsBuild) {
    ModelConfig narrow;
    ModelConfig wide;
    wide.width = 64;
    std::size_t n32 = 0, n64 = 0, e32 = 0;
    {
        auto m = Model<float>::build(narrow, 1);
        n32 = m.parameters().scalar_count();
        e32 = m.parameters().size();
    }
    EXPECT_EQ(n32, expected_scalars(narrow));
    {
        auto m = Model<float>::build(wide, 1);
        n64 = m.parameters().scalar_count();
        EXPECT_EQ(m.parameters().size(), e32);
    }
    EXPECT_EQ(n64, expected_scalars(wide));
    EXPECT_GT(n64, n32);
}

TEST(Model, PathsAreUniqueAndStablyOrdered) {
    auto a = Model<float>::build(tiny(), 3), b = Model<float>::build(tiny(), 4);
    ASSERT_EQ(a.parameters().size(), b.parameters().size());
    std::set<std::string> seen;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        const auto& [pa, va] = a.parameters().entries()[i];
        EXPECT_EQ(pa, b.parameters().entries()[i].first);
        EXPECT_TRUE(seen.insert(pa).second) << pa;
    }
    EXPECT_TRUE(seen.count("shallow.weight"));
    EXPECT_TRUE(seen.count("enc4.block1.dfs5.fcam.lambda_high"));
    EXPECT_TRUE(seen.count("dec1.sff.mask_mid.bias"));
}

TEST(Model, SameSeedSameWeightsAndOutputs) {
    auto a = Model<float>::build(tiny(), 7), b = Model<float>::build(tiny(), 7), c = Model<float>::build(tiny(), 8);
    bool differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        const auto& va = a.parameters().entries()[i].second.value();
        EXPECT_TRUE(bit_equal(va, b.parameters().entries()[i].second.value()));
        differs = differs || !bit_equal(va, c.parameters().entries()[i].second.value());
    }
    EXPECT_TRUE(differs);
    auto img = random_tensor<float>({24, 16, 3}, 9, 0, 1);
    auto ra = a.forward(img), rb = b.forward(img);
    for (std::size_t l = 0; l < 4; ++l) EXPECT_TRUE(bit_equal(ra.restored[l], rb.restored[l]));
}

TEST(Model, OutputGeometry) {
    auto m = Model<float>::build(tiny(), 1);
    struct Case {
        std::size_t h, w, ph, pw;
    };
    for (auto c : {Case{64, 64, 64, 64}, Case{70, 70, 72, 72}, Case{65, 64, 72, 64}, Case{16, 129, 16, 136}}) {
        auto out = m.forward(random_tensor<float>({c.h, c.w, 3}, c.h + c.w, 0, 1));
        EXPECT_EQ(out.restored[0].shape(), (Shape{c.h, c.w, 3}));
        for (std::size_t l = 1; l < 4; ++l) EXPECT_EQ(out.restored[l].shape(), (Shape{c.ph >> l, c.pw >> l, 3}));
        for (const auto& r : out.restored)
            for (float v : r.values()) ASSERT_TRUE(std::isfinite(v));
    }
}

TEST(Model, ZeroHeadsReproduceInputPyramid) {
    auto m = Model<float>::build(tiny(), 2);
    m.zero_heads();
    auto img = random_tensor<float>({21, 30, 3}, 3, 0, 1);
    auto out = m.forward(img);
    EXPECT_EQ(out.restored[0], img);
    auto pyr = input_pyramid(pad_reflect_to_multiple(img, 8).image, 4);
    for (std::size_t l = 1; l < 4; ++l) EXPECT_EQ(out.restored[l], pyr[l]);
}

TEST(Model, InputErrors) {
    auto m = Model<float>::build(tiny(), 1);
    EXPECT_THROW(m.forward(Tensor<float>::feature_map(7, 16, 3)), InvalidInputError);
    EXPECT_THROW(m.forward(Tensor<float>::feature_map(16, 5, 3)), InvalidInputError);
    EXPECT_THROW(m.forward(Tensor<float>::feature_map(16, 16, 4)), InvalidInputError);
    std::array<Tensor<float>, 4> uneven{Tensor<float>::feature_map(16, 16, 3), Tensor<float>::feature_map(8, 8, 3),
                                        Tensor<float>::feature_map(3, 4, 3), Tensor<float>::feature_map(2, 2, 3)};
    EXPECT_THROW(m.forward_scales(uneven), GeometryError);
}

TEST(Model, WithoutFusionStillRestoresGeometry) {
    auto cfg = tiny();
    cfg.use_sff = false;
    cfg.use_dfs = false;
    auto m = Model<float>::build(cfg, 1);
    EXPECT_LT(m.parameters().scalar_count(), expected_scalars(tiny()));
    EXPECT_EQ(m.forward(random_tensor<float>({40, 24, 3}, 1, 0, 1)).restored[0].shape(), (Shape{40, 24, 3}));
}

TEST(PadCrop, ReflectPadThenCropIsIdentity) {
    auto img = random_tensor<float>({65, 70, 3}, 4);
    auto p = pad_reflect_to_multiple(img, 8);
    EXPECT_EQ(p.image.shape(), (Shape{72, 72, 3}));
    EXPECT_EQ(crop_to(p.image, p.crop), img);
    // Row 65 mirrors row 63, column 70 mirrors column 68.
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(p.image.at(65, 10, c), img.at(63, 10, c));
        EXPECT_EQ(p.image.at(10, 70, c), img.at(10, 68, c));
    }
    auto exact = pad_reflect_to_multiple(random_tensor<float>({16, 8, 3}, 5), 8);
    EXPECT_EQ(exact.image.shape(), (Shape{16, 8, 3}));
}

TEST(Pyramid, AreaAveragingOfConstantsAndCheckerboard) {
    auto flat = Tensor<double>::feature_map(16, 16, 3, 0.25);
    for (const auto& lvl : input_pyramid(flat, 4))
        for (double v : lvl.values()) EXPECT_EQ(v, 0.25);
    auto cb = Tensor<double>::feature_map(16, 16, 1);
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) cb.at(y, x, 0) = (x + y) % 2;
    auto pyr = input_pyramid(cb, 4);
    EXPECT_EQ(pyr[3].shape(), (Shape{2, 2, 1}));
    for (std::size_t l = 1; l < 4; ++l)
        for (double v : pyr[l].values()) EXPECT_EQ(v, 0.5);
}

TEST(Model, ConvertModelCopiesWeights) {
    auto f = Model<float>::build(tiny(), 11);
    auto d = convert_model<double>(f);
    auto img = random_tensor<float>({16, 16, 3}, 12, 0, 1);
    auto of = f.forward(img).restored[0];
    auto od = d.forward(img.cast<double>()).restored[0];
    EXPECT_LE(max_abs_diff(of.cast<double>(), od), 1e-4);
}

TEST(Model, GradientsMatchFiniteDifferences) {
    auto cfg = tiny(4, 2);
    auto m = Model<double>::build(cfg, 21);
    msfs::test::perturb(m.parameters(), 22);
    auto img = random_tensor<double>({16, 16, 3}, 23, 0, 1);
    auto pyr = input_pyramid(img, 4);
    std::array<Tensor<double>, 4> in, tgt;
    for (std::size_t l = 0; l < 4; ++l) {
        in[l] = pyr[l];
        tgt[l] = random_tensor<double>(pyr[l].shape(), 30 + l, 0, 1);
    }
    auto targets = constant_scales(tgt);
    auto res = msfs::test::gradcheck([&] { return total_loss(m.forward_scales(in), targets).total; },
                                     m.parameters().entries(), 60, 24);
    EXPECT_EQ(res.checked, 60u);
    EXPECT_LE(res.max_rel_error, 2e-3) << res.worst;
}
