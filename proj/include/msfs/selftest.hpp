#pragma once

#include <chrono>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "msfs/blocks.hpp"
#include "msfs/freq_filter.hpp"
#include "msfs/gradcheck.hpp"
#include "msfs/losses.hpp"
#include "msfs/metrics.hpp"
#include "msfs/network.hpp"
#include "msfs/skip_fusion.hpp"
#include "msfs/train.hpp"

namespace msfs {

struct SelfTestRow {
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0;
};

struct SelfTestReport {
    std::vector<SelfTestRow> rows;
    bool all_pass() const {
        for (const auto& r : rows)
            if (!r.pass) return false;
        return true;
    }
};

namespace selftest {

struct Outcome {
    bool pass;
    std::string detail;
};

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

// The decomposition corpus: 100 maps up to 16x16x8 with g in {1,2,4,8}, k in {3,5}.
struct DfsCase {
    DFSConfig cfg;
    Tensor<float> f;
    DFSParams<float> params;
};

inline std::vector<DfsCase> dfs_corpus(std::size_t n = 100) {
    std::vector<DfsCase> out;
    std::mt19937_64 rng(2024);
    const std::size_t gs[] = {1, 2, 4, 8};
    for (std::size_t i = 0; i < n; ++i) {
        DFSConfig cfg{gs[i % 4], (i / 4) % 2 ? 5u : 3u, 8};
        const std::size_t h = 3 + rng() % 14, w = 3 + rng() % 14;
        ParameterStore<float> store;
        ParamBuilder<float> b(store, rng);
        auto p = DFSParams<float>::create(b, cfg);
        check::perturb(store, rng());
        check::randomize(p.norm.gamma, rng, 0.5, 3.0);
        out.push_back({cfg, check::random_tensor<float>({h, w, 8}, rng(), -2, 2), p});
    }
    return out;
}

inline Outcome decomposition_identity() {
    double worst = 0;
    for (const auto& c : dfs_corpus()) {
        auto f = Var<float>::constant(c.f);
        auto d = decompose(f, c.cfg, c.params);
        for (std::size_t i = 0; i < c.f.size(); ++i)
            worst = std::max(worst, std::abs(double(d.low.value()[i]) + double(d.high.value()[i]) - double(c.f[i])));
    }
    return {worst <= 1e-6, "max |X_L + X_H - F| = " + num(worst)};
}

inline Outcome kernel_normalization() {
    std::size_t bad = 0;
    for (const auto& c : dfs_corpus())
        if (!is_normalized_filter_bank(generate_lowpass_filters(Var<float>::constant(c.f), c.cfg, c.params).value())) ++bad;
    return {bad == 0, std::to_string(bad) + " of 100 banks not non-negative with unit sums"};
}

inline Outcome unfold_vs_naive() {
    double worst = 0;
    for (const auto& c : dfs_corpus()) {
        auto f = Var<float>::constant(c.f);
        auto bank = generate_lowpass_filters(f, c.cfg, c.params);
        auto fast = apply_lowpass(f, bank, c.cfg).value();
        worst = std::max(worst, double(max_abs_diff(fast, apply_lowpass_naive(c.f, bank.value(), c.cfg))));
    }
    return {worst <= 1e-5, "max abs diff " + num(worst)};
}

inline Outcome attention_rows() {
    double worst = 0;
    bool nonneg = true;
    for (std::size_t s = 0; s < 10; ++s) {
        auto q = check::random_tensor<float>({4, 4, 8}, 10 + s, -3, 3), k = check::random_tensor<float>({4, 4, 8}, 20 + s, -3, 3);
        auto p = attention_weights(q, k, 0.5f + float(s));
        for (std::size_t i = 0; i < 16; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < 16; ++j) {
                nonneg = nonneg && p[i * 16 + j] >= 0;
                sum += p[i * 16 + j];
            }
            worst = std::max(worst, std::abs(sum - 1));
        }
    }
    return {nonneg && worst <= 1e-6, "max |row sum - 1| = " + num(worst)};
}

inline Outcome attention_single_token() {
    auto q = Var<float>::constant(check::random_tensor<float>({1, 1, 6}, 1));
    auto k = Var<float>::constant(check::random_tensor<float>({1, 1, 6}, 2));
    auto v = check::random_tensor<float>({1, 1, 6}, 3);
    auto out = scaled_dot_attention(q, k, Var<float>::constant(v), Var<float>::constant(Tensor<float>::scalar(2.f))).value();
    return {out == v, out == v ? "N=1 returns V" : "N=1 output differs from V"};
}

inline Outcome zero_init_identities() {
    std::mt19937_64 rng(5);
    ParameterStore<float> store;
    ParamBuilder<float> b(store, rng);
    auto fc = FCAMParams<float>::create(b.scope("fcam"), 8);
    auto blk = MSFSParams<float>::create(b.scope("block"), 8, BlockOptions{2});
    auto x = Var<float>::constant(check::random_tensor<float>({6, 6, 8}, 6));
    auto y = Var<float>::constant(check::random_tensor<float>({6, 6, 8}, 7));
    bool ok = true;
    for (float v : fcam(x, y, fc).value().values()) ok = ok && v == 0.f;
    if (!ok) return {false, "fcam with zero scales is not exactly 0"};
    if (!(msfs_block(x, blk).value() == naf_block(x, blk.naf).value())) return {false, "initial MSFS block differs from NAFBlock"};
    ModelConfig cfg;
    cfg.width = 8;
    cfg.enc_blocks = {1, 1, 1, 1};
    cfg.groups = 2;
    auto m = Model<float>::build(cfg, 3);
    m.zero_heads();
    auto img = check::random_tensor<float>({20, 27, 3}, 8, 0, 1);
    auto out = m.forward(img);
    auto pyr = input_pyramid(pad_reflect_to_multiple(img, kPadMultiple).image, kScales);
    if (!(out.restored[0] == img)) return {false, "zero heads: full-resolution output differs from input"};
    for (std::size_t l = 1; l < kScales; ++l)
        if (!(out.restored[l] == pyr[l])) return {false, "zero heads: scale " + std::to_string(l) + " differs"};
    return {true, "fcam = 0, MSFS = NAFBlock, zero heads reproduce the pyramid"};
}

inline Outcome from_gradcheck(const check::GradCheckResult& r, double tol) {
    return {r.max_rel_error <= tol, std::to_string(r.checked) + " entries, max rel err " + num(r.max_rel_error) +
                                        (r.max_rel_error > tol ? " at " + r.worst : "")};
}

template <typename P, typename... Args>
P make_double(ParameterStore<double>& store, std::uint64_t seed, Args&&... args) {
    std::mt19937_64 rng(seed);
    ParamBuilder<double> b(store, rng);
    auto p = P::create(b, std::forward<Args>(args)...);
    check::perturb(store, seed + 1);
    return p;
}

inline Outcome gradient_dfs() {
    ParameterStore<double> store;
    DFSConfig cfg{2, 3, 4};
    auto p = make_double<DFSParams<double>>(store, 11, cfg);
    auto x = Var<double>::leaf(check::random_tensor<double>({5, 4, 4}, 12));
    auto w = check::random_tensor<double>({5, 4, 4}, 13);
    auto vars = store.entries();
    vars.emplace_back("input", x);
    return from_gradcheck(check::gradcheck([&] { return weighted_sum(decompose(x, cfg, p).low, w); }, vars), 2e-3);
}

inline Outcome gradient_fcam() {
    ParameterStore<double> store;
    auto p = make_double<FCAMParams<double>>(store, 21, 4);
    auto lo = Var<double>::leaf(check::random_tensor<double>({3, 3, 4}, 22));
    auto hi = Var<double>::leaf(check::random_tensor<double>({3, 3, 4}, 23));
    auto w = check::random_tensor<double>({3, 3, 4}, 24);
    auto vars = store.entries();
    vars.emplace_back("low", lo);
    vars.emplace_back("high", hi);
    return from_gradcheck(check::gradcheck([&] { return weighted_sum(fcam(lo, hi, p), w); }, vars), 2e-3);
}

inline Outcome gradient_naf() {
    ParameterStore<double> store;
    auto p = make_double<NAFBlockParams<double>>(store, 31, 4);
    auto x = Var<double>::leaf(check::random_tensor<double>({4, 4, 4}, 32));
    auto w = check::random_tensor<double>({4, 4, 4}, 33);
    auto vars = store.entries();
    vars.emplace_back("input", x);
    return from_gradcheck(check::gradcheck([&] { return weighted_sum(naf_block(x, p), w); }, vars), 2e-3);
}

inline Outcome gradient_sff() {
    ParameterStore<double> store;
    auto p = make_double<SFFParams<double>>(store, 41, 2, 30, 16);
    std::array<Var<double>, kScales> enc;
    auto vars = store.entries();
    for (std::size_t l = 0; l < kScales; ++l) {
        const std::size_t s = std::max<std::size_t>(4 >> l, 1);
        enc[l] = Var<double>::leaf(check::random_tensor<double>({s, s, 2u << l}, 42 + l));
        vars.emplace_back("enc" + std::to_string(l), enc[l]);
    }
    auto mid = Var<double>::leaf(check::random_tensor<double>({4, 4, 2}, 50));
    auto dec = Var<double>::leaf(check::random_tensor<double>({4, 4, 2}, 51));
    vars.emplace_back("middle", mid);
    vars.emplace_back("decoder", dec);
    auto w = check::random_tensor<double>({4, 4, 2}, 52);
    return from_gradcheck(check::gradcheck([&] { return weighted_sum(sff_fuse_into_decoder(sff_level(enc, mid, 1, p), dec, p.fuse), w); }, vars), 2e-3);
}

inline Outcome gradient_model() {
    ModelConfig cfg;
    cfg.width = 4;
    cfg.enc_blocks = {1, 1, 1, 2};
    cfg.groups = 2;
    auto m = Model<double>::build(cfg, 61);
    check::perturb(m.parameters(), 62);
    auto pyr = input_pyramid(check::random_tensor<double>({16, 16, 3}, 63, 0, 1), kScales);
    std::array<Tensor<double>, kScales> in, tgt;
    for (std::size_t l = 0; l < kScales; ++l) {
        in[l] = pyr[l];
        tgt[l] = check::random_tensor<double>(pyr[l].shape(), 70 + l, 0, 1);
    }
    auto targets = constant_scales(tgt);
    return from_gradcheck(check::gradcheck([&] { return total_loss(m.forward_scales(in), targets).total; },
                                           m.parameters().entries(), 60, 64),
                          2e-3);
}

inline Outcome loss_contract() {
    std::array<Tensor<double>, kScales> a, b;
    for (std::size_t l = 0; l < kScales; ++l) {
        a[l] = check::random_tensor<double>({16u >> l, 16u >> l, 3}, 80 + l, 0, 1);
        b[l] = a[l];
        for (auto& v : b[l].values()) v += 0.25;
    }
    const double zero = total_loss(constant_scales(a), constant_scales(a)).total.value()[0];
    auto t = total_loss(constant_scales(b), constant_scales(a));
    const double s = t.spatial.value()[0], f = t.frequency.value()[0];
    const bool ok = zero == 0.0 && LossConfig{}.lambda_freq == 0.1 && std::abs(s - 0.25) <= 1e-12 && std::abs(f - 0.25) <= 1e-12;
    return {ok, "identical 0, offset 0.25 -> spatial " + num(s) + ", frequency " + num(f)};
}

inline Outcome schedule_endpoints() {
    TrainConfig c;
    c.total_steps = 1000;
    const bool ok = cosine_lr(0, c) == 2e-4 && cosine_lr(1000, c) == 1e-7;
    return {ok, "lr(0) = " + num(cosine_lr(0, c)) + ", lr(T) = " + num(cosine_lr(1000, c))};
}

inline Outcome metric_sanity() {
    auto a = Tensor<double>::feature_map(16, 16, 3, 0.5), b = a;
    for (auto& v : b.values()) v += 0.1;
    const double p = psnr(a, b), s = ssim(a, a);
    auto px = Tensor<double>::feature_map(1, 2, 3);
    for (std::size_t c = 0; c < 3; ++c) px.at(0, 1, c) = 1.0;
    auto y = rgb_to_y(px);
    const bool ok = std::abs(p - 20.0) <= 1e-9 && std::abs(s - 1.0) <= 1e-12 && std::abs(y[0] - 16.0 / 255) <= 1e-12 &&
                    std::abs(y[1] - 235.0 / 255) <= 1e-12;
    return {ok, "psnr " + num(p) + " dB, ssim(a,a) " + num(s)};
}

} // namespace selftest

/// Runs every property check and prints one line per check.
inline SelfTestReport run_selftest(std::ostream& os) {
    using Check = std::pair<const char*, std::function<selftest::Outcome()>>;
    const std::vector<Check> checks = {
        {"decomposition identity", selftest::decomposition_identity},
        {"kernel normalization", selftest::kernel_normalization},
        {"unfold vs naive low-pass", selftest::unfold_vs_naive},
        {"attention row sums", selftest::attention_rows},
        {"attention single token", selftest::attention_single_token},
        {"zero-init identities", selftest::zero_init_identities},
        {"gradient check: DFS", selftest::gradient_dfs},
        {"gradient check: FCAM", selftest::gradient_fcam},
        {"gradient check: NAFBlock", selftest::gradient_naf},
        {"gradient check: SFF", selftest::gradient_sff},
        {"gradient check: tiny model", selftest::gradient_model},
        {"loss contract", selftest::loss_contract},
        {"schedule endpoints", selftest::schedule_endpoints},
        {"metric sanity", selftest::metric_sanity},
    };
    SelfTestReport rep;
    for (const auto& [name, fn] : checks) {
        const auto t0 = std::chrono::steady_clock::now();
        SelfTestRow row{name, false, {}, 0};
        try {
            auto o = fn();
            row.pass = o.pass;
            row.detail = o.detail;
        } catch (const std::exception& e) {
            row.detail = std::string("threw: ") + e.what();
        }
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[64];
        std::snprintf(buf, sizeof buf, "%-4s  %-28s %7.2fs  ", row.pass ? "PASS" : "FAIL", name, row.seconds);
        os << buf << row.detail << "\n" << std::flush;
        rep.rows.push_back(std::move(row));
    }
    std::size_t failed = 0;
    for (const auto& r : rep.rows) failed += !r.pass;
    os << (failed ? std::to_string(failed) + " of " + std::to_string(rep.rows.size()) + " checks failed:" : "all " + std::to_string(rep.rows.size()) + " checks passed");
    for (const auto& r : rep.rows)
        if (!r.pass) os << " [" << r.name << "]";
    os << "\n";
    return rep;
}

} // namespace msfs
