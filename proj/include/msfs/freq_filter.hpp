#pragma once

// Dynamic low-pass decomposition. A feature map is summarized by global
// average pooling, projected to g*k*k logits, layer-normalized, and turned
// into g softmax-normalized k x k kernels. Each kernel smooths one contiguous
// block of C/g channels; the residual is the high-frequency part.

#include <atomic>
#include <string>
#include <utility>

#include "msfs/image.hpp"
#include "msfs/ops.hpp"
#include "msfs/params.hpp"

namespace msfs {

struct DFSConfig {
    std::size_t groups = 8;
    std::size_t kernel_size = 3;
    std::size_t channels = 32;

    std::size_t taps() const { return kernel_size * kernel_size; }
    std::size_t group_of(std::size_t c) const { return c * groups / channels; }

    void validate() const {
        if (groups == 0 || channels == 0) throw ConfigError("DFS: groups and channels must be positive");
        if (channels % groups != 0)
            throw ConfigError("DFS: channels " + std::to_string(channels) + " not divisible by groups " +
                              std::to_string(groups));
        if (kernel_size % 2 == 0) throw ConfigError("DFS: kernel size must be odd");
    }
};

/// g x k x k low-pass kernels, entries >= 0, each kernel summing to one.
template <typename T>
using FilterBank = Tensor<T>;

template <typename T>
bool is_normalized_filter_bank(const FilterBank<T>& bank, double tol = 1e-6) {
    if (bank.rank() != 3 || bank.dim(1) != bank.dim(2)) return false;
    const std::size_t taps = bank.dim(1) * bank.dim(2);
    for (std::size_t g = 0; g < bank.dim(0); ++g) {
        double s = 0;
        for (std::size_t t = 0; t < taps; ++t) {
            const double v = bank[g * taps + t];
            if (!(v >= 0.0) || v > 1.0) return false;
            s += v;
        }
        if (std::abs(s - 1.0) > tol) return false;
    }
    return true;
}

template <typename T>
struct DFSParams {
    ConvParams<T> squeeze;      // C -> g*k*k, applied to the pooled descriptor
    LayerNormParams<T> norm;    // over the g*k*k logits

    static DFSParams create(ParamBuilder<T> b, const DFSConfig& cfg) {
        cfg.validate();
        const std::size_t n = cfg.groups * cfg.taps();
        return {b.conv("squeeze", n, cfg.channels, 1), b.norm("norm", n)};
    }
};

namespace testing {
/// Test hook: when set, generated kernels are scaled away from unit sum.
inline std::atomic<bool>& break_kernel_normalization() {
    static std::atomic<bool> flag{false};
    return flag;
}
} // namespace testing

/// Kernel size k needs k <= 2n + 1 on every axis of extent n > 1.
inline void check_lowpass_geometry(std::size_t h, std::size_t w, std::size_t k) {
    for (std::size_t n : {h, w})
        if (n > 1 && k > 2 * n + 1)
            throw GeometryError("low-pass kernel " + std::to_string(k) + " too large for a " + std::to_string(h) +
                                "x" + std::to_string(w) + " map");
}

template <typename T>
Var<T> generate_lowpass_filters(const Var<T>& f, const DFSConfig& cfg, const DFSParams<T>& params) {
    require_feature_map(f.shape(), "generate_lowpass_filters");
    cfg.validate();
    if (f.value().channels() != cfg.channels)
        throw ConfigError("DFS: feature map has " + std::to_string(f.value().channels()) + " channels, config expects " +
                          std::to_string(cfg.channels));
    auto logits = params.norm(params.squeeze(global_avg_pool(f)));
    auto bank = reshape(softmax_groups(logits, cfg.taps()), {cfg.groups, cfg.kernel_size, cfg.kernel_size});
    if (testing::break_kernel_normalization()) bank = scale(bank, T(1.01));
    return bank;
}

/// Low-pass filtering via a reflect-padded copy: every output pixel is the
/// weighted sum of its k x k neighbourhood with per-channel tap weights
/// expanded from the channel's group kernel.
template <typename T>
Var<T> apply_lowpass(const Var<T>& f, const Var<T>& bank, const DFSConfig& cfg) {
    require_feature_map(f.shape(), "apply_lowpass");
    cfg.validate();
    const std::size_t H = f.value().height(), W = f.value().width(), C = f.value().channels();
    const std::size_t k = cfg.kernel_size, taps = cfg.taps(), r = k / 2;
    if (C != cfg.channels) throw ConfigError("apply_lowpass: channel count does not match config");
    if (bank.shape() != Shape{cfg.groups, k, k})
        throw ConfigError("apply_lowpass: filter bank shape " + shape_string(bank.shape()) + " does not match config");
    check_lowpass_geometry(H, W, k);

    const std::size_t Hp = H + 2 * r, Wp = W + 2 * r;
    Tensor<T> padded = Tensor<T>::feature_map(Hp, Wp, C);
    for (std::size_t y = 0; y < Hp; ++y)
        for (std::size_t x = 0; x < Wp; ++x) {
            const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(r), H);
            const std::size_t sx = reflect_index(static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(r), W);
            std::copy_n(f.value().pixel(sy, sx), C, padded.pixel(y, x));
        }

    std::vector<T> wc(taps * C);
    for (std::size_t t = 0; t < taps; ++t)
        for (std::size_t c = 0; c < C; ++c) wc[t * C + c] = bank.value()[cfg.group_of(c) * taps + t];

    Tensor<T> out = Tensor<T>::feature_map(H, W, C);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
            T* op = out.pixel(h, w);
            for (std::size_t dy = 0; dy < k; ++dy)
                for (std::size_t dx = 0; dx < k; ++dx) {
                    const T* ip = padded.pixel(h + dy, w + dx);
                    const T* wp = wc.data() + (dy * k + dx) * C;
                    for (std::size_t c = 0; c < C; ++c) op[c] += wp[c] * ip[c];
                }
        }

    return make_op<T>(std::move(out), {f, bank},
                      [padded = std::move(padded), wc = std::move(wc), cfg, H, W, C, k, r, Hp, Wp](Node<T>& n) {
        const std::size_t taps = k * k;
        if (detail::wants(n, 0)) {
            Tensor<T> dpad = Tensor<T>::feature_map(Hp, Wp, C);
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    const T* g = n.grad.pixel(h, w);
                    for (std::size_t dy = 0; dy < k; ++dy)
                        for (std::size_t dx = 0; dx < k; ++dx) {
                            T* dp = dpad.pixel(h + dy, w + dx);
                            const T* wp = wc.data() + (dy * k + dx) * C;
                            for (std::size_t c = 0; c < C; ++c) dp[c] += wp[c] * g[c];
                        }
                }
            auto& df = detail::grad_of(n, 0);
            for (std::size_t y = 0; y < Hp; ++y)
                for (std::size_t x = 0; x < Wp; ++x) {
                    const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(r), H);
                    const std::size_t sx = reflect_index(static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(r), W);
                    T* d = df.pixel(sy, sx);
                    const T* s = dpad.pixel(y, x);
                    for (std::size_t c = 0; c < C; ++c) d[c] += s[c];
                }
        }
        if (detail::wants(n, 1)) {
            std::vector<T> dwc(taps * C, T(0));
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    const T* g = n.grad.pixel(h, w);
                    for (std::size_t t = 0; t < taps; ++t) {
                        const T* ip = padded.pixel(h + t / k, w + t % k);
                        T* dw = dwc.data() + t * C;
                        for (std::size_t c = 0; c < C; ++c) dw[c] += g[c] * ip[c];
                    }
                }
            auto& db = detail::grad_of(n, 1);
            for (std::size_t t = 0; t < taps; ++t)
                for (std::size_t c = 0; c < C; ++c) db[cfg.group_of(c) * taps + t] += dwc[t * C + c];
        }
    });
}

/// Reference low-pass: one explicit loop per output sample and kernel tap,
/// with its own boundary folding. Used to cross-check apply_lowpass.
template <typename T>
Tensor<T> apply_lowpass_naive(const Tensor<T>& f, const FilterBank<T>& bank, const DFSConfig& cfg) {
    require_feature_map(f.shape(), "apply_lowpass_naive");
    cfg.validate();
    const std::size_t H = f.height(), W = f.width(), C = f.channels(), k = cfg.kernel_size;
    if (C != cfg.channels) throw ConfigError("apply_lowpass_naive: channel count does not match config");
    if (bank.shape() != Shape{cfg.groups, k, k}) throw ConfigError("apply_lowpass_naive: filter bank shape mismatch");
    check_lowpass_geometry(H, W, k);

    auto mirror = [](long i, long n) {
        if (n == 1) return 0L;
        while (i < 0 || i >= n) {
            if (i < 0) i = -i;
            if (i >= n) i = 2 * (n - 1) - i;
        }
        return i;
    };
    const long rad = static_cast<long>(k / 2);
    Tensor<T> out = Tensor<T>::feature_map(H, W, C);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t g = c * cfg.groups / C;
                double acc = 0;
                for (long i = -rad; i <= rad; ++i)
                    for (long j = -rad; j <= rad; ++j) {
                        const long y = mirror(static_cast<long>(h) + i, static_cast<long>(H));
                        const long x = mirror(static_cast<long>(w) + j, static_cast<long>(W));
                        const double wgt = bank[(g * k + static_cast<std::size_t>(i + rad)) * k + static_cast<std::size_t>(j + rad)];
                        acc += wgt * static_cast<double>(f.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c));
                    }
                out.at(h, w, c) = static_cast<T>(acc);
            }
    return out;
}

template <typename T>
struct Decomposition {
    Var<T> low;
    Var<T> high;
};

/// X_L = low-pass(F) with content-generated kernels; X_H = F - X_L.
template <typename T>
Decomposition<T> decompose(const Var<T>& f, const DFSConfig& cfg, const DFSParams<T>& params) {
    auto bank = generate_lowpass_filters(f, cfg, params);
    auto low = apply_lowpass(f, bank, cfg);
    return {low, sub(f, low)};
}

} // namespace msfs
