#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "msfs/ops.hpp"
#include "msfs/skip_fusion.hpp"

namespace msfs {

struct LossConfig {
    double lambda_freq = 0.1;

    void validate() const {
        if (!(lambda_freq >= 0.0)) throw ConfigError("loss.lambda_freq must be >= 0");
    }
};

template <typename T>
using ScaleOutputs = std::array<Var<T>, kScales>;

namespace detail {

// cos/sin of 2*pi*j/n for j in [0, n).
struct Twiddles {
    std::vector<double> cos, sin;
    explicit Twiddles(std::size_t n) : cos(n), sin(n) {
        for (std::size_t j = 0; j < n; ++j) {
            const double a = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
            cos[j] = std::cos(a);
            sin[j] = std::sin(a);
        }
    }
};

} // namespace detail

/// Mean over all H*W*C frequency bins of |Re| + |Im| of the per-channel 2-D
/// DFT of (a - b). Evaluated as a separable direct transform, so any size works.
template <typename T>
Var<T> dft_l1_mean(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "frequency_l1");
    require_feature_map(a.shape(), "frequency_l1");
    const std::size_t H = a.value().height(), W = a.value().width(), C = a.value().channels();
    const detail::Twiddles th(H), tw(W);
    const std::size_t N = H * W * C;

    // Spectrum sign pattern, needed for the backward pass.
    std::vector<double> sr(N), si(N);
    std::vector<double> rr(H * W), ri(H * W);
    double total = 0;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t l = 0; l < W; ++l) {
                double re = 0, im = 0;
                for (std::size_t w = 0; w < W; ++w) {
                    const std::size_t idx = (h * W + w) * C + c;
                    const double d = static_cast<double>(a.value()[idx]) - static_cast<double>(b.value()[idx]);
                    const std::size_t j = (l * w) % W;
                    re += d * tw.cos[j];
                    im -= d * tw.sin[j];
                }
                rr[h * W + l] = re;
                ri[h * W + l] = im;
            }
        for (std::size_t k = 0; k < H; ++k)
            for (std::size_t l = 0; l < W; ++l) {
                double re = 0, im = 0;
                for (std::size_t h = 0; h < H; ++h) {
                    const std::size_t j = (k * h) % H;
                    re += rr[h * W + l] * th.cos[j] + ri[h * W + l] * th.sin[j];
                    im += ri[h * W + l] * th.cos[j] - rr[h * W + l] * th.sin[j];
                }
                total += std::abs(re) + std::abs(im);
                const std::size_t o = (k * W + l) * C + c;
                sr[o] = re > 0 ? 1.0 : (re < 0 ? -1.0 : 0.0);
                si[o] = im > 0 ? 1.0 : (im < 0 ? -1.0 : 0.0);
            }
    }
    const double inv = 1.0 / static_cast<double>(N);
    return make_op<T>(Tensor<T>::scalar(static_cast<T>(total * inv)), {a, b},
                      [sr = std::move(sr), si = std::move(si), H, W, C, inv](Node<T>& n) {
        // d loss / d diff = Re(inverse DFT of (sr + i si)) / N, unnormalized.
        const detail::Twiddles th(H), tw(W);
        const double scale = static_cast<double>(n.grad[0]) * inv;
        std::vector<double> yr(H * W), yi(H * W);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t m = 0; m < H; ++m)
                for (std::size_t l = 0; l < W; ++l) {
                    double re = 0, im = 0;
                    for (std::size_t k = 0; k < H; ++k) {
                        const std::size_t j = (k * m) % H;
                        const std::size_t o = (k * W + l) * C + c;
                        re += sr[o] * th.cos[j] - si[o] * th.sin[j];
                        im += si[o] * th.cos[j] + sr[o] * th.sin[j];
                    }
                    yr[m * W + l] = re;
                    yi[m * W + l] = im;
                }
            for (std::size_t m = 0; m < H; ++m)
                for (std::size_t w = 0; w < W; ++w) {
                    double re = 0;
                    for (std::size_t l = 0; l < W; ++l) {
                        const std::size_t j = (l * w) % W;
                        re += yr[m * W + l] * tw.cos[j] - yi[m * W + l] * tw.sin[j];
                    }
                    const T g = static_cast<T>(re * scale);
                    const std::size_t idx = (m * W + w) * C + c;
                    if (detail::wants(n, 0)) n.parent(0).grad[idx] += g;
                    if (detail::wants(n, 1)) n.parent(1).grad[idx] -= g;
                }
        }
    });
}

template <typename T>
void check_scale_shapes(const ScaleOutputs<T>& preds, const ScaleOutputs<T>& targets) {
    for (std::size_t i = 0; i < kScales; ++i)
        if (preds[i].shape() != targets[i].shape())
            throw InvalidInputError("loss: scale " + std::to_string(i) + " shape mismatch " +
                                    shape_string(preds[i].shape()) + " vs " + shape_string(targets[i].shape()));
}

/// Per-scale mean absolute error, averaged over the four scales.
template <typename T>
Var<T> spatial_l1(const ScaleOutputs<T>& preds, const ScaleOutputs<T>& targets) {
    check_scale_shapes(preds, targets);
    Var<T> acc = l1_mean(preds[0], targets[0]);
    for (std::size_t i = 1; i < kScales; ++i) acc = add(acc, l1_mean(preds[i], targets[i]));
    return scale(acc, T(1) / T(kScales));
}

/// Per-scale mean spectral L1, averaged over the four scales.
template <typename T>
Var<T> frequency_l1(const ScaleOutputs<T>& preds, const ScaleOutputs<T>& targets) {
    check_scale_shapes(preds, targets);
    Var<T> acc = dft_l1_mean(preds[0], targets[0]);
    for (std::size_t i = 1; i < kScales; ++i) acc = add(acc, dft_l1_mean(preds[i], targets[i]));
    return scale(acc, T(1) / T(kScales));
}

template <typename T>
struct LossTerms {
    Var<T> total;
    Var<T> spatial;
    Var<T> frequency;
};

template <typename T>
LossTerms<T> total_loss(const ScaleOutputs<T>& preds, const ScaleOutputs<T>& targets, const LossConfig& cfg = {}) {
    cfg.validate();
    auto s = spatial_l1(preds, targets);
    auto f = frequency_l1(preds, targets);
    return {add(s, scale(f, static_cast<T>(cfg.lambda_freq))), s, f};
}

template <typename T>
ScaleOutputs<T> constant_scales(const std::array<Tensor<T>, kScales>& xs) {
    ScaleOutputs<T> out;
    for (std::size_t i = 0; i < kScales; ++i) out[i] = Var<T>::constant(xs[i]);
    return out;
}

} // namespace msfs
