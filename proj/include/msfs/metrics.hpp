#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "msfs/tensor.hpp"

namespace msfs {

/// Peak signal-to-noise ratio in dB; +infinity when the images are identical.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double data_range = 1.0) {
    if (a.shape() != b.shape())
        throw InvalidInputError("psnr: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    if (!(data_range > 0)) throw InvalidInputError("psnr: data range must be positive");
    if (a.empty()) throw InvalidInputError("psnr: empty images");
    double se = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / mse);
}

namespace detail {

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
    std::vector<double> g(size);
    const double c = static_cast<double>(size / 2);
    double s = 0;
    for (std::size_t i = 0; i < size; ++i) {
        const double x = static_cast<double>(i) - c;
        s += (g[i] = std::exp(-x * x / (2 * sigma * sigma)));
    }
    for (auto& v : g) v /= s;
    return g;
}

// Separable "valid" filtering of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w,
                                        const std::vector<double>& g) {
    const std::size_t k = g.size(), oh = h - k + 1, ow = w - k + 1;
    std::vector<double> tmp(h * ow), out(oh * ow);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double s = 0;
            for (std::size_t i = 0; i < k; ++i) s += g[i] * img[y * w + x + i];
            tmp[y * ow + x] = s;
        }
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double s = 0;
            for (std::size_t i = 0; i < k; ++i) s += g[i] * tmp[(y + i) * ow + x];
            out[y * ow + x] = s;
        }
    return out;
}

} // namespace detail

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, data range 1. Statistics use the valid region only;
/// multi-channel images return the channel average.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
    constexpr std::size_t kWin = 11;
    if (a.shape() != b.shape())
        throw InvalidInputError("ssim: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    require_feature_map(a.shape(), "ssim");
    const std::size_t H = a.height(), W = a.width(), C = a.channels();
    if (H < kWin || W < kWin) throw InvalidInputError("ssim: image smaller than the 11x11 window");
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const auto g = detail::gaussian_window(kWin, 1.5);

    double total = 0;
    std::vector<double> x(H * W), y(H * W), xx(H * W), yy(H * W), xy(H * W);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < H * W; ++i) {
            x[i] = static_cast<double>(a[i * C + c]);
            y[i] = static_cast<double>(b[i * C + c]);
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        auto mx = detail::filter_valid(x, H, W, g), my = detail::filter_valid(y, H, W, g);
        auto sxx = detail::filter_valid(xx, H, W, g), syy = detail::filter_valid(yy, H, W, g),
             sxy = detail::filter_valid(xy, H, W, g);
        double s = 0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
            s += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += s / static_cast<double>(mx.size());
    }
    return total / static_cast<double>(C);
}

/// BT.601 studio-range luma of an RGB image in [0, 1].
template <typename T>
Tensor<T> rgb_to_y(const Tensor<T>& img) {
    require_feature_map(img.shape(), "rgb_to_y");
    if (img.channels() != 3) throw InvalidInputError("rgb_to_y: expected 3 channels, got " + std::to_string(img.channels()));
    Tensor<T> out = Tensor<T>::feature_map(img.height(), img.width(), 1);
    for (std::size_t p = 0; p < img.pixels(); ++p) {
        const double r = img[3 * p], g = img[3 * p + 1], b = img[3 * p + 2];
        out[p] = static_cast<T>((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0);
    }
    return out;
}

} // namespace msfs
