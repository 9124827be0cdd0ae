#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "msfs/tensor.hpp"

namespace msfs {

/// Mirror-reflects an index into [0, n) without repeating the edge sample,
/// folding as many times as needed. A length-1 axis maps everything to 0.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    if (n == 1) return 0;
    const std::ptrdiff_t period = 2 * (static_cast<std::ptrdiff_t>(n) - 1);
    std::ptrdiff_t m = i % period;
    if (m < 0) m += period;
    return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - m);
}

struct CropRecord {
    std::size_t height = 0;
    std::size_t width = 0;
};

template <typename T>
struct Padded {
    Tensor<T> image;
    CropRecord crop;
};

/// Minimal bottom/right reflect padding so both sides divide m.
template <typename T>
Padded<T> pad_reflect_to_multiple(const Tensor<T>& img, std::size_t m) {
    require_feature_map(img.shape(), "pad_reflect_to_multiple");
    if (m == 0) throw InvalidInputError("pad_reflect_to_multiple: multiple must be >= 1");
    const std::size_t H = img.height(), W = img.width(), C = img.channels();
    const std::size_t Hp = (H + m - 1) / m * m, Wp = (W + m - 1) / m * m;
    Tensor<T> out = Tensor<T>::feature_map(Hp, Wp, C);
    for (std::size_t y = 0; y < Hp; ++y)
        for (std::size_t x = 0; x < Wp; ++x)
            std::copy_n(img.pixel(reflect_index(static_cast<std::ptrdiff_t>(y), H), reflect_index(static_cast<std::ptrdiff_t>(x), W)),
                        C, out.pixel(y, x));
    return {std::move(out), {H, W}};
}

template <typename T>
Tensor<T> crop_to(const Tensor<T>& img, const CropRecord& rec) {
    if (rec.height > img.height() || rec.width > img.width()) throw GeometryError("crop_to: record exceeds image");
    const std::size_t C = img.channels();
    Tensor<T> out = Tensor<T>::feature_map(rec.height, rec.width, C);
    for (std::size_t y = 0; y < rec.height; ++y) std::copy_n(img.pixel(y, 0), rec.width * C, out.pixel(y, 0));
    return out;
}

/// 2x box downsampling: each output pixel is the mean of a 2x2 block.
template <typename T>
Tensor<T> area_downsample2(const Tensor<T>& img) {
    require_feature_map(img.shape(), "area_downsample2");
    if (img.height() % 2 || img.width() % 2)
        throw GeometryError("area_downsample2: size " + shape_string(img.shape()) + " is not even");
    const std::size_t H = img.height() / 2, W = img.width() / 2, C = img.channels();
    Tensor<T> out = Tensor<T>::feature_map(H, W, C);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < C; ++c)
                out.at(y, x, c) = T(0.25) * ((img.at(2 * y, 2 * x, c) + img.at(2 * y, 2 * x + 1, c)) +
                                             (img.at(2 * y + 1, 2 * x, c) + img.at(2 * y + 1, 2 * x + 1, c)));
    return out;
}

/// Full, 1/2, 1/4, ... resolution copies by repeated area downsampling.
template <typename T>
std::vector<Tensor<T>> input_pyramid(const Tensor<T>& img, std::size_t levels = 4) {
    std::vector<Tensor<T>> out{img};
    for (std::size_t i = 1; i < levels; ++i) out.push_back(area_downsample2(out.back()));
    return out;
}

} // namespace msfs
