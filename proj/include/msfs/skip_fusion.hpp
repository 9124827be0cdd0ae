#pragma once

#include <array>
#include <numeric>

#include "msfs/ops.hpp"
#include "msfs/params.hpp"

namespace msfs {

inline constexpr std::size_t kScales = 4;

/// Bilinear (corner-aligned) resize; identity when the size already matches.
template <typename T>
Var<T> resize_to(const Var<T>& f, std::size_t h, std::size_t w) {
    return resize_bilinear(f, h, w);
}

/// Per-level skip gate. The middle-block projection produces FM at this
/// level's width; the decoder fuse map merges the gated skip with the decoder.
template <typename T>
struct SFFParams {
    ConvParams<T> reduce;    // 1x1, sum of encoder widths -> C_l
    ConvParams<T> middle;    // 1x1, middle width -> C_l
    ConvParams<T> squeeze;   // 1x1, C_l -> 2C_l (gated to C_l)
    ConvParams<T> mask_enc;  // 1x1, C_l -> C_l
    ConvParams<T> mask_mid;  // 1x1, C_l -> C_l
    ConvParams<T> fuse;      // 1x1, 2C_l -> C_l

    static SFFParams create(ParamBuilder<T> b, std::size_t level_width, std::size_t encoder_total,
                            std::size_t middle_width) {
        const std::size_t c = level_width;
        return {b.conv("reduce", c, encoder_total, 1), b.conv("middle", c, middle_width, 1),
                b.conv("squeeze", 2 * c, c, 1),        b.conv("mask_enc", c, c, 1),
                b.conv("mask_mid", c, c, 1),           b.conv("fuse", c, 2 * c, 1)};
    }

    std::size_t width() const { return reduce.out_channels(); }
};

template <typename T>
struct SFFResult {
    Var<T> fused;     // gated encoder features for this level
    Var<T> enc_mask;  // 1x1xC channel distribution applied to FE
    Var<T> mid_mask;  // 1x1xC channel distribution applied to FM
};

/// Gates the concatenated multi-scale encoder features with a descriptor
/// built from encoder + middle context. `middle` must already be at this
/// level's resolution and width.
template <typename T>
SFFResult<T> sff_level_detailed(const std::array<Var<T>, kScales>& encoder, const Var<T>& middle, std::size_t level,
                                const SFFParams<T>& p) {
    if (level < 1 || level > kScales) throw ConfigError("sff_level: level " + std::to_string(level) + " out of range 1..4");
    require_feature_map(middle.shape(), "sff_level");
    const std::size_t h = middle.value().height(), w = middle.value().width();
    if (middle.value().channels() != p.width())
        throw InvalidInputError("sff_level: middle features have " + std::to_string(middle.value().channels()) +
                                " channels, level expects " + std::to_string(p.width()));
    std::vector<Var<T>> aligned;
    for (const auto& e : encoder) aligned.push_back(resize_to(e, h, w));
    auto fe = p.reduce(concat_channels(aligned));
    auto fs = simple_gate(p.squeeze(global_avg_pool(add(fe, middle))));
    const std::size_t c = p.width();
    auto enc_mask = softmax_groups(p.mask_enc(fs), c);
    auto mid_mask = softmax_groups(p.mask_mid(fs), c);
    auto fm_hat = add(mul_channels(middle, mid_mask), middle);
    auto fe_hat = add(add(mul_channels(fe, enc_mask), fe), fm_hat);
    return {fe_hat, enc_mask, mid_mask};
}

template <typename T>
Var<T> sff_level(const std::array<Var<T>, kScales>& encoder, const Var<T>& middle, std::size_t level,
                 const SFFParams<T>& p) {
    return sff_level_detailed(encoder, middle, level, p).fused;
}

/// Concatenates the gated skip with the decoder stream and projects back to
/// the decoder width.
template <typename T>
Var<T> sff_fuse_into_decoder(const Var<T>& skip, const Var<T>& decoder, const ConvParams<T>& fuse) {
    require_feature_map(skip.shape(), "sff_fuse_into_decoder");
    require_feature_map(decoder.shape(), "sff_fuse_into_decoder");
    if (skip.value().height() != decoder.value().height() || skip.value().width() != decoder.value().width())
        throw GeometryError("sff_fuse_into_decoder: resolution mismatch " + shape_string(skip.shape()) + " vs " +
                            shape_string(decoder.shape()));
    return fuse(concat_channels<T>({skip, decoder}));
}

} // namespace msfs
