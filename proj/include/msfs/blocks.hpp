#pragma once

#include "msfs/attention.hpp"
#include "msfs/freq_filter.hpp"
#include "msfs/ops.hpp"
#include "msfs/params.hpp"

namespace msfs {

/// Simplified channel attention: x scaled per channel by a linear map of its
/// global average.
template <typename T>
Var<T> sca(const Var<T>& x, const ConvParams<T>& squeeze) {
    return mul_channels(x, squeeze(global_avg_pool(x)));
}

template <typename T>
struct NAFBlockParams {
    LayerNormParams<T> norm1, norm2;
    ConvParams<T> expand;     // 1x1, C -> 2C
    ConvParams<T> depthwise;  // 3x3 depthwise on 2C (weight stored as {2C,3,3})
    ConvParams<T> sca;        // 1x1, C -> C on the pooled descriptor
    ConvParams<T> project;    // 1x1, C -> C
    ConvParams<T> ffn_expand; // 1x1, C -> 2C
    ConvParams<T> ffn_project;// 1x1, C -> C

    static NAFBlockParams create(ParamBuilder<T> b, std::size_t c) {
        NAFBlockParams p;
        p.norm1 = b.norm("norm1", c);
        p.expand = b.conv("expand", 2 * c, c, 1);
        p.depthwise.weight = b.uniform("depthwise.weight", {2 * c, 3, 3}, 9);
        p.depthwise.bias = b.constant("depthwise.bias", {2 * c}, T(0));
        p.sca = b.conv("sca", c, c, 1);
        p.project = b.conv("project", c, c, 1);
        p.norm2 = b.norm("norm2", c);
        p.ffn_expand = b.conv("ffn_expand", 2 * c, c, 1);
        p.ffn_project = b.conv("ffn_project", c, c, 1);
        return p;
    }

    std::size_t channels() const { return project.out_channels(); }
};

/// Activation-free residual block: a gated depthwise branch with channel
/// attention, then a gated pointwise feed-forward branch. Shape-preserving.
template <typename T>
Var<T> naf_block(const Var<T>& x, const NAFBlockParams<T>& p) {
    require_feature_map(x.shape(), "naf_block");
    if (x.value().channels() != p.channels())
        throw InvalidInputError("naf_block: input has " + std::to_string(x.value().channels()) +
                                " channels, block expects " + std::to_string(p.channels()));
    auto t = p.expand(p.norm1(x));
    t = depthwise_conv2d(t, p.depthwise.weight, p.depthwise.bias);
    t = sca(simple_gate(t), p.sca);
    auto y = add(x, p.project(t));
    auto f = p.ffn_project(simple_gate(p.ffn_expand(p.norm2(y))));
    return add(y, f);
}

struct BlockOptions {
    std::size_t groups = 8;
    bool use_dfs = true;
    std::size_t max_tokens = kDefaultMaxAttentionTokens;
};

/// One frequency-selection branch: 1x1 conv, content-adaptive split into
/// low/high frequency, cross-attention between the two.
template <typename T>
struct DFSBranchParams {
    DFSConfig config;
    ConvParams<T> pre;
    DFSParams<T> filters;
    FCAMParams<T> attention;

    static DFSBranchParams create(ParamBuilder<T> b, std::size_t c, std::size_t groups, std::size_t k) {
        DFSConfig cfg{groups, k, c};
        cfg.validate();
        return {cfg, b.conv("pre", c, c, 1), DFSParams<T>::create(b.scope("dfs"), cfg),
                FCAMParams<T>::create(b.scope("fcam"), c)};
    }
};

template <typename T>
Var<T> dfs_branch(const Var<T>& x, const DFSBranchParams<T>& p, std::size_t max_tokens) {
    auto parts = decompose(p.pre(x), p.config, p.filters);
    return fcam(parts.low, parts.high, p.attention, max_tokens);
}

template <typename T>
struct MSFSParams {
    NAFBlockParams<T> naf;
    bool use_dfs = true;
    DFSBranchParams<T> branch3, branch5;
    ConvParams<T> fuse;  // 1x1, 2C -> C

    static MSFSParams create(ParamBuilder<T> b, std::size_t c, const BlockOptions& opt) {
        MSFSParams p;
        p.naf = NAFBlockParams<T>::create(b.scope("naf"), c);
        p.use_dfs = opt.use_dfs;
        if (opt.use_dfs) {
            p.branch3 = DFSBranchParams<T>::create(b.scope("dfs3"), c, opt.groups, 3);
            p.branch5 = DFSBranchParams<T>::create(b.scope("dfs5"), c, opt.groups, 5);
            p.fuse = b.conv("fuse", c, 2 * c, 1);
        }
        return p;
    }
};

/// NAFBlock spatial stage followed by parallel k=3 and k=5 frequency branches
/// whose concatenation is projected back and added to the spatial features.
/// The spatial stage X_s already carries the identity path of the block.
template <typename T>
Var<T> msfs_block(const Var<T>& x, const MSFSParams<T>& p, std::size_t max_tokens = kDefaultMaxAttentionTokens) {
    auto xs = naf_block(x, p.naf);
    if (!p.use_dfs) return xs;
    auto f3 = dfs_branch(xs, p.branch3, max_tokens);
    auto f5 = dfs_branch(xs, p.branch5, max_tokens);
    return add(xs, p.fuse(concat_channels<T>({f3, f5})));
}

/// Shallow feature extractor for the low-resolution inputs.
template <typename T>
struct SFEParams {
    ConvParams<T> embed;   // 3x3, 3 -> C
    ConvParams<T> expand;  // 3x3, C -> 2C, gated back to C
    ConvParams<T> project; // 3x3, C -> C

    static SFEParams create(ParamBuilder<T> b, std::size_t c) {
        return {b.conv("embed", c, 3, 3), b.conv("expand", 2 * c, c, 3), b.conv("project", c, c, 3)};
    }
};

template <typename T>
Var<T> sfe(const Var<T>& image, const SFEParams<T>& p) {
    require_feature_map(image.shape(), "sfe");
    if (image.value().channels() != 3) throw InvalidInputError("sfe: expected an RGB image");
    return p.project(simple_gate(p.expand(p.embed(image))));
}

} // namespace msfs
