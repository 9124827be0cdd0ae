#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "msfs/blocks.hpp"
#include "msfs/image.hpp"
#include "msfs/losses.hpp"
#include "msfs/skip_fusion.hpp"

namespace msfs {

/// Padded inputs must divide this so the three halvings stay exact.
inline constexpr std::size_t kPadMultiple = 8;

struct ModelConfig {
    std::size_t width = 32;
    std::array<std::size_t, kScales> enc_blocks{1, 1, 1, 28};
    std::array<std::size_t, kScales> dec_blocks{1, 1, 1, 1};
    std::size_t middle_blocks = 1;
    std::size_t groups = 8;
    bool use_dfs = true;
    bool use_sff = true;
    std::size_t max_tokens = kDefaultMaxAttentionTokens;

    std::size_t level_width(std::size_t level) const { return width << level; }

    void validate() const {
        if (width == 0) throw ConfigError("model.width must be >= 1");
        for (std::size_t i = 0; i < kScales; ++i) {
            if (enc_blocks[i] == 0) throw ConfigError("model.enc_blocks entries must be >= 1");
            if (dec_blocks[i] == 0) throw ConfigError("model.dec_blocks entries must be >= 1");
        }
        if (middle_blocks == 0) throw ConfigError("model.middle_blocks must be >= 1");
        if (groups == 0) throw ConfigError("model.groups must be >= 1");
        if (width % groups != 0)
            throw ConfigError("model.width " + std::to_string(width) + " is not divisible by model.groups " +
                              std::to_string(groups));
        if (max_tokens == 0) throw ConfigError("model.max_tokens must be >= 1");
    }

    BlockOptions block_options() const { return {groups, use_dfs, max_tokens}; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace detail {

inline std::string join_counts(const std::array<std::size_t, kScales>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

inline std::size_t parse_count(const std::string& key, const std::string& s) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size() || s.front() == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
    return static_cast<std::size_t>(v);
}

inline std::array<std::size_t, kScales> parse_counts(const std::string& key, const std::string& s) {
    std::array<std::size_t, kScales> out{};
    std::stringstream ss(s);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i >= kScales) throw ConfigError(key + ": expected 4 comma-separated counts");
        const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
        out[i++] = parse_count(key, b == std::string::npos ? "" : item.substr(b, e - b + 1));
    }
    if (i != kScales) throw ConfigError(key + ": expected 4 comma-separated counts");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": expected true/false, got '" + s + "'");
}

} // namespace detail

inline std::map<std::string, std::string> to_key_values(const ModelConfig& c) {
    return {{"width", std::to_string(c.width)},
            {"enc_blocks", detail::join_counts(c.enc_blocks)},
            {"dec_blocks", detail::join_counts(c.dec_blocks)},
            {"middle_blocks", std::to_string(c.middle_blocks)},
            {"groups", std::to_string(c.groups)},
            {"use_dfs", c.use_dfs ? "true" : "false"},
            {"use_sff", c.use_sff ? "true" : "false"},
            {"max_tokens", std::to_string(c.max_tokens)}};
}

/// Applies one `key = value` setting; unknown keys are errors.
inline void set_model_key(ModelConfig& c, const std::string& key, const std::string& value,
                          const std::string& prefix = "model.") {
    const std::string name = prefix + key;
    if (key == "width") c.width = detail::parse_count(name, value);
    else if (key == "enc_blocks") c.enc_blocks = detail::parse_counts(name, value);
    else if (key == "dec_blocks") c.dec_blocks = detail::parse_counts(name, value);
    else if (key == "middle_blocks") c.middle_blocks = detail::parse_count(name, value);
    else if (key == "groups") c.groups = detail::parse_count(name, value);
    else if (key == "use_dfs") c.use_dfs = detail::parse_bool(name, value);
    else if (key == "use_sff") c.use_sff = detail::parse_bool(name, value);
    else if (key == "max_tokens") c.max_tokens = detail::parse_count(name, value);
    else throw ConfigError("unknown key " + name);
}

/// Restored images at full, 1/2, 1/4 and 1/8 resolution. Index 0 is cropped
/// back to the input size; the others keep the padded geometry.
template <typename T>
struct PyramidOutputs {
    std::array<Tensor<T>, kScales> restored;
};

/// Multi-scale encoder/decoder built from frequency-selection blocks, with
/// low-resolution inputs injected into the encoder and a residual head per
/// scale. Copies share parameters.
template <typename T>
class Model {
public:
    static Model build(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg_ = cfg;
        std::mt19937_64 rng(seed);
        ParamBuilder<T> root(m.store_, rng);
        const auto opt = cfg.block_options();
        const std::size_t deepest = cfg.level_width(kScales - 1);
        std::size_t encoder_total = 0;
        for (std::size_t l = 0; l < kScales; ++l) encoder_total += cfg.level_width(l);

        m.shallow_ = root.conv("shallow", cfg.width, 3, 3);
        for (std::size_t l = 0; l < kScales; ++l) {
            const std::size_t c = cfg.level_width(l);
            auto lv = root.scope("enc" + std::to_string(l + 1));
            if (l > 0) {
                m.down_[l - 1] = lv.conv("down", c, c / 2, 3);
                m.sfe_[l - 1] = SFEParams<T>::create(lv.scope("sfe"), c);
                m.inject_[l - 1] = lv.conv("inject", c, 2 * c, 3);
            }
            for (std::size_t i = 0; i < cfg.enc_blocks[l]; ++i)
                m.enc_[l].push_back(MSFSParams<T>::create(lv.scope("block" + std::to_string(i)), c, opt));
        }
        auto mid = root.scope("middle");
        for (std::size_t i = 0; i < cfg.middle_blocks; ++i)
            m.middle_.push_back(MSFSParams<T>::create(mid.scope("block" + std::to_string(i)), deepest, opt));
        for (std::size_t l = kScales; l-- > 0;) {
            const std::size_t c = cfg.level_width(l);
            auto lv = root.scope("dec" + std::to_string(l + 1));
            if (l + 1 < kScales) m.up_[l] = lv.conv("up", 4 * c, 2 * c, 1);
            if (cfg.use_sff)
                m.sff_[l] = SFFParams<T>::create(lv.scope("sff"), c, encoder_total, deepest);
            else
                m.sff_[l].fuse = lv.conv("skip_fuse", c, 2 * c, 1);
            for (std::size_t i = 0; i < cfg.dec_blocks[l]; ++i)
                m.dec_[l].push_back(MSFSParams<T>::create(lv.scope("block" + std::to_string(i)), c, opt));
            m.head_[l] = lv.conv("head", 3, c, 3);
        }
        return m;
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    ParameterStore<T>& parameters() noexcept { return store_; }
    const ParameterStore<T>& parameters() const noexcept { return store_; }

    /// Runs the network on an already padded input pyramid and returns the
    /// restored image per scale (residual head output plus that scale's input).
    ScaleOutputs<T> forward_scales(const std::array<Tensor<T>, kScales>& inputs) const {
        for (std::size_t l = 0; l < kScales; ++l) {
            require_feature_map(inputs[l].shape(), "forward");
            if (inputs[l].channels() != 3) throw InvalidInputError("forward: expected RGB inputs");
            if (l > 0 && (inputs[l].height() * 2 != inputs[l - 1].height() ||
                          inputs[l].width() * 2 != inputs[l - 1].width()))
                throw GeometryError("forward: input pyramid does not halve exactly");
        }
        const std::size_t mt = cfg_.max_tokens;
        std::array<Var<T>, kScales> in;
        for (std::size_t l = 0; l < kScales; ++l) in[l] = Var<T>::constant(inputs[l]);

        std::array<Var<T>, kScales> enc;
        Var<T> e = shallow_(in[0]);
        for (std::size_t l = 0; l < kScales; ++l) {
            if (l > 0) {
                e = down_[l - 1](e, 2);
                e = inject_[l - 1](concat_channels<T>({e, sfe(in[l], sfe_[l - 1])}));
            }
            for (const auto& b : enc_[l]) e = msfs_block(e, b, mt);
            enc[l] = e;
        }
        Var<T> mid = enc[kScales - 1];
        for (const auto& b : middle_) mid = msfs_block(mid, b, mt);

        ScaleOutputs<T> out;
        Var<T> d = mid;
        for (std::size_t l = kScales; l-- > 0;) {
            if (l + 1 < kScales) d = pixel_shuffle(up_[l](d), 2);
            const std::size_t h = d.value().height(), w = d.value().width();
            Var<T> skip = enc[l];
            if (cfg_.use_sff) skip = sff_level(enc, resize_to(sff_[l].middle(mid), h, w), l + 1, sff_[l]);
            d = sff_fuse_into_decoder(skip, d, sff_[l].fuse);
            for (const auto& b : dec_[l]) d = msfs_block(d, b, mt);
            out[l] = add(head_[l](d), in[l]);
        }
        return out;
    }

    /// Full inference path: reflect-pad to a multiple of 8, build the input
    /// pyramid, run, and crop the full-resolution output back. Never records
    /// gradients.
    PyramidOutputs<T> forward(const Tensor<T>& image) const {
        NoGradGuard no_grad;
        require_feature_map(image.shape(), "forward");
        if (image.height() < kPadMultiple || image.width() < kPadMultiple)
            throw InvalidInputError("forward: image " + shape_string(image.shape()) + " is smaller than 8x8");
        auto padded = pad_reflect_to_multiple(image, kPadMultiple);
        auto pyr = input_pyramid(padded.image, kScales);
        std::array<Tensor<T>, kScales> inputs;
        for (std::size_t l = 0; l < kScales; ++l) inputs[l] = std::move(pyr[l]);
        auto outs = forward_scales(inputs);
        PyramidOutputs<T> res;
        for (std::size_t l = 0; l < kScales; ++l) res.restored[l] = outs[l].value();
        res.restored[0] = crop_to(res.restored[0], padded.crop);
        return res;
    }

    /// Sets every residual head to zero so each output equals its input.
    void zero_heads() {
        for (auto& h : head_) {
            h.weight.mutable_value().fill(T(0));
            h.bias.mutable_value().fill(T(0));
        }
    }

private:
    ModelConfig cfg_;
    ParameterStore<T> store_;
    ConvParams<T> shallow_;
    std::array<ConvParams<T>, kScales - 1> down_, inject_;
    std::array<SFEParams<T>, kScales - 1> sfe_;
    std::array<std::vector<MSFSParams<T>>, kScales> enc_, dec_;
    std::vector<MSFSParams<T>> middle_;
    std::array<ConvParams<T>, kScales - 1> up_;
    std::array<SFFParams<T>, kScales> sff_;
    std::array<ConvParams<T>, kScales> head_;
};

/// Builds a model with the same configuration and copies parameters across
/// precisions.
template <typename To, typename From>
Model<To> convert_model(const Model<From>& src) {
    auto dst = Model<To>::build(src.config(), 0);
    dst.parameters().assign_from(src.parameters());
    return dst;
}

} // namespace msfs
