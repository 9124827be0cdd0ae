#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "msfs/image.hpp"
#include "msfs/tensor.hpp"

namespace msfs {

namespace fs = std::filesystem;

template <typename T>
struct ImagePair {
    Tensor<T> degraded;
    Tensor<T> clean;
    std::string id;
};

/// splitmix64 finalizer; used to derive independent stream seeds from a root.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0) {
    return mix_seed(mix_seed(mix_seed(root) ^ a) ^ b);
}

// ---------------------------------------------------------------- PNG I/O

/// Reads any PNG as 8-bit RGB scaled to [0, 1].
inline Tensor<float> read_png(const fs::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str()))
        throw DataError("cannot read PNG " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&img);
        throw DataError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    auto out = Tensor<float>::feature_map(img.height, img.width, 3);
    for (std::size_t i = 0; i < buf.size(); ++i) out[i] = static_cast<float>(buf[i]) / 255.f;
    return out;
}

/// Clamp to [0, 1], then round half up to 8 bits.
template <typename T>
std::vector<std::uint8_t> quantize8(const Tensor<T>& img) {
    std::vector<std::uint8_t> q(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = std::clamp(static_cast<double>(img[i]), 0.0, 1.0);
        q[i] = static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
    }
    return q;
}

template <typename T>
void write_png(const fs::path& path, const Tensor<T>& img) {
    require_feature_map(img.shape(), "write_png");
    if (img.channels() != 3 && img.channels() != 1)
        throw InvalidInputError("write_png: expected 1 or 3 channels, got " + std::to_string(img.channels()));
    auto q = quantize8(img);
    png_image out{};
    out.version = PNG_IMAGE_VERSION;
    out.width = static_cast<png_uint_32>(img.width());
    out.height = static_cast<png_uint_32>(img.height());
    out.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!png_image_write_to_file(&out, path.string().c_str(), 0, q.data(), 0, nullptr))
        throw DataError("cannot write PNG " + path.string() + ": " + out.message);
}

// ---------------------------------------------------------------- degradations

template <typename T>
void clamp01(Tensor<T>& img) {
    for (auto& v : img.values()) v = std::clamp(v, T(0), T(1));
}

/// Adds N(0, (sigma_255 / 255)^2) per value, then clamps.
template <typename T>
Tensor<T> add_gaussian_noise(const Tensor<T>& img, double sigma_255, std::uint64_t seed) {
    if (!(sigma_255 > 0)) throw ConfigError("noise sigma must be > 0");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sigma_255 / 255.0);
    Tensor<T> out = img;
    for (auto& v : out.values()) v = static_cast<T>(static_cast<double>(v) + n(rng));
    clamp01(out);
    return out;
}

/// Normalized 1-D Gaussian taps of odd length k.
inline std::vector<double> gaussian_taps(double sigma, std::size_t k) {
    if (k % 2 == 0) throw ConfigError("blur kernel size must be odd, got " + std::to_string(k));
    if (!(sigma > 0)) throw ConfigError("blur sigma must be > 0");
    std::vector<double> g(k);
    const double r = static_cast<double>(k / 2);
    double s = 0;
    for (std::size_t i = 0; i < k; ++i) {
        const double x = static_cast<double>(i) - r;
        s += (g[i] = std::exp(-x * x / (2 * sigma * sigma)));
    }
    for (auto& v : g) v /= s;
    return g;
}

/// Separable Gaussian blur with reflect padding.
template <typename T>
Tensor<T> gaussian_blur(const Tensor<T>& img, double sigma, std::size_t k) {
    require_feature_map(img.shape(), "gaussian_blur");
    const auto g = gaussian_taps(sigma, k);
    const std::size_t H = img.height(), W = img.width(), C = img.channels();
    const auto r = static_cast<std::ptrdiff_t>(k / 2);
    std::vector<double> tmp(img.size());
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0;
                for (std::ptrdiff_t d = -r; d <= r; ++d)
                    s += g[d + r] * img.at(y, reflect_index(static_cast<std::ptrdiff_t>(x) + d, W), c);
                tmp[(y * W + x) * C + c] = s;
            }
    Tensor<T> out(img.shape());
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0;
                for (std::ptrdiff_t d = -r; d <= r; ++d)
                    s += g[d + r] * tmp[(reflect_index(static_cast<std::ptrdiff_t>(y) + d, H) * W + x) * C + c];
                out.at(y, x, c) = static_cast<T>(s);
            }
    return out;
}

struct RainSpec {
    std::size_t count = 40;
    double length = 12;        // pixels
    double angle = 80;         // degrees from horizontal
    double angle_jitter = 10;  // uniform +- degrees
    double intensity = 0.3;
};

/// Integer points of the segment (x0,y0)-(x1,y1), endpoints included.
inline std::vector<std::pair<long, long>> bresenham(long x0, long y0, long x1, long y1) {
    std::vector<std::pair<long, long>> pts;
    const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    for (;;) {
        pts.emplace_back(x0, y0);
        if (x0 == x1 && y0 == y1) break;
        const long e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
    return pts;
}

/// Brightens every in-bounds pixel of one segment by `intensity` (all channels).
template <typename T>
void draw_streak(Tensor<T>& img, long x0, long y0, long x1, long y1, double intensity) {
    for (auto [x, y] : bresenham(x0, y0, x1, y1)) {
        if (x < 0 || y < 0 || x >= static_cast<long>(img.width()) || y >= static_cast<long>(img.height())) continue;
        for (std::size_t c = 0; c < img.channels(); ++c) img.at(y, x, c) += static_cast<T>(intensity);
    }
}

template <typename T>
Tensor<T> synth_rain(const Tensor<T>& img, const RainSpec& spec, std::uint64_t seed) {
    require_feature_map(img.shape(), "synth_rain");
    if (!(spec.length > 0) || !(spec.intensity > 0) || spec.angle_jitter < 0)
        throw ConfigError("rain length and intensity must be > 0, jitter >= 0");
    Tensor<T> out = img;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(0, static_cast<double>(img.width())),
        uy(0, static_cast<double>(img.height())), ua(-spec.angle_jitter, spec.angle_jitter);
    for (std::size_t i = 0; i < spec.count; ++i) {
        const double x = ux(rng), y = uy(rng);
        const double a = (spec.angle + ua(rng)) * std::numbers::pi / 180.0;
        draw_streak(out, std::lround(x), std::lround(y), std::lround(x + spec.length * std::cos(a)),
                    std::lround(y + spec.length * std::sin(a)), spec.intensity);
    }
    clamp01(out);
    return out;
}

enum class DegradationKind { gaussian_noise, gaussian_blur, rain_streaks };

inline std::string to_string(DegradationKind k) {
    switch (k) {
    case DegradationKind::gaussian_noise: return "gaussian_noise";
    case DegradationKind::gaussian_blur: return "gaussian_blur";
    case DegradationKind::rain_streaks: return "rain_streaks";
    }
    return "?";
}

inline DegradationKind parse_degradation_kind(const std::string& s) {
    if (s == "gaussian_noise") return DegradationKind::gaussian_noise;
    if (s == "gaussian_blur") return DegradationKind::gaussian_blur;
    if (s == "rain_streaks") return DegradationKind::rain_streaks;
    throw ConfigError("degradation.kind: unknown degradation '" + s + "'");
}

struct DegradationSpec {
    DegradationKind kind = DegradationKind::gaussian_noise;
    double sigma = 25;  // noise, on the 0..255 scale
    double blur_sigma = 1.6;
    std::size_t blur_kernel = 9;
    RainSpec rain;

    void validate() const {
        switch (kind) {
        case DegradationKind::gaussian_noise:
            if (!(sigma > 0)) throw ConfigError("degradation.sigma must be > 0");
            break;
        case DegradationKind::gaussian_blur:
            if (!(blur_sigma > 0)) throw ConfigError("degradation.blur_sigma must be > 0");
            if (blur_kernel % 2 == 0) throw ConfigError("degradation.blur_kernel must be odd");
            break;
        case DegradationKind::rain_streaks:
            if (!(rain.length > 0) || !(rain.intensity > 0)) throw ConfigError("degradation.rain_* must be > 0");
            break;
        }
    }
};

/// Blur ignores the seed.
template <typename T>
Tensor<T> degrade(const Tensor<T>& clean, const DegradationSpec& spec, std::uint64_t seed) {
    spec.validate();
    switch (spec.kind) {
    case DegradationKind::gaussian_noise: return add_gaussian_noise(clean, spec.sigma, seed);
    case DegradationKind::gaussian_blur: return gaussian_blur(clean, spec.blur_sigma, spec.blur_kernel);
    case DegradationKind::rain_streaks: return synth_rain(clean, spec.rain, seed);
    }
    return clean;
}

/// Piecewise-smooth RGB test scene: a colour gradient, a few low-frequency
/// ripples and some flat-shaded rectangles and discs with hard edges.
template <typename T>
Tensor<T> synth_clean_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    auto img = Tensor<T>::feature_map(h, w, 3);
    double base[3], gx[3], gy[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = 0.25 + 0.5 * u(rng);
        gx[c] = 0.4 * (u(rng) - 0.5);
        gy[c] = 0.4 * (u(rng) - 0.5);
    }
    struct Wave {
        double fx, fy, ph, amp[3];
    };
    std::vector<Wave> waves(3);
    for (auto& wv : waves) {
        wv.fx = 1 + 3 * u(rng);
        wv.fy = 1 + 3 * u(rng);
        wv.ph = 2 * std::numbers::pi * u(rng);
        for (double& a : wv.amp) a = 0.08 * (u(rng) - 0.5);
    }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double sx = double(x) / double(w), sy = double(y) / double(h);
            for (int c = 0; c < 3; ++c) {
                double v = base[c] + gx[c] * (sx - 0.5) + gy[c] * (sy - 0.5);
                for (const auto& wv : waves) v += wv.amp[c] * std::sin(2 * std::numbers::pi * (wv.fx * sx + wv.fy * sy) + wv.ph);
                img.at(y, x, c) = static_cast<T>(v);
            }
        }
    const int shapes = 3 + static_cast<int>(u(rng) * 3);
    for (int s = 0; s < shapes; ++s) {
        double col[3];
        for (double& c : col) c = 0.1 + 0.8 * u(rng);
        const double cx = u(rng) * double(w), cy = u(rng) * double(h), r = (0.1 + 0.2 * u(rng)) * double(std::min(h, w));
        const bool disc = u(rng) < 0.5;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double dx = double(x) - cx, dy = double(y) - cy;
                const bool in = disc ? dx * dx + dy * dy <= r * r : std::abs(dx) <= r && std::abs(dy) <= 0.6 * r;
                if (in)
                    for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<T>(col[c]);
            }
    }
    clamp01(img);
    return img;
}

// ---------------------------------------------------------------- datasets

inline std::vector<std::string> list_pngs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png") names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

/// Pairs same-named PNGs, sorted by name. Every unmatched file is reported in
/// one error.
inline std::vector<ImagePair<float>> load_pair_dataset(const fs::path& dir_degraded, const fs::path& dir_clean) {
    const auto deg = list_pngs(dir_degraded), cln = list_pngs(dir_clean);
    std::vector<std::string> orphans;
    std::set_difference(deg.begin(), deg.end(), cln.begin(), cln.end(), std::back_inserter(orphans));
    const std::size_t only_degraded = orphans.size();
    std::set_difference(cln.begin(), cln.end(), deg.begin(), deg.end(), std::back_inserter(orphans));
    if (!orphans.empty()) {
        std::string msg = "unmatched files:";
        for (std::size_t i = 0; i < orphans.size(); ++i)
            msg += " " + (i < only_degraded ? dir_degraded : dir_clean).string() + "/" + orphans[i];
        throw DataError(msg);
    }
    std::vector<ImagePair<float>> pairs;
    for (const auto& name : deg) {
        ImagePair<float> p{read_png(dir_degraded / name), read_png(dir_clean / name), name};
        if (p.degraded.shape() != p.clean.shape())
            throw DataError("pair " + name + ": degraded is " + shape_string(p.degraded.shape()) + " but clean is " +
                            shape_string(p.clean.shape()));
        pairs.push_back(std::move(p));
    }
    return pairs;
}

/// Same crop and same flips on both images.
template <typename T>
ImagePair<T> sample_patch(const ImagePair<T>& pair, std::size_t size, std::mt19937_64& rng) {
    const std::size_t H = pair.clean.height(), W = pair.clean.width(), C = pair.clean.channels();
    if (size == 0 || H < size || W < size)
        throw InvalidInputError("sample_patch: image " + pair.id + " (" + shape_string(pair.clean.shape()) +
                                ") is smaller than the patch size " + std::to_string(size));
    const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, H - size)(rng);
    const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, W - size)(rng);
    const bool flip_h = std::bernoulli_distribution(0.5)(rng);
    const bool flip_v = std::bernoulli_distribution(0.5)(rng);
    auto cut = [&](const Tensor<T>& src) {
        auto out = Tensor<T>::feature_map(size, size, C);
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const std::size_t sy = y0 + (flip_v ? size - 1 - y : y), sx = x0 + (flip_h ? size - 1 - x : x);
                std::copy_n(src.pixel(sy, sx), C, out.pixel(y, x));
            }
        return out;
    };
    return {cut(pair.degraded), cut(pair.clean), pair.id};
}

} // namespace msfs
