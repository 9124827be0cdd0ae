#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <bit>
#include <string>
#include <type_traits>
#include <vector>

#include "msfs/autograd.hpp"
#include "msfs/tensor.hpp"

namespace msfs {

namespace detail {

template <typename T>
inline bool wants(Node<T>& n, std::size_t i) {
    return n.parents[i]->requires_grad;
}

template <typename T>
inline Tensor<T>& grad_of(Node<T>& n, std::size_t i) {
    return n.parents[i]->grad_buffer();
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b)
        throw InvalidInputError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                                shape_string(b));
}

// Reductions keep sixteen independent partial sums so the loops vectorize
// without reassociation flags. Summation order is fixed.
template <typename T>
inline T fold16(const T* acc) {
    T s[8];
    for (std::size_t l = 0; l < 8; ++l) s[l] = acc[l] + acc[l + 8];
    return ((s[0] + s[4]) + (s[2] + s[6])) + ((s[1] + s[5]) + (s[3] + s[7]));
}

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
    T acc[16] = {};
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16)
        for (std::size_t l = 0; l < 16; ++l) acc[l] += a[i + l] * b[i + l];
    for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += a[i] * b[i];
    return fold16(acc);
}

template <typename T>
inline T sum_of(const T* a, std::size_t n) {
    T acc[16] = {};
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16)
        for (std::size_t l = 0; l < 16; ++l) acc[l] += a[i + l];
    for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += a[i];
    return fold16(acc);
}

// Maximum via the order-preserving integer image of IEEE floats, which
// vectorizes where a floating-point select does not. NaNs are the caller's
// concern.
template <typename T>
inline T max_of(const T* a, std::size_t n) {
    using I = std::conditional_t<sizeof(T) == 4, std::int32_t, std::int64_t>;
    constexpr I flip = std::numeric_limits<I>::max();
    constexpr int shift = sizeof(I) * 8 - 1;
    I m = std::numeric_limits<I>::min();
    for (std::size_t i = 0; i < n; ++i) {
        I b = std::bit_cast<I>(a[i]);
        b ^= (b >> shift) & flip;
        m = std::max(m, b);
    }
    m ^= (m >> shift) & flip;
    return std::bit_cast<T>(m);
}

template <typename T>
inline void axpy(T* y, T a, const T* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// In-place exp for arguments <= 0 (softmax after max subtraction). The float
// path is a branch-free range reduction plus polynomial that the compiler
// can vectorize; relative error stays within a few ulp.
template <typename T>
inline void exp_nonpositive(T* x, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) {
        // The clamp gets its own pass; folded into the loop below it becomes
        // a branch and blocks vectorization.
        for (std::size_t i = 0; i < n; ++i) x[i] = std::max(x[i], -87.0f);
        for (std::size_t i = 0; i < n; ++i) {
            const float v = x[i];
            const float t = v * 1.44269504f + 12582912.0f;
            const float k = t - 12582912.0f;
            const float r = (v - k * 0.693359375f) + k * 2.12194440e-4f;
            float p = 1.9875691500e-4f;
            p = p * r + 1.3981999507e-3f;
            p = p * r + 8.3334519073e-3f;
            p = p * r + 4.1665795894e-2f;
            p = p * r + 1.6666665459e-1f;
            p = p * r + 5.0000001201e-1f;
            p = p * r * r + r + 1.0f;
            // t holds k + 1.5 * 2^23, so its low mantissa bits are k itself.
            x[i] = p * std::bit_cast<float>((std::bit_cast<std::int32_t>(t) - 0x4B400000 + 127) << 23);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(x[i]);
    }
}

} // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (!detail::wants(n, p)) continue;
            auto& g = detail::grad_of(n, p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        if (detail::wants(n, 0)) {
            auto& g = detail::grad_of(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (detail::wants(n, 1)) {
            auto& g = detail::grad_of(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        const auto& av = n.parent(0).value;
        const auto& bv = n.parent(1).value;
        if (detail::wants(n, 0)) {
            auto& g = detail::grad_of(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (detail::wants(n, 1)) {
            auto& g = detail::grad_of(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= s;
    return make_op<T>(std::move(out), {a}, [s](Node<T>& n) {
        auto& g = detail::grad_of(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
    });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    T s = 0;
    for (T v : a.value().values()) s += v;
    return make_op<T>(Tensor<T>::scalar(s), {a}, [](Node<T>& n) {
        auto& g = detail::grad_of(n, 0);
        const T d = n.grad[0];
        for (auto& v : g.values()) v += d;
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Sum of a with a fixed weight tensor: a convenient smooth scalar probe.
template <typename T>
Var<T> weighted_sum(const Var<T>& a, const Tensor<T>& w) {
    detail::require_same_shape(a.shape(), w.shape(), "weighted_sum");
    T s = 0;
    for (std::size_t i = 0; i < w.size(); ++i) s += a.value()[i] * w[i];
    return make_op<T>(Tensor<T>::scalar(s), {a}, [w](Node<T>& n) {
        auto& g = detail::grad_of(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * w[i];
    });
}

/// Mean absolute difference, returned as a scalar.
template <typename T>
Var<T> l1_mean(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "l1_mean");
    const auto& av = a.value();
    const auto& bv = b.value();
    T s = 0;
    for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
    const T inv = T(1) / static_cast<T>(av.size());
    return make_op<T>(Tensor<T>::scalar(s * inv), {a, b}, [inv](Node<T>& n) {
        const auto& av = n.parent(0).value;
        const auto& bv = n.parent(1).value;
        const T d = n.grad[0] * inv;
        for (std::size_t i = 0; i < av.size(); ++i) {
            const T diff = av[i] - bv[i];
            const T sg = diff > 0 ? T(1) : (diff < 0 ? T(-1) : T(0));
            if (detail::wants(n, 0)) n.parent(0).grad[i] += d * sg;
            if (detail::wants(n, 1)) n.parent(1).grad[i] -= d * sg;
        }
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value();
    out.reshape(std::move(shape));
    return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
        auto& g = detail::grad_of(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

// ------------------------------------------------------------- convolutions

/// 2-D convolution over an HxWxC map with zero padding.
/// weight: {Cout, Cin, k, k}; bias: {Cout} or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride = 1,
              std::size_t pad = 0) {
    require_feature_map(x.shape(), "conv2d");
    const auto& ws = weight.shape();
    if (ws.size() != 4 || ws[2] != ws[3])
        throw InvalidInputError("conv2d: weight must be {Cout,Cin,k,k}, got " + shape_string(ws));
    const std::size_t H = x.value().height(), W = x.value().width(), Ci = x.value().channels();
    const std::size_t Co = ws[0], k = ws[2];
    if (ws[1] != Ci)
        throw InvalidInputError("conv2d: input has " + std::to_string(Ci) + " channels, weight expects " +
                                std::to_string(ws[1]));
    if (bias.defined() && bias.value().size() != Co) throw InvalidInputError("conv2d: bias size mismatch");
    if (H + 2 * pad < k || W + 2 * pad < k) throw GeometryError("conv2d: kernel larger than padded input");
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - k) / stride + 1;

    // Transposed weights: [ky][kx][ci][co] so the innermost loop runs over Cout.
    std::vector<T> wt(k * k * Ci * Co);
    const auto& wv = weight.value();
    for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t t = 0; t < k * k; ++t) wt[(t * Ci + ci) * Co + co] = wv[(co * Ci + ci) * k * k + t];

    Tensor<T> out = Tensor<T>::feature_map(Ho, Wo, Co);
    const auto& xv = x.value();
    for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
            T* op = out.pixel(oh, ow);
            if (bias.defined())
                for (std::size_t co = 0; co < Co; ++co) op[co] = bias.value()[co];
            for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                    const T* ip = xv.pixel(ih, iw);
                    const T* wp = wt.data() + (ky * k + kx) * Ci * Co;
                    for (std::size_t ci = 0; ci < Ci; ++ci) detail::axpy(op, ip[ci], wp + ci * Co, Co);
                }
            }
        }
    }

    std::vector<Var<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_op<T>(std::move(out), std::move(inputs),
                      [wt = std::move(wt), H, W, Ci, Co, k, Ho, Wo, stride, pad](Node<T>& n) {
        const auto& xv = n.parent(0).value;
        const bool want_x = detail::wants(n, 0), want_w = detail::wants(n, 1);
        const bool has_b = n.parents.size() > 2;
        std::vector<T> dwt(want_w ? wt.size() : 0, T(0));
        Tensor<T>* dx = want_x ? &detail::grad_of(n, 0) : nullptr;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
            for (std::size_t ow = 0; ow < Wo; ++ow) {
                const T* g = n.grad.pixel(oh, ow);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                        const std::size_t base = (ky * k + kx) * Ci * Co;
                        const T* ip = xv.pixel(ih, iw);
                        if (dx) {
                            T* dp = dx->pixel(ih, iw);
                            for (std::size_t ci = 0; ci < Ci; ++ci) dp[ci] += detail::dot(wt.data() + base + ci * Co, g, Co);
                        }
                        if (want_w)
                            for (std::size_t ci = 0; ci < Ci; ++ci) detail::axpy(dwt.data() + base + ci * Co, ip[ci], g, Co);
                    }
                }
                if (has_b && detail::wants(n, 2)) {
                    auto& db = detail::grad_of(n, 2);
                    for (std::size_t co = 0; co < Co; ++co) db[co] += g[co];
                }
            }
        }
        if (want_w) {
            auto& dw = detail::grad_of(n, 1);
            for (std::size_t co = 0; co < Co; ++co)
                for (std::size_t ci = 0; ci < Ci; ++ci)
                    for (std::size_t t = 0; t < k * k; ++t) dw[(co * Ci + ci) * k * k + t] += dwt[(t * Ci + ci) * Co + co];
        }
    });
}

/// Per-channel k x k convolution, stride 1, zero padding (k-1)/2.
/// weight: {C, k, k}; bias: {C}.
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    require_feature_map(x.shape(), "depthwise_conv2d");
    const std::size_t H = x.value().height(), W = x.value().width(), C = x.value().channels();
    const auto& ws = weight.shape();
    if (ws.size() != 3 || ws[0] != C || ws[1] != ws[2] || ws[1] % 2 == 0)
        throw InvalidInputError("depthwise_conv2d: weight must be {C,k,k} with odd k, got " + shape_string(ws));
    const std::size_t k = ws[1];
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
    std::vector<T> wt(k * k * C);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < k * k; ++t) wt[t * C + c] = weight.value()[c * k * k + t];

    Tensor<T> out = Tensor<T>::feature_map(H, W, C);
    const auto& xv = x.value();
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
            T* op = out.pixel(h, w);
            for (std::size_t c = 0; c < C; ++c) op[c] = bias.value()[c];
            for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(h) + dy;
                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::ptrdiff_t dxo = -r; dxo <= r; ++dxo) {
                    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(w) + dxo;
                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                    const T* ip = xv.pixel(ih, iw);
                    const T* wp = wt.data() + ((dy + r) * static_cast<std::ptrdiff_t>(k) + (dxo + r)) * C;
                    for (std::size_t c = 0; c < C; ++c) op[c] += wp[c] * ip[c];
                }
            }
        }

    return make_op<T>(std::move(out), {x, weight, bias}, [wt = std::move(wt), H, W, C, k, r](Node<T>& n) {
        const auto& xv = n.parent(0).value;
        const bool want_x = detail::wants(n, 0), want_w = detail::wants(n, 1), want_b = detail::wants(n, 2);
        std::vector<T> dwt(want_w ? wt.size() : 0, T(0));
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
                const T* g = n.grad.pixel(h, w);
                if (want_b) {
                    auto& db = detail::grad_of(n, 2);
                    for (std::size_t c = 0; c < C; ++c) db[c] += g[c];
                }
                for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(h) + dy;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::ptrdiff_t dxo = -r; dxo <= r; ++dxo) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(w) + dxo;
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                        const std::size_t t = static_cast<std::size_t>((dy + r) * static_cast<std::ptrdiff_t>(k) + (dxo + r));
                        if (want_x) {
                            T* dp = detail::grad_of(n, 0).pixel(ih, iw);
                            for (std::size_t c = 0; c < C; ++c) dp[c] += wt[t * C + c] * g[c];
                        }
                        if (want_w) {
                            const T* ip = xv.pixel(ih, iw);
                            for (std::size_t c = 0; c < C; ++c) dwt[t * C + c] += ip[c] * g[c];
                        }
                    }
                }
            }
        if (want_w) {
            auto& dw = detail::grad_of(n, 1);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t t = 0; t < k * k; ++t) dw[c * k * k + t] += dwt[t * C + c];
        }
    });
}

// ------------------------------------------------------------ normalization

/// Layer normalization of every pixel's channel vector, followed by a
/// per-channel affine map. A 1x1xN map normalizes one N-vector.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6)) {
    require_feature_map(x.shape(), "layer_norm");
    const std::size_t P = x.value().pixels(), C = x.value().channels();
    if (gamma.value().size() != C || beta.value().size() != C)
        throw InvalidInputError("layer_norm: affine size does not match channel count");
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<T> inv_std(P);
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::size_t p = 0; p < P; ++p) {
        const T* xp = xv.data() + p * C;
        T mu = 0;
        for (std::size_t c = 0; c < C; ++c) mu += xp[c];
        mu /= static_cast<T>(C);
        T var = 0;
        for (std::size_t c = 0; c < C; ++c) var += (xp[c] - mu) * (xp[c] - mu);
        var /= static_cast<T>(C);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[p] = is;
        for (std::size_t c = 0; c < C; ++c) {
            const T xh = (xp[c] - mu) * is;
            xhat[p * C + c] = xh;
            out[p * C + c] = gv[c] * xh + bv[c];
        }
    }
    return make_op<T>(std::move(out), {x, gamma, beta},
                      [xhat = std::move(xhat), inv_std = std::move(inv_std), P, C](Node<T>& n) {
        const auto& gv = n.parent(1).value;
        std::vector<T> dxh(C);
        for (std::size_t p = 0; p < P; ++p) {
            const T* g = n.grad.data() + p * C;
            const T* xh = xhat.data() + p * C;
            if (detail::wants(n, 1)) {
                auto& dg = detail::grad_of(n, 1);
                for (std::size_t c = 0; c < C; ++c) dg[c] += g[c] * xh[c];
            }
            if (detail::wants(n, 2)) {
                auto& db = detail::grad_of(n, 2);
                for (std::size_t c = 0; c < C; ++c) db[c] += g[c];
            }
            if (detail::wants(n, 0)) {
                T m1 = 0, m2 = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    dxh[c] = g[c] * gv[c];
                    m1 += dxh[c];
                    m2 += dxh[c] * xh[c];
                }
                m1 /= static_cast<T>(C);
                m2 /= static_cast<T>(C);
                T* dx = detail::grad_of(n, 0).data() + p * C;
                for (std::size_t c = 0; c < C; ++c) dx[c] += inv_std[p] * (dxh[c] - m1 - xh[c] * m2);
            }
        }
    });
}

// ----------------------------------------------------------- channel plumbing

/// SimpleGate: first half of the channels times the second half.
template <typename T>
Var<T> simple_gate(const Var<T>& x) {
    require_feature_map(x.shape(), "simple_gate");
    const std::size_t P = x.value().pixels(), C2 = x.value().channels();
    if (C2 % 2 != 0)
        throw ConfigError("simple_gate: channel count " + std::to_string(C2) + " is odd");
    const std::size_t C = C2 / 2;
    Tensor<T> out = Tensor<T>::feature_map(x.value().height(), x.value().width(), C);
    const auto& xv = x.value();
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t c = 0; c < C; ++c) out[p * C + c] = xv[p * C2 + c] * xv[p * C2 + C + c];
    return make_op<T>(std::move(out), {x}, [P, C, C2](Node<T>& n) {
        const auto& xv = n.parent(0).value;
        auto& dx = detail::grad_of(n, 0);
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t c = 0; c < C; ++c) {
                const T g = n.grad[p * C + c];
                dx[p * C2 + c] += g * xv[p * C2 + C + c];
                dx[p * C2 + C + c] += g * xv[p * C2 + c];
            }
    });
}

/// Global average pooling to a 1x1xC map.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    require_feature_map(x.shape(), "global_avg_pool");
    const std::size_t P = x.value().pixels(), C = x.value().channels();
    Tensor<T> out = Tensor<T>::feature_map(1, 1, C);
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t c = 0; c < C; ++c) out[c] += x.value()[p * C + c];
    const T inv = T(1) / static_cast<T>(P);
    for (auto& v : out.values()) v *= inv;
    return make_op<T>(std::move(out), {x}, [P, C, inv](Node<T>& n) {
        auto& dx = detail::grad_of(n, 0);
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t c = 0; c < C; ++c) dx[p * C + c] += n.grad[c] * inv;
    });
}

/// Scales every channel of x by the matching entry of s (any shape with C entries).
template <typename T>
Var<T> mul_channels(const Var<T>& x, const Var<T>& s) {
    require_feature_map(x.shape(), "mul_channels");
    const std::size_t P = x.value().pixels(), C = x.value().channels();
    if (s.value().size() != C) throw InvalidInputError("mul_channels: scale size does not match channels");
    Tensor<T> out = x.value();
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t c = 0; c < C; ++c) out[p * C + c] *= s.value()[c];
    return make_op<T>(std::move(out), {x, s}, [P, C](Node<T>& n) {
        const auto& xv = n.parent(0).value;
        const auto& sv = n.parent(1).value;
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t c = 0; c < C; ++c) {
                const T g = n.grad[p * C + c];
                if (detail::wants(n, 0)) detail::grad_of(n, 0)[p * C + c] += g * sv[c];
                if (detail::wants(n, 1)) detail::grad_of(n, 1)[c] += g * xv[p * C + c];
            }
    });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw InvalidInputError("concat_channels: no inputs");
    const std::size_t H = xs[0].value().height(), W = xs[0].value().width();
    std::vector<std::size_t> offs;
    std::size_t total = 0;
    for (const auto& x : xs) {
        require_feature_map(x.shape(), "concat_channels");
        if (x.value().height() != H || x.value().width() != W)
            throw InvalidInputError("concat_channels: resolution mismatch " + shape_string(xs[0].shape()) +
                                    " vs " + shape_string(x.shape()));
        offs.push_back(total);
        total += x.value().channels();
    }
    Tensor<T> out = Tensor<T>::feature_map(H, W, total);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::size_t C = xs[i].value().channels();
        for (std::size_t p = 0; p < H * W; ++p)
            std::copy_n(xs[i].value().data() + p * C, C, out.data() + p * total + offs[i]);
    }
    return make_op<T>(std::move(out), xs, [offs, total, P = H * W](Node<T>& n) {
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
            if (!detail::wants(n, i)) continue;
            auto& g = detail::grad_of(n, i);
            const std::size_t C = g.channels();
            for (std::size_t p = 0; p < P; ++p)
                for (std::size_t c = 0; c < C; ++c) g[p * C + c] += n.grad[p * total + offs[i] + c];
        }
    });
}

/// Softmax over contiguous runs of `group` channels at every pixel.
template <typename T>
Var<T> softmax_groups(const Var<T>& x, std::size_t group) {
    require_feature_map(x.shape(), "softmax_groups");
    const std::size_t P = x.value().pixels(), C = x.value().channels();
    if (group == 0 || C % group != 0) throw ConfigError("softmax_groups: channels not divisible by group size");
    Tensor<T> out(x.shape());
    for (std::size_t base = 0; base < P * C; base += group) {
        const T* xp = x.value().data() + base;
        T* op = out.data() + base;
        T mx = xp[0];
        for (std::size_t i = 1; i < group; ++i) mx = std::max(mx, xp[i]);
        T s = 0;
        for (std::size_t i = 0; i < group; ++i) s += (op[i] = std::exp(xp[i] - mx));
        for (std::size_t i = 0; i < group; ++i) op[i] /= s;
    }
    return make_op<T>(std::move(out), {x}, [group](Node<T>& n) {
        auto& dx = detail::grad_of(n, 0);
        for (std::size_t base = 0; base < n.value.size(); base += group) {
            const T* p = n.value.data() + base;
            const T* g = n.grad.data() + base;
            T d = 0;
            for (std::size_t i = 0; i < group; ++i) d += p[i] * g[i];
            for (std::size_t i = 0; i < group; ++i) dx[base + i] += p[i] * (g[i] - d);
        }
    });
}

/// Rearranges {H, W, C*r*r} into {H*r, W*r, C}; input channel c*r*r + i*r + j
/// lands at sub-pixel (i, j).
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t r) {
    require_feature_map(x.shape(), "pixel_shuffle");
    const std::size_t H = x.value().height(), W = x.value().width(), Cin = x.value().channels();
    if (Cin % (r * r) != 0) throw ConfigError("pixel_shuffle: channels not divisible by r^2");
    const std::size_t C = Cin / (r * r);
    Tensor<T> out = Tensor<T>::feature_map(H * r, W * r, C);
    auto index = [=](std::size_t h, std::size_t w, std::size_t c, std::size_t i, std::size_t j) {
        return std::pair{((h * r + i) * (W * r) + (w * r + j)) * C + c, (h * W + w) * Cin + (c * r + i) * r + j};
    };
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < r; ++j) {
                        auto [o, s] = index(h, w, c, i, j);
                        out[o] = x.value()[s];
                    }
    return make_op<T>(std::move(out), {x}, [=](Node<T>& n) {
        auto& dx = detail::grad_of(n, 0);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < r; ++j) {
                            auto [o, s] = index(h, w, c, i, j);
                            dx[s] += n.grad[o];
                        }
    });
}

/// Corner-aligned bilinear resampling; returns x itself when sizes match.
template <typename T>
Var<T> resize_bilinear(const Var<T>& x, std::size_t oh, std::size_t ow) {
    require_feature_map(x.shape(), "resize_bilinear");
    if (oh == 0 || ow == 0) throw InvalidInputError("resize_bilinear: target size must be positive");
    const std::size_t H = x.value().height(), W = x.value().width(), C = x.value().channels();
    if (oh == H && ow == W) return x;

    struct Tap {
        std::size_t i0, i1;
        T f;
    };
    auto taps = [](std::size_t in, std::size_t out) {
        std::vector<Tap> t(out);
        for (std::size_t o = 0; o < out; ++o) {
            const double src = out == 1 ? 0.0 : static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
            std::size_t i0 = std::min(static_cast<std::size_t>(std::floor(src)), in - 1);
            const std::size_t i1 = std::min(i0 + 1, in - 1);
            t[o] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
        }
        return t;
    };
    auto ty = taps(H, oh), tx = taps(W, ow);
    Tensor<T> out = Tensor<T>::feature_map(oh, ow, C);
    const auto& xv = x.value();
    for (std::size_t h = 0; h < oh; ++h)
        for (std::size_t w = 0; w < ow; ++w) {
            const auto& a = ty[h];
            const auto& b = tx[w];
            const T w00 = (1 - a.f) * (1 - b.f), w01 = (1 - a.f) * b.f, w10 = a.f * (1 - b.f), w11 = a.f * b.f;
            T* op = out.pixel(h, w);
            const T *p00 = xv.pixel(a.i0, b.i0), *p01 = xv.pixel(a.i0, b.i1), *p10 = xv.pixel(a.i1, b.i0),
                    *p11 = xv.pixel(a.i1, b.i1);
            for (std::size_t c = 0; c < C; ++c) op[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
        }
    return make_op<T>(std::move(out), {x}, [ty = std::move(ty), tx = std::move(tx), oh, ow, C](Node<T>& n) {
        auto& dx = detail::grad_of(n, 0);
        for (std::size_t h = 0; h < oh; ++h)
            for (std::size_t w = 0; w < ow; ++w) {
                const auto& a = ty[h];
                const auto& b = tx[w];
                const T w00 = (1 - a.f) * (1 - b.f), w01 = (1 - a.f) * b.f, w10 = a.f * (1 - b.f), w11 = a.f * b.f;
                const T* g = n.grad.pixel(h, w);
                T *p00 = dx.pixel(a.i0, b.i0), *p01 = dx.pixel(a.i0, b.i1), *p10 = dx.pixel(a.i1, b.i0),
                  *p11 = dx.pixel(a.i1, b.i1);
                for (std::size_t c = 0; c < C; ++c) {
                    p00[c] += w00 * g[c];
                    p01[c] += w01 * g[c];
                    p10[c] += w10 * g[c];
                    p11[c] += w11 * g[c];
                }
            }
    });
}

/// Top-left crop to h x w.
template <typename T>
Var<T> crop(const Var<T>& x, std::size_t h, std::size_t w) {
    require_feature_map(x.shape(), "crop");
    const std::size_t H = x.value().height(), W = x.value().width(), C = x.value().channels();
    if (h > H || w > W) throw GeometryError("crop: target exceeds input size");
    if (h == H && w == W) return x;
    Tensor<T> out = Tensor<T>::feature_map(h, w, C);
    for (std::size_t i = 0; i < h; ++i) std::copy_n(x.value().pixel(i, 0), w * C, out.pixel(i, 0));
    return make_op<T>(std::move(out), {x}, [h, w, C](Node<T>& n) {
        auto& dx = detail::grad_of(n, 0);
        for (std::size_t i = 0; i < h; ++i) {
            T* d = dx.pixel(i, 0);
            const T* g = n.grad.pixel(i, 0);
            for (std::size_t j = 0; j < w * C; ++j) d[j] += g[j];
        }
    });
}

} // namespace msfs
