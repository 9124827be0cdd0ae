#pragma once

#include <cmath>
#include <string>

#include "msfs/ops.hpp"
#include "msfs/params.hpp"

namespace msfs {

/// Largest token count for which the full N x N weight matrix is kept for
/// backpropagation. Inference streams one row at a time and is not limited.
inline constexpr std::size_t kDefaultMaxAttentionTokens = 4096;

namespace detail {

inline void attention_shapes(const Shape& q, const Shape& k, const Shape& v, std::size_t& n, std::size_t& c) {
    auto flat = [](const Shape& s, std::size_t& rows, std::size_t& cols) {
        if (s.size() == 2) {
            rows = s[0];
            cols = s[1];
        } else if (s.size() == 3) {
            rows = s[0] * s[1];
            cols = s[2];
        } else {
            throw InvalidInputError("attention: expected N x C tokens or an H x W x C map, got " + shape_string(s));
        }
    };
    std::size_t nk, ck, nv, cv;
    flat(q, n, c);
    flat(k, nk, ck);
    flat(v, nv, cv);
    if (n == 0 || c == 0) throw InvalidInputError("attention: empty input");
    if (nk != n || nv != n || ck != c || cv != c)
        throw InvalidInputError("attention: Q, K, V shapes disagree: " + shape_string(q) + ", " + shape_string(k) +
                                ", " + shape_string(v));
}

template <typename T>
std::vector<T> transpose_tokens(const Tensor<T>& x, std::size_t n, std::size_t c) {
    std::vector<T> t(n * c);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) t[j * n + i] = x[i * c + j];
    return t;
}

// Fills row with Q_i K^T / beta and turns it into a softmax distribution.
template <typename T>
void attention_row(T* row, const T* q, const std::vector<T>& kt, std::size_t n, std::size_t c, T inv_beta) {
    std::fill(row, row + n, T(0));
    for (std::size_t j = 0; j < c; ++j) axpy(row, q[j] * inv_beta, kt.data() + j * n, n);
    const T mx = max_of(row, n);
    if (!std::isfinite(sum_of(row, n)) || !std::isfinite(mx)) throw NumericalError("attention: non-finite logits");
    for (std::size_t j = 0; j < n; ++j) row[j] -= mx;
    exp_nonpositive(row, n);
    const T s = sum_of(row, n);
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

} // namespace detail

/// Row-softmax(Q K^T / beta) as an explicit N x N matrix.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, T beta) {
    std::size_t n, c;
    detail::attention_shapes(q.shape(), k.shape(), k.shape(), n, c);
    if (!(beta > 0)) throw InvalidInputError("attention: beta must be positive");
    auto kt = detail::transpose_tokens(k, n, c);
    Tensor<T> p({n, n});
    for (std::size_t i = 0; i < n; ++i) detail::attention_row(p.data() + i * n, q.data() + i * c, kt, n, c, T(1) / beta);
    return p;
}

/// softmax(Q K^T / beta) V over N tokens of width C. Q, K, V are N x C or
/// H x W x C maps (pixels are tokens); beta is a one-element tensor.
template <typename T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& beta,
                            std::size_t max_tokens = kDefaultMaxAttentionTokens) {
    std::size_t n, c;
    detail::attention_shapes(q.shape(), k.shape(), v.shape(), n, c);
    if (beta.value().size() != 1) throw InvalidInputError("attention: beta must be a scalar");
    const T b = beta.value()[0];
    if (!(b > 0)) throw NumericalError("attention: beta must be positive, got " + std::to_string(b));
    const T inv_beta = T(1) / b;
    const bool keep = grad_recording() && (q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                                           beta.requires_grad());
    if (keep && n > max_tokens)
        throw InvalidInputError("attention: " + std::to_string(n) + " tokens exceed the training limit of " +
                                std::to_string(max_tokens) + " (use smaller patches or raise max_tokens)");

    auto kt = detail::transpose_tokens(k.value(), n, c);
    auto vt = detail::transpose_tokens(v.value(), n, c);
    Tensor<T> out(q.shape());
    std::vector<T> probs(keep ? n * n : n);
    for (std::size_t i = 0; i < n; ++i) {
        T* row = keep ? probs.data() + i * n : probs.data();
        detail::attention_row(row, q.value().data() + i * c, kt, n, c, inv_beta);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = detail::dot(row, vt.data() + j * n, n);
    }
    if (!keep) return Var<T>::constant(std::move(out));

    return make_op<T>(std::move(out), {q, k, v, beta},
                      [probs = std::move(probs), kt = std::move(kt), vt = std::move(vt), n, c, inv_beta](Node<T>& nd) {
        const bool want_q = detail::wants(nd, 0), want_k = detail::wants(nd, 1), want_v = detail::wants(nd, 2),
                   want_b = detail::wants(nd, 3);
        const auto& qv = nd.parent(0).value;
        std::vector<T> dkt(want_k ? n * c : 0, T(0)), dvt(want_v ? n * c : 0, T(0));
        std::vector<T> ds(n), dqi(c);
        T beta_acc = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const T* p = probs.data() + i * n;
            const T* g = nd.grad.data() + i * c;
            const T* qi = qv.data() + i * c;
            std::fill(ds.begin(), ds.end(), T(0));
            for (std::size_t j = 0; j < c; ++j) detail::axpy(ds.data(), g[j], vt.data() + j * n, n);
            if (want_v)
                for (std::size_t j = 0; j < c; ++j) detail::axpy(dvt.data() + j * n, g[j], p, n);
            const T rowdot = detail::dot(p, ds.data(), n);
            for (std::size_t j = 0; j < n; ++j) ds[j] = p[j] * (ds[j] - rowdot);
            // dS K gives the query gradient; contracted with q_i it also
            // gives sum_j dS_ij * (q_i . k_j), which is all beta needs.
            if (want_q || want_b)
                for (std::size_t j = 0; j < c; ++j) dqi[j] = detail::dot(ds.data(), kt.data() + j * n, n);
            if (want_b)
                for (std::size_t j = 0; j < c; ++j) beta_acc += qi[j] * dqi[j];
            if (want_q) {
                T* dq = detail::grad_of(nd, 0).data() + i * c;
                for (std::size_t j = 0; j < c; ++j) dq[j] += dqi[j] * inv_beta;
            }
            if (want_k)
                for (std::size_t j = 0; j < c; ++j) detail::axpy(dkt.data() + j * n, qi[j] * inv_beta, ds.data(), n);
        }
        if (want_k) {
            auto& dk = detail::grad_of(nd, 1);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) dk[i * c + j] += dkt[j * n + i];
        }
        if (want_v) {
            auto& dv = detail::grad_of(nd, 2);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) dv[i * c + j] += dvt[j * n + i];
        }
        if (want_b) detail::grad_of(nd, 3)[0] += -beta_acc * inv_beta * inv_beta;
    });
}

/// One cross-attention direction: queries from the source stream, keys and
/// values from the target stream.
template <typename T>
struct AttentionParams {
    ConvParams<T> query, key, value;
    Var<T> beta;

    static AttentionParams create(ParamBuilder<T> b, std::size_t c) {
        return {b.conv("q", c, c, 1), b.conv("k", c, c, 1), b.conv("v", c, c, 1),
                b.constant("beta", {1}, static_cast<T>(std::sqrt(static_cast<double>(c))))};
    }
};

/// Per-channel weights of the two attention directions; start at zero.
template <typename T>
struct FusionScales {
    Var<T> low;
    Var<T> high;

    static FusionScales create(ParamBuilder<T> b, std::size_t c) {
        return {b.constant("lambda_low", {c}, T(0)), b.constant("lambda_high", {c}, T(0))};
    }
};

template <typename T>
struct FCAMParams {
    LayerNormParams<T> norm_low, norm_high;
    AttentionParams<T> low_to_high;  // queries from X_L, keys/values from X_H
    AttentionParams<T> high_to_low;  // queries from X_H, keys/values from X_L
    FusionScales<T> scales;

    static FCAMParams create(ParamBuilder<T> b, std::size_t c) {
        return {b.norm("norm_low", c), b.norm("norm_high", c), AttentionParams<T>::create(b.scope("l2h"), c),
                AttentionParams<T>::create(b.scope("h2l"), c), FusionScales<T>::create(b, c)};
    }
};

template <typename T>
Var<T> cross_attend(const AttentionParams<T>& p, const Var<T>& source, const Var<T>& target, std::size_t max_tokens) {
    return scaled_dot_attention(p.query(source), p.key(target), p.value(target), p.beta, max_tokens);
}

/// Bidirectional cross-attention between the low- and high-frequency streams,
/// fused with per-channel scales.
template <typename T>
Var<T> fcam(const Var<T>& low, const Var<T>& high, const FCAMParams<T>& p,
            std::size_t max_tokens = kDefaultMaxAttentionTokens) {
    require_feature_map(low.shape(), "fcam");
    if (low.shape() != high.shape())
        throw ConfigError("fcam: stream shapes differ: " + shape_string(low.shape()) + " vs " + shape_string(high.shape()));
    auto nl = p.norm_low(low);
    auto nh = p.norm_high(high);
    auto l2h = cross_attend(p.low_to_high, nl, nh, max_tokens);
    auto h2l = cross_attend(p.high_to_low, nh, nl, max_tokens);
    return add(mul_channels(l2h, p.scales.low), mul_channels(h2l, p.scales.high));
}

} // namespace msfs
