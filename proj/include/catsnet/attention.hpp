#pragma once

// Scaled dot-product attention, softmax(Q K^T / sqrt(d_k)) V, with padding
// masks, plus the multi-head form whose Q/K/V projections can each read
// either of two input sequences (cross-attention wiring).

#include <cmath>
#include <vector>

#include "catsnet/errors.hpp"
#include "catsnet/random.hpp"
#include "catsnet/tensor.hpp"

namespace catsnet {

// Additive score for masked-out keys. Finite so gradients stay finite, yet
// large enough that exp() underflows to exactly zero after max subtraction.
inline constexpr double kMaskedScore = -1e9;

enum class Source { kSelf, kOther };

struct AttentionWiring {
    Source q = Source::kSelf;
    Source k = Source::kOther;
    Source v = Source::kOther;
};

inline AttentionWiring self_attention_wiring() {
    return {Source::kSelf, Source::kSelf, Source::kSelf};
}
inline AttentionWiring cross_attention_wiring() {
    return {Source::kSelf, Source::kOther, Source::kOther};
}

struct AttentionParams {
    std::vector<Tensor> w_q, w_k, w_v; // per head, each [d_model, d_k]
    Tensor w_o;                        // [n_heads * d_k, d_model]

    std::size_t n_heads() const { return w_q.size(); }
    std::size_t d_model() const { return w_q.at(0).dim(0); }
};

inline AttentionParams init_attention(std::size_t d_model, std::size_t n_heads, Rng& rng) {
    if (n_heads == 0 || d_model % n_heads != 0)
        throw ShapeMismatch("attention: n_heads must divide d_model (" +
                            std::to_string(n_heads) + " vs " + std::to_string(d_model) + ")");
    const std::size_t d_k = d_model / n_heads;
    AttentionParams p;
    for (std::size_t h = 0; h < n_heads; ++h) {
        p.w_q.push_back(fan_in_uniform({d_model, d_k}, d_model, rng));
        p.w_k.push_back(fan_in_uniform({d_model, d_k}, d_model, rng));
        p.w_v.push_back(fan_in_uniform({d_model, d_k}, d_model, rng));
    }
    p.w_o = fan_in_uniform({n_heads * d_k, d_model}, n_heads * d_k, rng);
    return p;
}

namespace detail {

inline void check_mask(const Tensor& mask, std::size_t b, std::size_t n, const char* where) {
    if (mask.shape() != Shape{b, n})
        throw ShapeMismatch(std::string(where) + ": mask shape " + shape_str(mask.shape()) +
                            " does not match sequence [" + std::to_string(b) + "," +
                            std::to_string(n) + "]");
    for (std::size_t row = 0; row < b; ++row) {
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) any = any || mask.data()[row * n + j] != 0.0;
        if (!any)
            throw AllMasked(std::string(where) + ": batch row " + std::to_string(row) +
                            " has no valid positions");
    }
}

// [b, n_q, n_k] additive bias, 0 on valid keys, kMaskedScore on padding.
inline Tensor mask_bias(const Tensor& key_mask, std::size_t n_q) {
    const std::size_t b = key_mask.dim(0), n_k = key_mask.dim(1);
    std::vector<double> bias(b * n_q * n_k);
    for (std::size_t row = 0; row < b; ++row)
        for (std::size_t i = 0; i < n_q; ++i)
            for (std::size_t j = 0; j < n_k; ++j)
                bias[(row * n_q + i) * n_k + j] =
                    key_mask.data()[row * n_k + j] != 0.0 ? 0.0 : kMaskedScore;
    return Tensor({b, n_q, n_k}, std::move(bias));
}

// Inverted dropout mask as a constant factor tensor.
inline Tensor dropout_mask(const Shape& shape, double p, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> m(shape_size(shape));
    const double keep = 1.0 / (1.0 - p);
    for (double& v : m) v = u(rng) < p ? 0.0 : keep;
    return Tensor(shape, std::move(m));
}

} // namespace detail

struct AttentionResult {
    Tensor output;  // [b, n_q, d_v]
    Tensor weights; // [b, n_q, n_k]
};

inline AttentionResult scaled_dot_attention_full(const Tensor& q, const Tensor& k,
                                                 const Tensor& v, const Tensor& key_mask,
                                                 double dropout_p = 0.0, Rng* rng = nullptr) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw ShapeMismatch("attention: Q, K, V must be rank 3");
    const std::size_t b = q.dim(0), d_k = q.dim(2), n_k = k.dim(1);
    if (k.dim(0) != b || v.dim(0) != b)
        throw ShapeMismatch("attention: batch sizes differ");
    if (k.dim(2) != d_k)
        throw ShapeMismatch("attention: Q and K widths differ");
    if (v.dim(1) != n_k)
        throw ShapeMismatch("attention: K and V sequence lengths differ");
    detail::check_mask(key_mask, b, n_k, "attention");

    Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(d_k)));
    Tensor weights = softmax(add(scores, detail::mask_bias(key_mask, q.dim(1))), 2);
    Tensor applied = weights;
    if (dropout_p > 0.0 && rng)
        applied = mul(weights, detail::dropout_mask(weights.shape(), dropout_p, *rng));
    return {matmul(applied, v), weights};
}

inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const Tensor& key_mask, double dropout_p = 0.0,
                                   Rng* rng = nullptr) {
    return scaled_dot_attention_full(q, k, v, key_mask, dropout_p, rng).output;
}

// Per head: project the wired sources, attend with the key source's mask,
// then concatenate heads and apply the output projection. Output length
// follows the query source.
inline Tensor multi_head_cross_attention(const Tensor& x_self, const Tensor& x_other,
                                         const AttentionParams& params,
                                         const AttentionWiring& wiring, const Tensor& mask_self,
                                         const Tensor& mask_other, double dropout_p = 0.0,
                                         Rng* rng = nullptr) {
    if (wiring.k != wiring.v)
        throw WiringInvalid("attention: K and V must read the same sequence");
    if (x_self.rank() != 3 || x_other.rank() != 3)
        throw ShapeMismatch("attention: inputs must be rank 3");
    const std::size_t d_model = params.d_model();
    if (x_self.dim(2) != d_model || x_other.dim(2) != d_model)
        throw ShapeMismatch("attention: input width does not match parameters");

    const Tensor& q_in = wiring.q == Source::kSelf ? x_self : x_other;
    const Tensor& kv_in = wiring.k == Source::kSelf ? x_self : x_other;
    const Tensor& key_mask = wiring.k == Source::kSelf ? mask_self : mask_other;

    Tensor heads;
    for (std::size_t h = 0; h < params.n_heads(); ++h) {
        Tensor out = scaled_dot_attention(matmul(q_in, params.w_q[h]),
                                          matmul(kv_in, params.w_k[h]),
                                          matmul(kv_in, params.w_v[h]), key_mask, dropout_p, rng);
        heads = h == 0 ? out : concat_last_axis(heads, out);
    }
    return matmul(heads, params.w_o);
}

} // namespace catsnet
