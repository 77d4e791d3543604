#pragma once

// Cross-attention block: multi-head attention with a residual connection
// and layer norm, then a position-wise sublayer (MLP or Bi-LSTM) with its
// own residual and norm. Post-norm order throughout.

#include <variant>
#include <vector>

#include "catsnet/attention.hpp"
#include "catsnet/errors.hpp"
#include "catsnet/recurrent.hpp"
#include "catsnet/tensor.hpp"

namespace catsnet {

inline constexpr double kLayerNormEps = 1e-5;

enum class SublayerVariant { kMlp, kBiLstm };

struct NormParams {
    Tensor gain;
    Tensor bias;
};

inline NormParams init_norm(std::size_t d, bool requires_grad = true) {
    return {Tensor::full({d}, 1.0, requires_grad), Tensor::zeros({d}, requires_grad)};
}

struct MlpParams {
    Tensor w1; // [d_in, d_hidden]
    Tensor b1; // [d_hidden]
    Tensor w2; // [d_hidden, d_out]
    Tensor b2; // [d_out]
};

inline MlpParams init_mlp(std::size_t d_in, std::size_t d_hidden, std::size_t d_out, Rng& rng) {
    MlpParams p;
    p.w1 = fan_in_uniform({d_in, d_hidden}, d_in, rng);
    p.b1 = Tensor::zeros({d_hidden}, true);
    p.w2 = fan_in_uniform({d_hidden, d_out}, d_hidden, rng);
    p.b2 = Tensor::zeros({d_out}, true);
    return p;
}

// w2 . relu(w1 . x + b1) + b2, applied per position
inline Tensor mlp_forward(const Tensor& x, const MlpParams& p) {
    return add(matmul(relu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

struct BiLstmSublayer {
    LstmParams fwd;
    LstmParams bwd;
};

using SublayerParams = std::variant<MlpParams, BiLstmSublayer>;

struct CrossAttentionBlockParams {
    AttentionParams attn;
    NormParams norm1;
    NormParams norm2;
    SublayerParams sublayer;
};

// d_ff follows the 4x transformer convention; the Bi-LSTM hidden size is
// d_model/2 so both directions concatenated are residual-compatible.
inline CrossAttentionBlockParams init_block(std::size_t d_model, std::size_t n_heads,
                                            SublayerVariant variant, Rng& rng) {
    CrossAttentionBlockParams p;
    p.attn = init_attention(d_model, n_heads, rng);
    p.norm1 = init_norm(d_model);
    p.norm2 = init_norm(d_model);
    if (variant == SublayerVariant::kMlp) {
        p.sublayer = init_mlp(d_model, 4 * d_model, d_model, rng);
    } else {
        if (d_model % 2 != 0)
            throw ShapeMismatch("bilstm sublayer needs an even d_model, got " +
                                std::to_string(d_model));
        const std::size_t d_h = d_model / 2;
        p.sublayer = BiLstmSublayer{init_lstm(d_model, d_h, rng), init_lstm(d_model, d_h, rng)};
    }
    return p;
}

inline Tensor cross_attention_block(const Tensor& x_self, const Tensor& x_other,
                                    const CrossAttentionBlockParams& params,
                                    const AttentionWiring& wiring, const Tensor& mask_self,
                                    const Tensor& mask_other, double dropout_p = 0.0,
                                    Rng* rng = nullptr) {
    Tensor attended = multi_head_cross_attention(x_self, x_other, params.attn, wiring, mask_self,
                                                 mask_other, dropout_p, rng);
    Tensor a = layer_norm(add(x_self, attended), params.norm1.gain, params.norm1.bias,
                          kLayerNormEps);
    Tensor sub = std::holds_alternative<MlpParams>(params.sublayer)
                     ? mlp_forward(a, std::get<MlpParams>(params.sublayer))
                     : bilstm(a, std::get<BiLstmSublayer>(params.sublayer).fwd,
                              std::get<BiLstmSublayer>(params.sublayer).bwd, mask_self);
    return layer_norm(add(a, sub), params.norm2.gain, params.norm2.bias, kLayerNormEps);
}

// Sequential stack; every depth attends to the same raw other-sentence
// sequence. The alternative (lockstep layered evolution of both branches)
// lives in block_stack_layered.
inline Tensor block_stack(const Tensor& x_self, const Tensor& x_other,
                          const std::vector<CrossAttentionBlockParams>& blocks,
                          const AttentionWiring& wiring, const Tensor& mask_self,
                          const Tensor& mask_other, double dropout_p = 0.0, Rng* rng = nullptr) {
    if (blocks.empty()) throw EmptyStack("block_stack: no blocks");
    Tensor out = x_self;
    for (const CrossAttentionBlockParams& block : blocks)
        out = cross_attention_block(out, x_other, block, wiring, mask_self, mask_other, dropout_p,
                                    rng);
    return out;
}

// Both branches advance together; block i+1 of one branch attends to the
// other branch's block-i output.
inline std::pair<Tensor, Tensor> block_stack_layered(
    const Tensor& x_a, const Tensor& x_b, const std::vector<CrossAttentionBlockParams>& blocks,
    const AttentionWiring& wiring, const Tensor& mask_a, const Tensor& mask_b,
    double dropout_p = 0.0, Rng* rng = nullptr) {
    if (blocks.empty()) throw EmptyStack("block_stack_layered: no blocks");
    Tensor a = x_a, b = x_b;
    for (const CrossAttentionBlockParams& block : blocks) {
        Tensor next_a = cross_attention_block(a, b, block, wiring, mask_a, mask_b, dropout_p, rng);
        Tensor next_b = cross_attention_block(b, a, block, wiring, mask_b, mask_a, dropout_p, rng);
        a = next_a;
        b = next_b;
    }
    return {a, b};
}

} // namespace catsnet
