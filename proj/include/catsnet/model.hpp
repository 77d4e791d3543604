#pragma once

// Siamese assembly: shared embedding and block stack run twice with the
// sentence roles swapped, masked pooling per branch, then an MLP head on
// the concatenated pooled vectors.

#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "catsnet/blocks.hpp"
#include "catsnet/data.hpp"
#include "catsnet/embedding.hpp"
#include "catsnet/errors.hpp"
#include "catsnet/tensor.hpp"

namespace catsnet {

enum class AttentionMode { kSelf, kCross };
enum class Pooling { kMean, kMax };
enum class CrossDepth { kRaw, kLayered };

struct ModelConfig {
    std::size_t d_model = 300; // matches the 300-D character vectors
    std::size_t n_heads = 6;
    std::size_t n_blocks = 3;
    SublayerVariant sublayer = SublayerVariant::kBiLstm;
    AttentionMode attention = AttentionMode::kCross;
    std::size_t max_len = 50;
    Pooling pooling = Pooling::kMean;
    std::size_t head_hidden = 128;
    CrossDepth cross_depth = CrossDepth::kRaw;
    bool positional_encoding = false;
    double attention_dropout = 0.0;
    bool train_embeddings = true;

    void validate() const {
        if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0)
            throw Error("config: n_heads must divide d_model");
        if (n_blocks < 1) throw Error("config: n_blocks must be >= 1");
        if (max_len < 1) throw Error("config: max_len must be >= 1");
        if (head_hidden < 1) throw Error("config: head_hidden must be >= 1");
        if (sublayer == SublayerVariant::kBiLstm && d_model % 2 != 0)
            throw Error("config: bilstm sublayer needs an even d_model");
        if (attention_dropout < 0.0 || attention_dropout >= 1.0)
            throw Error("config: attention_dropout must lie in [0, 1)");
    }

    AttentionWiring wiring() const {
        return attention == AttentionMode::kSelf ? self_attention_wiring()
                                                 : cross_attention_wiring();
    }
};

struct ModelParams {
    EmbeddingTable embedding;
    std::vector<CrossAttentionBlockParams> blocks;
    MlpParams head; // [2*d_model -> head_hidden -> 2]
};

inline ModelParams init_model(const ModelConfig& config, const Vocabulary& vocab, Rng& rng) {
    config.validate();
    ModelParams params;
    params.embedding = random_embedding_table(vocab, config.d_model, rng, config.train_embeddings);
    for (std::size_t i = 0; i < config.n_blocks; ++i)
        params.blocks.push_back(init_block(config.d_model, config.n_heads, config.sublayer, rng));
    params.head = init_mlp(2 * config.d_model, config.head_hidden, 2, rng);
    return params;
}

// Same, but adopting an already loaded embedding table.
inline ModelParams init_model(const ModelConfig& config, EmbeddingTable table, Rng& rng) {
    config.validate();
    if (table.dim != config.d_model)
        throw ShapeMismatch("init_model: embedding width " + std::to_string(table.dim) +
                            " does not match d_model " + std::to_string(config.d_model));
    ModelParams params;
    params.embedding = std::move(table);
    for (std::size_t i = 0; i < config.n_blocks; ++i)
        params.blocks.push_back(init_block(config.d_model, config.n_heads, config.sublayer, rng));
    params.head = init_mlp(2 * config.d_model, config.head_hidden, 2, rng);
    return params;
}

inline std::vector<std::pair<std::string, Tensor>> named_parameters(const ModelParams& params) {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding.weights", params.embedding.weights);
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        const std::string prefix = "blocks." + std::to_string(i) + ".";
        const CrossAttentionBlockParams& b = params.blocks[i];
        for (std::size_t h = 0; h < b.attn.n_heads(); ++h) {
            out.emplace_back(prefix + "attn.q." + std::to_string(h), b.attn.w_q[h]);
            out.emplace_back(prefix + "attn.k." + std::to_string(h), b.attn.w_k[h]);
            out.emplace_back(prefix + "attn.v." + std::to_string(h), b.attn.w_v[h]);
        }
        out.emplace_back(prefix + "attn.out", b.attn.w_o);
        out.emplace_back(prefix + "norm1.gain", b.norm1.gain);
        out.emplace_back(prefix + "norm1.bias", b.norm1.bias);
        out.emplace_back(prefix + "norm2.gain", b.norm2.gain);
        out.emplace_back(prefix + "norm2.bias", b.norm2.bias);
        if (std::holds_alternative<MlpParams>(b.sublayer)) {
            const MlpParams& m = std::get<MlpParams>(b.sublayer);
            out.emplace_back(prefix + "mlp.w1", m.w1);
            out.emplace_back(prefix + "mlp.b1", m.b1);
            out.emplace_back(prefix + "mlp.w2", m.w2);
            out.emplace_back(prefix + "mlp.b2", m.b2);
        } else {
            const BiLstmSublayer& l = std::get<BiLstmSublayer>(b.sublayer);
            out.emplace_back(prefix + "lstm.fwd.w_x", l.fwd.w_x);
            out.emplace_back(prefix + "lstm.fwd.w_h", l.fwd.w_h);
            out.emplace_back(prefix + "lstm.fwd.b", l.fwd.b);
            out.emplace_back(prefix + "lstm.bwd.w_x", l.bwd.w_x);
            out.emplace_back(prefix + "lstm.bwd.w_h", l.bwd.w_h);
            out.emplace_back(prefix + "lstm.bwd.b", l.bwd.b);
        }
    }
    out.emplace_back("head.w1", params.head.w1);
    out.emplace_back("head.b1", params.head.b1);
    out.emplace_back("head.w2", params.head.w2);
    out.emplace_back("head.b2", params.head.b2);
    return out;
}

inline std::vector<Tensor> trainable_parameters(const ModelParams& params) {
    std::vector<Tensor> out;
    for (auto& [name, tensor] : named_parameters(params))
        if (tensor.requires_grad()) out.push_back(tensor);
    return out;
}

// Unique scalar count; tensors appearing twice (shared) count once.
inline std::size_t count_parameters(const ModelParams& params) {
    std::unordered_set<const detail::Node*> seen;
    std::size_t total = 0;
    for (auto& [name, tensor] : named_parameters(params))
        if (seen.insert(tensor.node().get()).second) total += tensor.size();
    return total;
}

inline ModelParams clone_params(const ModelParams& params) {
    ModelParams copy;
    copy.embedding.dim = params.embedding.dim;
    copy.embedding.trainable = params.embedding.trainable;
    copy.embedding.weights = params.embedding.weights.clone();
    for (const CrossAttentionBlockParams& b : params.blocks) {
        CrossAttentionBlockParams nb;
        for (const Tensor& t : b.attn.w_q) nb.attn.w_q.push_back(t.clone());
        for (const Tensor& t : b.attn.w_k) nb.attn.w_k.push_back(t.clone());
        for (const Tensor& t : b.attn.w_v) nb.attn.w_v.push_back(t.clone());
        nb.attn.w_o = b.attn.w_o.clone();
        nb.norm1 = {b.norm1.gain.clone(), b.norm1.bias.clone()};
        nb.norm2 = {b.norm2.gain.clone(), b.norm2.bias.clone()};
        if (std::holds_alternative<MlpParams>(b.sublayer)) {
            const MlpParams& m = std::get<MlpParams>(b.sublayer);
            nb.sublayer = MlpParams{m.w1.clone(), m.b1.clone(), m.w2.clone(), m.b2.clone()};
        } else {
            const BiLstmSublayer& l = std::get<BiLstmSublayer>(b.sublayer);
            nb.sublayer = BiLstmSublayer{{l.fwd.w_x.clone(), l.fwd.w_h.clone(), l.fwd.b.clone()},
                                         {l.bwd.w_x.clone(), l.bwd.w_h.clone(), l.bwd.b.clone()}};
        }
        copy.blocks.push_back(std::move(nb));
    }
    copy.head = MlpParams{params.head.w1.clone(), params.head.b1.clone(),
                          params.head.w2.clone(), params.head.b2.clone()};
    return copy;
}

// ---------------------------------------------------------------------------
// pooling

namespace detail {

inline Tensor expand_mask(const Tensor& mask, std::size_t d) {
    const std::size_t b = mask.dim(0), n = mask.dim(1);
    std::vector<double> data(b * n * d);
    for (std::size_t r = 0; r < b; ++r)
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t j = 0; j < d; ++j)
                data[(r * n + t) * d + j] = mask.data()[r * n + t];
    return Tensor({b, n, d}, std::move(data));
}

inline Tensor masked_mean_pool(const Tensor& x, const Tensor& mask) {
    const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    Tensor summed = sum_over_axis(mul(x, expand_mask(mask, d)), 1);
    std::vector<double> recip(b * d);
    for (std::size_t r = 0; r < b; ++r) {
        double count = 0;
        for (std::size_t t = 0; t < n; ++t) count += mask.data()[r * n + t];
        for (std::size_t j = 0; j < d; ++j) recip[r * d + j] = 1.0 / count;
    }
    return mul(summed, Tensor({b, d}, std::move(recip)));
}

// Max over valid positions; gradient routes to the first argmax.
inline Tensor masked_max_pool(const Tensor& x, const Tensor& mask) {
    const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    std::vector<double> out(b * d);
    std::vector<std::size_t> argmax(b * d);
    const double* px = x.data().data();
    for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            bool found = false;
            double best = 0.0;
            std::size_t best_t = 0;
            for (std::size_t t = 0; t < n; ++t) {
                if (mask.data()[r * n + t] == 0.0) continue;
                const double v = px[(r * n + t) * d + j];
                if (!found || v > best) {
                    best = v;
                    best_t = t;
                    found = true;
                }
            }
            out[r * d + j] = best;
            argmax[r * d + j] = best_t;
        }
    }
    Node* xn = x.node().get();
    return make_op(Shape{b, d}, std::move(out), {x},
                   [=, argmax = std::move(argmax)](Node& self) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       const double* g = self.grad.data();
                       for (std::size_t r = 0; r < b; ++r)
                           for (std::size_t j = 0; j < d; ++j)
                               xn->grad[(r * n + argmax[r * d + j]) * d + j] += g[r * d + j];
                   });
}

// Sinusoidal position table [n, d]; broadcast-added over the batch.
inline Tensor sinusoidal_encoding(std::size_t n, std::size_t d) {
    std::vector<double> pe(n * d);
    for (std::size_t pos = 0; pos < n; ++pos)
        for (std::size_t j = 0; j < d; ++j) {
            const double exponent = static_cast<double>(j - j % 2) / static_cast<double>(d);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
            pe[pos * d + j] = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    return Tensor({n, d}, std::move(pe));
}

inline void check_nonempty_sentences(const Tensor& mask, const char* side) {
    const std::size_t b = mask.dim(0), n = mask.dim(1);
    for (std::size_t r = 0; r < b; ++r) {
        bool any = false;
        for (std::size_t t = 0; t < n; ++t) any = any || mask.data()[r * n + t] != 0.0;
        if (!any)
            throw EmptySentence(std::string("forward: empty sentence ") + side + " in batch row " +
                                std::to_string(r));
    }
}

} // namespace detail

struct SiameseOutput {
    Tensor pooled_a; // [b, d_model]
    Tensor pooled_b;
    Tensor logits;        // [b, 2]
    Tensor probabilities; // [b, 2], rows sum to 1
};

// Branch A embeds sentence a and attends toward sentence b; branch B runs
// the same parameter objects with the roles swapped, so every gradient
// accumulates contributions from both branches.
inline SiameseOutput forward(const PairBatch& batch, const ModelParams& params,
                             const ModelConfig& config, Rng* dropout_rng = nullptr) {
    detail::check_nonempty_sentences(batch.mask_a, "a");
    detail::check_nonempty_sentences(batch.mask_b, "b");

    Tensor x_a = embed(batch.ids_a, params.embedding);
    Tensor x_b = embed(batch.ids_b, params.embedding);
    if (config.positional_encoding) {
        x_a = add(x_a, detail::sinusoidal_encoding(batch.ids_a.len, config.d_model));
        x_b = add(x_b, detail::sinusoidal_encoding(batch.ids_b.len, config.d_model));
    }

    const AttentionWiring wiring = config.wiring();
    const double p = config.attention_dropout;
    Tensor out_a, out_b;
    if (config.cross_depth == CrossDepth::kLayered) {
        auto [a, b] = block_stack_layered(x_a, x_b, params.blocks, wiring, batch.mask_a,
                                          batch.mask_b, p, dropout_rng);
        out_a = a;
        out_b = b;
    } else {
        out_a = block_stack(x_a, x_b, params.blocks, wiring, batch.mask_a, batch.mask_b, p,
                            dropout_rng);
        out_b = block_stack(x_b, x_a, params.blocks, wiring, batch.mask_b, batch.mask_a, p,
                            dropout_rng);
    }

    SiameseOutput result;
    if (config.pooling == Pooling::kMean) {
        result.pooled_a = detail::masked_mean_pool(out_a, batch.mask_a);
        result.pooled_b = detail::masked_mean_pool(out_b, batch.mask_b);
    } else {
        result.pooled_a = detail::masked_max_pool(out_a, batch.mask_a);
        result.pooled_b = detail::masked_max_pool(out_b, batch.mask_b);
    }
    result.logits = mlp_forward(concat_last_axis(result.pooled_a, result.pooled_b), params.head);
    result.probabilities = softmax(result.logits, 1);
    return result;
}

// 1 iff P(similar) >= threshold; a tie at the threshold reads as similar.
inline std::vector<int> predict(const PairBatch& batch, const ModelParams& params,
                                const ModelConfig& config, double threshold = 0.5) {
    SiameseOutput out = forward(batch, params, config);
    std::vector<int> labels(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
        labels[i] = out.probabilities.data()[i * 2 + 1] >= threshold ? 1 : 0;
    return labels;
}

} // namespace catsnet
