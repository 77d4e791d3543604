#pragma once

// LSTM cell and bidirectional LSTM over right-padded batches. Gate blocks
// inside W_x, W_h and b are ordered (input, forget, candidate, output);
// serialization relies on that order.

#include <utility>
#include <vector>

#include "catsnet/errors.hpp"
#include "catsnet/random.hpp"
#include "catsnet/tensor.hpp"

namespace catsnet {

struct LstmParams {
    Tensor w_x; // [d_in, 4*d_h]
    Tensor w_h; // [d_h, 4*d_h]
    Tensor b;   // [4*d_h]

    std::size_t hidden() const { return w_h.dim(0); }
    std::size_t input() const { return w_x.dim(0); }
};

// U(-k, k) with k = 1/sqrt(d_h); forget-gate bias starts at 1.
inline LstmParams init_lstm(std::size_t d_in, std::size_t d_h, Rng& rng) {
    const double k = 1.0 / std::sqrt(static_cast<double>(d_h));
    LstmParams p;
    p.w_x = uniform_tensor({d_in, 4 * d_h}, -k, k, rng, true);
    p.w_h = uniform_tensor({d_h, 4 * d_h}, -k, k, rng, true);
    p.b = Tensor::zeros({4 * d_h}, true);
    for (std::size_t j = d_h; j < 2 * d_h; ++j) p.b.data()[j] = 1.0;
    return p;
}

// i,f,o = sigmoid gates, g = tanh candidate;
// c_t = f*c_prev + i*g, h_t = o*tanh(c_t).
inline std::pair<Tensor, Tensor> lstm_cell(const Tensor& x_t, const Tensor& h_prev,
                                           const Tensor& c_prev, const LstmParams& p) {
    const std::size_t d_h = p.hidden();
    if (x_t.rank() != 2 || x_t.dim(1) != p.input())
        throw ShapeMismatch("lstm_cell: input width does not match W_x");
    if (h_prev.shape() != Shape{x_t.dim(0), d_h} || c_prev.shape() != h_prev.shape())
        throw ShapeMismatch("lstm_cell: state shapes do not match");
    Tensor z = add(add(matmul(x_t, p.w_x), matmul(h_prev, p.w_h)), p.b);
    Tensor i = sigmoid(slice_last_axis(z, 0, d_h));
    Tensor f = sigmoid(slice_last_axis(z, d_h, d_h));
    Tensor g = tanh(slice_last_axis(z, 2 * d_h, d_h));
    Tensor o = sigmoid(slice_last_axis(z, 3 * d_h, d_h));
    Tensor c = add(mul(f, c_prev), mul(i, g));
    Tensor h = mul(o, tanh(c));
    return {h, c};
}

namespace detail {

// mask column t broadcast to [b, width], as a constant factor
inline Tensor mask_column(const Tensor& mask, std::size_t t, std::size_t width, bool invert) {
    const std::size_t b = mask.dim(0), n = mask.dim(1);
    std::vector<double> data(b * width);
    for (std::size_t row = 0; row < b; ++row) {
        const double m = mask.data()[row * n + t] != 0.0 ? 1.0 : 0.0;
        const double v = invert ? 1.0 - m : m;
        for (std::size_t j = 0; j < width; ++j) data[row * width + j] = v;
    }
    return Tensor({b, width}, std::move(data));
}

// One direction over the padded batch. States freeze on padded steps, so
// with right-padding the reverse direction effectively starts at the last
// valid token of each row.
inline std::vector<Tensor> lstm_direction(const Tensor& x, const LstmParams& p,
                                          const Tensor& mask, bool reverse) {
    const std::size_t b = x.dim(0), n = x.dim(1), d_h = p.hidden();
    Tensor h = Tensor::zeros({b, d_h});
    Tensor c = Tensor::zeros({b, d_h});
    std::vector<Tensor> outputs(n);
    for (std::size_t step = 0; step < n; ++step) {
        const std::size_t t = reverse ? n - 1 - step : step;
        auto [h_new, c_new] = lstm_cell(time_step(x, t), h, c, p);
        Tensor keep = mask_column(mask, t, d_h, true);
        Tensor take = mask_column(mask, t, d_h, false);
        h = add(mul(h_new, take), mul(h, keep));
        c = add(mul(c_new, take), mul(c, keep));
        outputs[t] = h;
    }
    return outputs;
}

} // namespace detail

// Forward and backward passes over valid positions; per position the two
// hidden states are concatenated. Padded positions output zero.
inline Tensor bilstm(const Tensor& x, const LstmParams& fwd, const LstmParams& bwd,
                     const Tensor& mask) {
    if (x.rank() != 3) throw ShapeMismatch("bilstm: expected [batch, seq, features]");
    const std::size_t b = x.dim(0), n = x.dim(1);
    if (mask.shape() != Shape{b, n}) throw ShapeMismatch("bilstm: mask shape mismatch");
    if (fwd.hidden() != bwd.hidden() || fwd.input() != bwd.input())
        throw ShapeMismatch("bilstm: direction parameter shapes differ");
    auto fwd_states = detail::lstm_direction(x, fwd, mask, false);
    auto bwd_states = detail::lstm_direction(x, bwd, mask, true);
    std::vector<Tensor> steps(n);
    for (std::size_t t = 0; t < n; ++t) {
        Tensor merged = concat_last_axis(fwd_states[t], bwd_states[t]);
        steps[t] = mul(merged, detail::mask_column(mask, t, 2 * fwd.hidden(), false));
    }
    return stack_steps(steps);
}

} // namespace catsnet
