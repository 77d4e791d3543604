#pragma once

// Central finite-difference verification of reverse-mode gradients.
// Reported error is max over coordinates of
//   |analytic - (f(x+h*e_i) - f(x-h*e_i)) / 2h| / max(1, |analytic|).

#include <functional>
#include <vector>

#include "catsnet/tensor.hpp"

namespace catsnet {

inline double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    Tensor probe = x.clone();
    probe.set_requires_grad(true);
    Tensor loss = f(probe);
    loss.backward();
    const std::vector<double> analytic = probe.grad();

    Tensor plain = x.clone();
    plain.set_requires_grad(false);
    double max_err = 0.0;
    for (std::size_t i = 0; i < plain.size(); ++i) {
        const double orig = plain.data()[i];
        plain.data()[i] = orig + h;
        const double fp = f(plain).item();
        plain.data()[i] = orig - h;
        const double fm = f(plain).item();
        plain.data()[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

// Same check against every coordinate of a parameter list. The loss
// closure must rebuild its graph each call and read the parameters' live
// data, so in-place perturbation re-evaluates the whole model.
inline double gradcheck_params(const std::function<Tensor()>& loss_fn,
                               const std::vector<Tensor>& params, double h) {
    zero_grads(params);
    loss_fn().backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0));

    double max_err = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p.data()[i];
            p.data()[i] = orig + h;
            const double fp = loss_fn().item();
            p.data()[i] = orig - h;
            const double fm = loss_fn().item();
            p.data()[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

} // namespace catsnet
