#pragma once

#include <random>

#include "catsnet/tensor.hpp"

namespace catsnet {

using Rng = std::mt19937_64;

inline Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng,
                             bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> values(detail::shape_size(shape));
    for (double& v : values) v = dist(rng);
    return Tensor(std::move(shape), std::move(values), requires_grad);
}

inline Tensor normal_tensor(Shape shape, double mean, double stddev, Rng& rng,
                            bool requires_grad = false) {
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<double> values(detail::shape_size(shape));
    for (double& v : values) v = dist(rng);
    return Tensor(std::move(shape), std::move(values), requires_grad);
}

// fan-in scaled uniform init, k = 1/sqrt(fan_in)
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng,
                             bool requires_grad = true) {
    const double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return uniform_tensor(std::move(shape), -k, k, rng, requires_grad);
}

} // namespace catsnet
