#pragma once

#include <vector>

#include "istd/tensor.hpp"

namespace istd::simam {

struct SimamConfig {
    /// Regularizer added to the channel variance; must be strictly positive.
    double lambda = 1e-4;
};

/// Minimal energy of every neuron, same layout as the feature map.
template <typename T>
struct EnergyMap {
    Shape shape;
    std::vector<T> values;
};

/// Per (batch, channel) plane with M = H*W neurons, mean mu and population variance var (both
/// including the neuron itself): e = 4 (var + lambda) / ((t - mu)^2 + 2 var + 2 lambda).
template <typename T>
EnergyMap<T> energy(const Tensor<T>& feature, const SimamConfig& cfg);

/// X * sigmoid(1 / E). Gradients flow through mu and var. Adds no parameters.
template <typename T>
Tensor<T> apply(const Tensor<T>& feature, const SimamConfig& cfg);

/// Single-channel (n, 1, h, w) map: mean over channels of 1/e, min-max normalized to [0, 1]
/// per image. A flat map normalizes to all zeros.
template <typename T>
Tensor<T> energy_heatmap(const Tensor<T>& feature, const SimamConfig& cfg);

}  // namespace istd::simam
