#pragma once

#include <span>
#include <vector>

#include "istd/tensor.hpp"

namespace istd {

struct Conv2dOptions {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

/// Cross-correlation. weight is (c_out, c_in / groups, k, k); bias, when defined, is (1, c_out, 1, 1).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, Conv2dOptions opt) {
    return conv2d(input, weight, Tensor<T>{}, opt);
}

/// One filter per channel; weight is (c, 1, k, k).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& weight, int stride, int padding);

enum class BnMode { train, eval };

/// Running statistics are state, not parameters: they never enter parameter counts or gradients.
template <typename T>
struct RunningStats {
    std::vector<T> mean;
    std::vector<T> var;

    static RunningStats fresh(int channels) {
        return {std::vector<T>(static_cast<std::size_t>(channels), T(0)),
                std::vector<T>(static_cast<std::size_t>(channels), T(1))};
    }
};

struct BatchNormOptions {
    double eps = 1e-3;
    double momentum = 0.03;
};

/// gamma and beta are (1, c, 1, 1). Train mode normalizes with the biased batch variance and
/// folds the unbiased one into `stats`; eval mode reads `stats`.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormOptions opt,
                      BnMode mode, RunningStats<T>& stats);

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int kernel, int stride);

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs);

template <typename T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> inputs) {
    const std::vector<Tensor<T>> v(inputs);
    return concat_channels<T>(std::span<const Tensor<T>>(v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

template <typename T>
Tensor<T> silu(const Tensor<T>& input);

/// View channels as a (groups x c/groups) matrix and transpose it: output channel j * groups + g
/// takes input channel g * (c / groups) + j.
template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& input, int groups);

/// The permutation applied by channel_shuffle: result[out] = in.
std::vector<int> channel_shuffle_permutation(int channels, int groups);

template <typename T>
Tensor<T> sum(const Tensor<T>& input);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Same-shape conversion between precisions (no tape).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& input) {
    std::vector<To> out(input.data().begin(), input.data().end());
    return Tensor<To>::from_data(input.shape(), std::move(out));
}

}  // namespace istd
