#include "istd/simam.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace istd::simam {
namespace {

void validate(const SimamConfig& cfg) {
    if (!(cfg.lambda > 0.0)) throw ValueError("simam: lambda must be > 0");
}

template <typename T>
struct PlaneStats {
    T mean;
    T var;
};

template <typename T>
PlaneStats<T> plane_stats(const T* p, std::size_t m) {
    T acc = 0;
    for (std::size_t i = 0; i < m; ++i) acc += p[i];
    const T mean = acc / static_cast<T>(m);
    T sq = 0;
    for (std::size_t i = 0; i < m; ++i) sq += (p[i] - mean) * (p[i] - mean);
    return {mean, sq / static_cast<T>(m)};
}

template <typename T>
T logistic(T v) {
    return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

}  // namespace

template <typename T>
EnergyMap<T> energy(const Tensor<T>& feature, const SimamConfig& cfg) {
    validate(cfg);
    const Shape s = feature.shape();
    const std::size_t m = s.plane();
    const T lambda = static_cast<T>(cfg.lambda);
    EnergyMap<T> map{s, std::vector<T>(s.numel())};
    const T* x = feature.data().data();
    for (int nc = 0; nc < s.n * s.c; ++nc) {
        const T* p = x + static_cast<std::size_t>(nc) * m;
        T* e = map.values.data() + static_cast<std::size_t>(nc) * m;
        const auto [mean, var] = plane_stats(p, m);
        for (std::size_t i = 0; i < m; ++i) {
            const T d = p[i] - mean;
            e[i] = T(4) * (var + lambda) / (d * d + T(2) * var + T(2) * lambda);
        }
    }
    return map;
}

template <typename T>
Tensor<T> apply(const Tensor<T>& feature, const SimamConfig& cfg) {
    validate(cfg);
    const Shape s = feature.shape();
    const std::size_t m = s.plane();
    const T lambda = static_cast<T>(cfg.lambda);
    const T* x = feature.data().data();
    std::vector<T> out(s.numel());
    // 1/e simplifies to d^2 / (4 (var + lambda)) + 1/2.
    for (int nc = 0; nc < s.n * s.c; ++nc) {
        const std::size_t off = static_cast<std::size_t>(nc) * m;
        const auto [mean, var] = plane_stats(x + off, m);
        const T denom = T(4) * (var + lambda);
        for (std::size_t i = 0; i < m; ++i) {
            const T d = x[off + i] - mean;
            out[off + i] = x[off + i] * logistic(d * d / denom + T(0.5));
        }
    }
    return Tensor<T>::from_op(s, std::move(out), {feature}, "simam", [s, m, lambda](Node<T>& self) {
        const T* x = self.inputs[0]->value.data();
        T* gx = self.inputs[0]->grad.data();
        const T* gy = self.grad.data();
        std::vector<T> gd(m);
        for (int nc = 0; nc < s.n * s.c; ++nc) {
            const std::size_t off = static_cast<std::size_t>(nc) * m;
            const auto [mean, var] = plane_stats(x + off, m);
            const T sreg = var + lambda;
            // a_i = d_i^2 / (4 s) + 1/2, y_i = x_i * sigmoid(a_i), s = var + lambda, d_i = x_i - mean.
            T g_s = 0;
            for (std::size_t i = 0; i < m; ++i) {
                const T d = x[off + i] - mean;
                const T w = logistic(d * d / (T(4) * sreg) + T(0.5));
                const T q = gy[off + i] * x[off + i] * w * (T(1) - w);  // dL/da_i
                gx[off + i] += gy[off + i] * w;
                gd[i] = q * d / (T(2) * sreg);
                g_s -= q * d * d / (T(4) * sreg * sreg);
            }
            // var = sum d^2 / M, so dvar/dd_i = 2 d_i / M; then d_i = x_i - mean.
            T mean_gd = 0;
            for (std::size_t i = 0; i < m; ++i) {
                const T d = x[off + i] - mean;
                gd[i] += g_s * T(2) * d / static_cast<T>(m);
                mean_gd += gd[i];
            }
            mean_gd /= static_cast<T>(m);
            for (std::size_t i = 0; i < m; ++i) gx[off + i] += gd[i] - mean_gd;
        }
    });
}

template <typename T>
Tensor<T> energy_heatmap(const Tensor<T>& feature, const SimamConfig& cfg) {
    const EnergyMap<T> map = energy(feature, cfg);
    const Shape s = feature.shape();
    const std::size_t m = s.plane();
    const Shape os{s.n, 1, s.h, s.w};
    std::vector<T> out(os.numel(), T(0));
    for (int n = 0; n < s.n; ++n) {
        T* dst = out.data() + static_cast<std::size_t>(n) * m;
        for (int c = 0; c < s.c; ++c) {
            const T* e = map.values.data() + (static_cast<std::size_t>(n) * s.c + c) * m;
            for (std::size_t i = 0; i < m; ++i) dst[i] += T(1) / e[i];
        }
        for (std::size_t i = 0; i < m; ++i) dst[i] /= static_cast<T>(s.c);
        const auto [lo, hi] = std::minmax_element(dst, dst + m);
        const T low = *lo;
        const T range = *hi - *lo;
        for (std::size_t i = 0; i < m; ++i) dst[i] = range > T(0) ? (dst[i] - low) / range : T(0);
    }
    return Tensor<T>::from_data(os, std::move(out));
}

template EnergyMap<float> energy(const Tensor<float>&, const SimamConfig&);
template EnergyMap<double> energy(const Tensor<double>&, const SimamConfig&);
template Tensor<float> apply(const Tensor<float>&, const SimamConfig&);
template Tensor<double> apply(const Tensor<double>&, const SimamConfig&);
template Tensor<float> energy_heatmap(const Tensor<float>&, const SimamConfig&);
template Tensor<double> energy_heatmap(const Tensor<double>&, const SimamConfig&);

}  // namespace istd::simam
