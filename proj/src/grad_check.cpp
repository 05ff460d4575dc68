#include "istd/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "istd/rng.hpp"

namespace istd {

GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor<double>>& inputs, double eps,
                           std::size_t max_samples, std::uint64_t seed) {
    if (!(eps > 0.0)) throw ValueError("grad_check: eps must be > 0");
    ScopedFiniteCheck finite;

    for (auto& t : inputs) {
        t.set_requires_grad(true);
        std::ranges::fill(t.mutable_grad(), 0.0);
    }
    const Tensor<double> out = fn(inputs);
    if (out.numel() != 1) throw ShapeError("grad_check: fn must return a scalar, got " + out.shape().str());
    backward(out);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

    // (input, component) pairs to probe.
    std::vector<std::pair<std::size_t, std::size_t>> probes;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t j = 0; j < inputs[i].numel(); ++j) probes.emplace_back(i, j);
    }
    if (max_samples != 0 && probes.size() > max_samples) {
        Rng rng(seed);
        for (std::size_t i = 0; i < max_samples; ++i) {
            const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                                    static_cast<std::int64_t>(probes.size() - 1)));
            std::swap(probes[i], probes[j]);
        }
        probes.resize(max_samples);
    }

    GradCheckResult result;
    for (const auto& [i, j] : probes) {
        auto values = inputs[i].mutable_data();
        const double saved = values[j];
        values[j] = saved + eps;
        const double plus = fn(inputs).item();
        values[j] = saved - eps;
        const double minus = fn(inputs).item();
        values[j] = saved;
        const double numeric = (plus - minus) / (2.0 * eps);
        const double err = std::abs(analytic[i][j] - numeric) / std::max(1.0, std::abs(numeric));
        if (!std::isfinite(err)) throw NumericError("grad_check: non-finite gradient comparison");
        ++result.checked;
        if (result.worst.empty() || err > result.max_rel_error) {
            result.max_rel_error = err;
            result.worst = std::to_string(i) + "#" + std::to_string(j);
        }
    }
    return result;
}

}  // namespace istd
