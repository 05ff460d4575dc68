#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "istd/tensor.hpp"

namespace istd {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    /// "input#index" of the worst component.
    std::string worst;

    [[nodiscard]] bool passed(double tol) const { return max_rel_error <= tol; }
};

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares backward() against central differences of `fn` for every component of `inputs`
/// (or a seeded sample of `max_samples` components when non-zero). The error of a component is
/// |analytic - numeric| / max(1, |numeric|). Non-finite intermediates raise NumericError naming
/// the producing op.
GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor<double>>& inputs, double eps = 1e-6,
                           std::size_t max_samples = 0, std::uint64_t seed = 0);

}  // namespace istd
