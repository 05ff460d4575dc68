#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "istd/grad_check.hpp"
#include "istd/graph.hpp"

namespace istd::audit {

/// Maximum relative error accepted by every suite.
inline constexpr double kTolerance = 1e-4;
/// Central-difference step.
inline constexpr double kEps = 1e-6;

struct SuiteResult {
    std::string name;
    GradCheckResult check;

    [[nodiscard]] bool passed() const { return check.passed(kTolerance); }
};

/// Whole-graph audit in f64: inputs are a random image batch followed by every parameter (BN affine
/// parameters randomized), the scalar is a fixed random projection of all outputs, BN in train mode.
GradCheckResult graph_audit(const nn::Graph& graph, int batch, std::uint64_t seed, std::size_t samples);

/// Suite names accepted by run(): simam, nwd, ciou, blocks, model, loss. "all" runs every suite.
const std::vector<std::string>& suite_names();

/// Runs one suite (or all); unknown names raise ValueError. Deterministic in `seed`.
std::vector<SuiteResult> run(const std::string& which, std::uint64_t seed);

}  // namespace istd::audit
