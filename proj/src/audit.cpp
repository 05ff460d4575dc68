#include "istd/audit.hpp"

#include <algorithm>
#include <cmath>

#include "istd/blocks.hpp"
#include "istd/box_metrics.hpp"
#include "istd/error.hpp"
#include "istd/model.hpp"
#include "istd/rng.hpp"
#include "istd/train.hpp"

namespace istd::audit {
namespace {

using T = Tensor<double>;

T random_tensor(const Shape& s, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    std::vector<double> v(s.numel());
    for (auto& x : v) x = rng.normal() * scale;
    return T::from_data(s, std::move(v));
}

// Finite differences of a scalar box loss against its analytic gradient, over seeded pairs.
template <typename Loss, typename Grad>
GradCheckResult box_suite(std::uint64_t seed, bool overlapping, Loss&& loss, Grad&& grad) {
    Rng rng(seed);
    GradCheckResult r;
    for (int n = 0; n < 200; ++n) {
        const box::BBox gt{rng.uniform(10, 50), rng.uniform(10, 50), rng.uniform(2, 20), rng.uniform(2, 20)};
        box::BBox pred{rng.uniform(10, 50), rng.uniform(10, 50), rng.uniform(2, 20), rng.uniform(2, 20)};
        if (overlapping) {
            pred.cx = gt.cx + rng.uniform(-0.3, 0.3) * gt.w;
            pred.cy = gt.cy + rng.uniform(-0.3, 0.3) * gt.h;
        }
        const auto g = grad(pred, gt);
        for (std::size_t j = 0; j < 4; ++j) {
            const auto at = [&](double d) {
                box::BBox p = pred;
                std::array<double*, 4> f{&p.cx, &p.cy, &p.w, &p.h};
                *f[j] += d;
                return loss(p, gt);
            };
            const double numeric = (at(kEps) - at(-kEps)) / (2 * kEps);
            const double err = std::abs(g.grad[j] - numeric) / std::max(1.0, std::abs(numeric));
            ++r.checked;
            if (r.worst.empty() || err > r.max_rel_error) {
                r.max_rel_error = err;
                r.worst = "pair" + std::to_string(n) + "#" + std::to_string(j);
            }
        }
    }
    return r;
}

}  // namespace

GradCheckResult graph_audit(const nn::Graph& graph, int batch, std::uint64_t seed, std::size_t samples) {
    auto w = nn::init_weights<double>(graph, seed, 0.0);
    for (std::size_t i = 0; i < graph.params().size(); ++i) {
        const auto role = graph.params()[i].role;
        if (role != nn::ParamRole::BnGamma && role != nn::ParamRole::BnBeta) continue;
        T r = random_tensor(graph.params()[i].shape, seed + 100 + i, 0.3);
        if (role == nn::ParamRole::BnGamma) {
            for (auto& v : r.mutable_data()) v += 1.0;
        }
        w.tensors[i] = r;
    }
    Shape in = graph.input_shape();
    in.n = batch;
    std::vector<T> inputs{random_tensor(in, seed + 1)};
    for (auto& t : w.tensors) inputs.push_back(t);
    std::vector<T> proj;
    for (std::size_t o = 0; o < graph.outputs().size(); ++o) {
        Shape s = graph.output_shape(o);
        s.n = batch;
        proj.push_back(random_tensor(s, seed + 50 + o));
    }
    const ScalarFn fn = [&](const std::vector<T>& v) {
        nn::Weights<double> ww{std::vector<T>(v.begin() + 1, v.end()), w.running};
        const auto outs = nn::forward(graph, ww, v[0], nn::ForwardOptions{BnMode::train, {}});
        T total = sum(mul(outs[0], proj[0]));
        for (std::size_t o = 1; o < outs.size(); ++o) total = add(total, sum(mul(outs[o], proj[o])));
        return total;
    };
    return grad_check(fn, inputs, kEps, samples, seed);
}

const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names{"simam", "nwd", "ciou", "blocks", "model", "loss"};
    return names;
}

std::vector<SuiteResult> run(const std::string& which, std::uint64_t seed) {
    const auto& names = suite_names();
    if (which != "all" && std::find(names.begin(), names.end(), which) == names.end()) {
        throw ValueError("unknown audit suite '" + which + "'");
    }
    const auto want = [&](const char* n) { return which == "all" || which == n; };
    std::vector<SuiteResult> out;
    if (want("simam")) {
        const Shape s{2, 3, 5, 6};
        const T proj = random_tensor(s, seed + 1);
        std::vector<T> in{random_tensor(s, seed)};
        const ScalarFn fn = [&](const std::vector<T>& v) { return sum(mul(simam::apply(v[0], simam::SimamConfig{}), proj)); };
        out.push_back({"simam_apply", grad_check(fn, in, kEps, 0, seed)});
    }
    if (want("nwd")) {
        out.push_back({"nwd_loss", box_suite(seed, false, [](const box::BBox& p, const box::BBox& g) { return box::nwd_loss(p, g, 12.0); },
                                             [](const box::BBox& p, const box::BBox& g) { return box::nwd_loss_grad(p, g, 12.0); })});
    }
    if (want("ciou")) {
        out.push_back({"ciou_loss", box_suite(seed, true, [](const box::BBox& p, const box::BBox& g) { return box::ciou_loss(p, g); },
                                              [](const box::BBox& p, const box::BBox& g) { return box::ciou_loss_grad(p, g); })});
    }
    if (want("blocks")) {
        using nn::BlockKind;
        for (const nn::BlockSpec& s : {nn::BlockSpec{BlockKind::CBS, 3, 4, 3, 2, 0}, nn::BlockSpec{BlockKind::ELAN, 4, 8, 3, 1, 2},
                                       nn::BlockSpec{BlockKind::ELAN_W, 4, 8, 3, 1, 2}, nn::BlockSpec{BlockKind::MP1, 4, 4, 3, 2, 0},
                                       nn::BlockSpec{BlockKind::GSConv, 4, 6, 3, 1, 0}, nn::BlockSpec{BlockKind::GSBottleneck, 4, 4, 3, 1, 0},
                                       nn::BlockSpec{BlockKind::VoVGSCSP, 6, 8, 1, 1, 0}}) {
            out.push_back({std::string("block ") + nn::to_string(s.kind), graph_audit(nn::block_graph(s, 6, 6), 2, seed, 0)});
        }
    }
    if (want("model")) {
        const auto g = model::build_model(model::ModelConfig{.width = 0.25, .input_size = 64});
        out.push_back({"model w0.25 64px", graph_audit(g, 2, seed, 64)});
    }
    if (want("loss")) {
        const model::ModelConfig mc{.width = 0.25, .input_size = 64};
        const auto g = model::build_model(mc);
        data::SynthConfig sc;
        sc.img_size = 64;
        sc.seed = seed;
        const auto batch = data::synth_dataset(sc, 2);
        const train::LossSpec spec{train::LossMode::mixed, 0.5, 6.0, 0.05, 1.0, 0.5, 1};
        out.push_back({"total_loss w0.25 64px", train::gradient_audit(g, mc, nn::init_weights<double>(g, seed), batch, spec, 48, seed)});
    }
    return out;
}

}  // namespace istd::audit
