#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "istd/ops.hpp"
#include "istd/simam.hpp"
#include "istd/tensor.hpp"

namespace istd::nn {

enum class LayerKind { Input, Conv, BatchNorm, SiLU, MaxPool, Upsample, Concat, Shuffle, SimAM };

/// One primitive operation. Layers are stored in topological order; `inputs` index earlier layers.
struct Layer {
    LayerKind kind = LayerKind::Input;
    std::string name;
    std::vector<int> inputs;
    int c_in = 0;
    int c_out = 0;
    int kernel = 1;
    int stride = 1;
    int groups = 1;
    bool bias = false;
    double lambda = 1e-4;
    /// Output extent for a single image (n = 1).
    Shape out;
    /// Innermost module that created the layer, -1 for none.
    int module = -1;
    /// Free-form role marker ("head" for detection convs).
    std::string tag;
};

enum class BlockKind { CBS, ELAN, ELAN_W, MP1, GSConv, GSBottleneck, VoVGSCSP, SimAM, Head, Upsample, Concat };

const char* to_string(BlockKind kind);

/// The composite-block description: what the block is and its channel plan.
struct BlockSpec {
    BlockKind kind = BlockKind::CBS;
    int c_in = 0;
    int c_out = 0;
    int k = 1;
    int s = 1;
    int hidden = 0;
};

/// A named group of consecutive layers [first_layer, end_layer). Modules nest; `depth` 0 is top level.
struct Module {
    std::string name;
    BlockSpec spec;
    int first_layer = 0;
    int end_layer = 0;
    int parent = -1;
    int depth = 0;
};

enum class ParamRole { ConvWeight, ConvBias, BnGamma, BnBeta };

struct ParamSpec {
    std::string name;
    Shape shape;
    int layer = 0;
    ParamRole role = ParamRole::ConvWeight;
};

class GraphBuilder;

/// Immutable layer graph with shape-checked routing. Built only through GraphBuilder.
class Graph {
public:
    [[nodiscard]] const std::vector<Layer>& layers() const { return layers_; }
    [[nodiscard]] const std::vector<Module>& modules() const { return modules_; }
    [[nodiscard]] const std::vector<int>& outputs() const { return outputs_; }
    [[nodiscard]] const std::vector<ParamSpec>& params() const { return params_; }
    /// Layer ids of the BatchNorm layers, in order; running statistics are stored in this order.
    [[nodiscard]] const std::vector<int>& batchnorm_layers() const { return bn_layers_; }
    [[nodiscard]] const Shape& input_shape() const { return layers_.front().out; }
    [[nodiscard]] Shape output_shape(std::size_t i) const { return layers_[static_cast<std::size_t>(outputs_[i])].out; }

    [[nodiscard]] std::int64_t layer_params(int layer) const;
    [[nodiscard]] std::int64_t module_params(int module) const;
    [[nodiscard]] std::int64_t layer_flops(int layer) const;
    [[nodiscard]] std::int64_t module_flops(int module) const;
    [[nodiscard]] int count_kind(LayerKind kind) const;

private:
    friend class GraphBuilder;
    std::vector<Layer> layers_;
    std::vector<Module> modules_;
    std::vector<int> outputs_;
    std::vector<ParamSpec> params_;
    std::vector<int> bn_layers_;
    std::vector<int> last_use_;

public:
    /// Last layer reading each layer's output (outputs are never released early).
    [[nodiscard]] const std::vector<int>& last_use() const { return last_use_; }
};

/// Exact number of learnable scalars: conv weights, conv biases, BN gamma and beta.
/// Running statistics are state and are not counted.
std::int64_t param_count(const Graph& graph);

/// 2 * MACs over convolutions (grouped convolutions divided by groups) plus one operation per output
/// element of BatchNorm (two), SiLU, SimAM and max-pool windows (k*k). Data movement (upsample,
/// concat, shuffle) is free.
std::int64_t count_flops(const Graph& graph);

/// Multiply-accumulates of a single convolution layer.
std::int64_t conv_macs(int c_in, int c_out, int k, int groups, int h_out, int w_out);

class GraphBuilder {
public:
    GraphBuilder(int channels, int height, int width);

    [[nodiscard]] int input() const { return 0; }
    [[nodiscard]] const Shape& shape(int node) const;

    int conv(int x, int c_out, int k, int stride, int groups, bool bias, const std::string& name,
             const std::string& tag = {});
    int batchnorm(int x, const std::string& name);
    int silu(int x, const std::string& name);
    int maxpool(int x, int k, int stride, const std::string& name);
    int upsample(int x, const std::string& name);
    int concat(const std::vector<int>& xs, const std::string& name);
    int shuffle(int x, int groups, const std::string& name);
    int simam(int x, double lambda, const std::string& name);

    /// Opens a module; layers added until the matching end_module() belong to it.
    void begin_module(const std::string& name, const BlockSpec& spec);
    void end_module();
    [[nodiscard]] std::string scope() const;

    void mark_output(int node);
    [[nodiscard]] Graph finish() &&;

    /// Gives every subsequent convolution a bias (a negative control for parameter audits).
    void force_conv_bias(bool flag) { force_bias_ = flag; }

private:
    int add(Layer layer);

    Graph graph_;
    std::vector<int> open_;
    bool force_bias_ = false;
};

/// Learnable tensors of a graph, aligned with Graph::params().
template <typename T>
struct Weights {
    std::vector<Tensor<T>> tensors;
    /// Aligned with Graph::batchnorm_layers().
    std::vector<RunningStats<T>> running;

    [[nodiscard]] const Tensor<T>& get(const Graph& g, const std::string& name) const;
    Tensor<T>& get(const Graph& g, const std::string& name);
    void set_requires_grad(bool flag);
    void zero_grad();
};

/// Seeded initialization: conv weights uniform in +-1/sqrt(fan_in), BN gamma 1, beta 0, conv
/// biases 0 except detection heads (objectness logit prior `obj_prior`, see init code).
template <typename T>
Weights<T> init_weights(const Graph& graph, std::uint64_t seed, double obj_prior = -4.5, int anchors_per_scale = 3);

struct ForwardOptions {
    BnMode bn_mode = BnMode::eval;
    BatchNormOptions bn{};
};

/// Evaluates the graph on a batch and returns the tensors of Graph::outputs(). Train-mode BN
/// updates `weights.running`.
template <typename T>
std::vector<Tensor<T>> forward(const Graph& graph, Weights<T>& weights, const Tensor<T>& batch,
                               const ForwardOptions& opt = {});

/// Converts weights and running statistics between precisions.
template <typename To, typename From>
Weights<To> convert(const Weights<From>& w) {
    Weights<To> out;
    for (const auto& t : w.tensors) out.tensors.push_back(cast<To>(t));
    for (const auto& r : w.running) {
        out.running.push_back({std::vector<To>(r.mean.begin(), r.mean.end()), std::vector<To>(r.var.begin(), r.var.end())});
    }
    return out;
}

}  // namespace istd::nn
