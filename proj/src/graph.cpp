#include "istd/graph.hpp"

#include <cmath>
#include <utility>

#include "istd/error.hpp"
#include "istd/rng.hpp"

namespace istd::nn {

const char* to_string(BlockKind kind) {
    switch (kind) {
        case BlockKind::CBS: return "CBS";
        case BlockKind::ELAN: return "ELAN";
        case BlockKind::ELAN_W: return "ELAN-W";
        case BlockKind::MP1: return "MP-1";
        case BlockKind::GSConv: return "GSConv";
        case BlockKind::GSBottleneck: return "GS-bottleneck";
        case BlockKind::VoVGSCSP: return "VoV-GSCSP";
        case BlockKind::SimAM: return "SimAM";
        case BlockKind::Head: return "Head";
        case BlockKind::Upsample: return "Upsample";
        case BlockKind::Concat: return "Concat";
    }
    return "?";
}

std::int64_t conv_macs(int c_in, int c_out, int k, int groups, int h_out, int w_out) {
    return static_cast<std::int64_t>(c_in) * c_out * k * k * h_out * w_out / groups;
}

std::int64_t Graph::layer_params(int layer) const {
    const Layer& l = layers_.at(static_cast<std::size_t>(layer));
    switch (l.kind) {
        case LayerKind::Conv:
            return static_cast<std::int64_t>(l.c_out) * (l.c_in / l.groups) * l.kernel * l.kernel + (l.bias ? l.c_out : 0);
        case LayerKind::BatchNorm: return 2LL * l.c_out;
        default: return 0;
    }
}

std::int64_t Graph::layer_flops(int layer) const {
    const Layer& l = layers_.at(static_cast<std::size_t>(layer));
    const auto elems = static_cast<std::int64_t>(l.out.numel());
    switch (l.kind) {
        case LayerKind::Conv: return 2 * conv_macs(l.c_in, l.c_out, l.kernel, l.groups, l.out.h, l.out.w);
        case LayerKind::BatchNorm: return 2 * elems;
        case LayerKind::SiLU:
        case LayerKind::SimAM: return elems;
        case LayerKind::MaxPool: return elems * l.kernel * l.kernel;
        default: return 0;
    }
}

std::int64_t Graph::module_params(int module) const {
    const Module& m = modules_.at(static_cast<std::size_t>(module));
    std::int64_t total = 0;
    for (int i = m.first_layer; i < m.end_layer; ++i) total += layer_params(i);
    return total;
}

std::int64_t Graph::module_flops(int module) const {
    const Module& m = modules_.at(static_cast<std::size_t>(module));
    std::int64_t total = 0;
    for (int i = m.first_layer; i < m.end_layer; ++i) total += layer_flops(i);
    return total;
}

int Graph::count_kind(LayerKind kind) const {
    int n = 0;
    for (const auto& l : layers_) n += l.kind == kind ? 1 : 0;
    return n;
}

std::int64_t param_count(const Graph& graph) {
    std::int64_t total = 0;
    for (int i = 0; i < static_cast<int>(graph.layers().size()); ++i) total += graph.layer_params(i);
    return total;
}

std::int64_t count_flops(const Graph& graph) {
    std::int64_t total = 0;
    for (int i = 0; i < static_cast<int>(graph.layers().size()); ++i) total += graph.layer_flops(i);
    return total;
}

GraphBuilder::GraphBuilder(int channels, int height, int width) {
    if (channels <= 0 || height <= 0 || width <= 0) {
        throw ShapeError("graph input extents must be positive, got " + Shape{1, channels, height, width}.str());
    }
    Layer in;
    in.kind = LayerKind::Input;
    in.name = "input";
    in.c_in = in.c_out = channels;
    in.out = Shape{1, channels, height, width};
    graph_.layers_.push_back(std::move(in));
}

const Shape& GraphBuilder::shape(int node) const {
    if (node < 0 || node >= static_cast<int>(graph_.layers_.size())) {
        throw ValueError("unknown graph node " + std::to_string(node));
    }
    return graph_.layers_[static_cast<std::size_t>(node)].out;
}

std::string GraphBuilder::scope() const {
    return open_.empty() ? std::string{} : graph_.modules_[static_cast<std::size_t>(open_.back())].name;
}

int GraphBuilder::add(Layer layer) {
    const std::string prefix = scope();
    if (!prefix.empty()) layer.name = prefix + "." + layer.name;
    layer.module = open_.empty() ? -1 : open_.back();
    const int id = static_cast<int>(graph_.layers_.size());
    auto push_param = [&](const char* suffix, Shape s, ParamRole role) {
        graph_.params_.push_back(ParamSpec{layer.name + suffix, s, id, role});
    };
    if (layer.kind == LayerKind::Conv) {
        push_param(".weight", Shape{layer.c_out, layer.c_in / layer.groups, layer.kernel, layer.kernel}, ParamRole::ConvWeight);
        if (layer.bias) push_param(".bias", Shape{1, layer.c_out, 1, 1}, ParamRole::ConvBias);
    } else if (layer.kind == LayerKind::BatchNorm) {
        push_param(".gamma", Shape{1, layer.c_out, 1, 1}, ParamRole::BnGamma);
        push_param(".beta", Shape{1, layer.c_out, 1, 1}, ParamRole::BnBeta);
        graph_.bn_layers_.push_back(id);
    }
    graph_.layers_.push_back(std::move(layer));
    return id;
}

int GraphBuilder::conv(int x, int c_out, int k, int stride, int groups, bool bias, const std::string& name,
                       const std::string& tag) {
    const Shape& s = shape(x);
    if (c_out <= 0 || k <= 0 || stride <= 0 || groups <= 0) {
        throw ValueError("conv " + name + ": channels, kernel, stride and groups must be positive");
    }
    if (s.c % groups != 0 || c_out % groups != 0) {
        throw ShapeError("conv " + name + ": " + std::to_string(s.c) + " -> " + std::to_string(c_out) +
                         " channels not divisible by groups " + std::to_string(groups));
    }
    const int pad = k / 2;
    const int h = (s.h + 2 * pad - k) / stride + 1;
    const int w = (s.w + 2 * pad - k) / stride + 1;
    if (h <= 0 || w <= 0) throw ShapeError("conv " + name + ": input " + s.str() + " too small");
    Layer l;
    l.kind = LayerKind::Conv;
    l.name = name;
    l.inputs = {x};
    l.c_in = s.c;
    l.c_out = c_out;
    l.kernel = k;
    l.stride = stride;
    l.groups = groups;
    l.bias = bias || force_bias_;
    l.out = Shape{1, c_out, h, w};
    l.tag = tag;
    return add(std::move(l));
}

namespace {

Layer same_shape(LayerKind kind, int x, const Shape& s, const std::string& name) {
    Layer l;
    l.kind = kind;
    l.name = name;
    l.inputs = {x};
    l.c_in = l.c_out = s.c;
    l.out = s;
    return l;
}

}  // namespace

int GraphBuilder::batchnorm(int x, const std::string& name) {
    return add(same_shape(LayerKind::BatchNorm, x, shape(x), name));
}

int GraphBuilder::silu(int x, const std::string& name) { return add(same_shape(LayerKind::SiLU, x, shape(x), name)); }

int GraphBuilder::maxpool(int x, int k, int stride, const std::string& name) {
    const Shape& s = shape(x);
    if (k > s.h || k > s.w) throw ShapeError("maxpool " + name + ": window " + std::to_string(k) + " exceeds input " + s.str());
    Layer l = same_shape(LayerKind::MaxPool, x, s, name);
    l.kernel = k;
    l.stride = stride;
    l.out = Shape{1, s.c, (s.h - k) / stride + 1, (s.w - k) / stride + 1};
    return add(std::move(l));
}

int GraphBuilder::upsample(int x, const std::string& name) {
    const Shape& s = shape(x);
    Layer l = same_shape(LayerKind::Upsample, x, s, name);
    l.out = Shape{1, s.c, 2 * s.h, 2 * s.w};
    return add(std::move(l));
}

int GraphBuilder::concat(const std::vector<int>& xs, const std::string& name) {
    if (xs.empty()) throw ValueError("concat " + name + ": no inputs");
    const Shape first = shape(xs.front());
    int channels = 0;
    for (int x : xs) {
        const Shape& s = shape(x);
        if (s.h != first.h || s.w != first.w) {
            throw ShapeError("concat " + name + ": spatial mismatch " + first.str() + " vs " + s.str());
        }
        channels += s.c;
    }
    Layer l;
    l.kind = LayerKind::Concat;
    l.name = name;
    l.inputs = xs;
    l.c_in = l.c_out = channels;
    l.out = Shape{1, channels, first.h, first.w};
    return add(std::move(l));
}

int GraphBuilder::shuffle(int x, int groups, const std::string& name) {
    const Shape& s = shape(x);
    if (groups <= 0 || s.c % groups != 0) {
        throw ShapeError("shuffle " + name + ": " + std::to_string(s.c) + " channels not divisible by " + std::to_string(groups));
    }
    Layer l = same_shape(LayerKind::Shuffle, x, s, name);
    l.groups = groups;
    return add(std::move(l));
}

int GraphBuilder::simam(int x, double lambda, const std::string& name) {
    if (!(lambda > 0.0)) throw ValueError("simam " + name + ": lambda must be positive");
    Layer l = same_shape(LayerKind::SimAM, x, shape(x), name);
    l.lambda = lambda;
    return add(std::move(l));
}

void GraphBuilder::begin_module(const std::string& name, const BlockSpec& spec) {
    Module m;
    const std::string prefix = scope();
    m.name = prefix.empty() ? name : prefix + "." + name;
    m.spec = spec;
    m.first_layer = static_cast<int>(graph_.layers_.size());
    m.parent = open_.empty() ? -1 : open_.back();
    m.depth = static_cast<int>(open_.size());
    open_.push_back(static_cast<int>(graph_.modules_.size()));
    graph_.modules_.push_back(std::move(m));
}

void GraphBuilder::end_module() {
    if (open_.empty()) throw ValueError("end_module without begin_module");
    graph_.modules_[static_cast<std::size_t>(open_.back())].end_layer = static_cast<int>(graph_.layers_.size());
    open_.pop_back();
}

void GraphBuilder::mark_output(int node) {
    (void)shape(node);
    graph_.outputs_.push_back(node);
}

Graph GraphBuilder::finish() && {
    if (!open_.empty()) throw ValueError("unterminated module " + scope());
    if (graph_.outputs_.empty()) graph_.outputs_.push_back(static_cast<int>(graph_.layers_.size()) - 1);
    const std::size_t n = graph_.layers_.size();
    graph_.last_use_.assign(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
        for (int in : graph_.layers_[i].inputs) graph_.last_use_[static_cast<std::size_t>(in)] = static_cast<int>(i);
    }
    for (int o : graph_.outputs_) graph_.last_use_[static_cast<std::size_t>(o)] = static_cast<int>(n);
    return std::move(graph_);
}

template <typename T>
const Tensor<T>& Weights<T>::get(const Graph& g, const std::string& name) const {
    const auto& ps = g.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (ps[i].name == name) return tensors.at(i);
    }
    throw ValueError("no parameter named " + name);
}

template <typename T>
Tensor<T>& Weights<T>::get(const Graph& g, const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).get(g, name));
}

template <typename T>
void Weights<T>::set_requires_grad(bool flag) {
    for (auto& t : tensors) t.set_requires_grad(flag);
}

template <typename T>
void Weights<T>::zero_grad() {
    for (auto& t : tensors) t.zero_grad();
}

template <typename T>
Weights<T> init_weights(const Graph& graph, std::uint64_t seed, double obj_prior, int anchors_per_scale) {
    Rng rng(seed);
    Weights<T> w;
    for (const ParamSpec& p : graph.params()) {
        const Layer& l = graph.layers()[static_cast<std::size_t>(p.layer)];
        std::vector<T> v(p.shape.numel(), T(0));
        switch (p.role) {
            case ParamRole::ConvWeight: {
                const double bound = 1.0 / std::sqrt(static_cast<double>(p.shape.c) * p.shape.h * p.shape.w);
                for (T& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
                break;
            }
            case ParamRole::ConvBias:
                if (l.tag == "head" && anchors_per_scale > 0 && l.c_out % anchors_per_scale == 0) {
                    const int per = l.c_out / anchors_per_scale;
                    for (int a = 0; a < anchors_per_scale && per > 4; ++a) v[static_cast<std::size_t>(a * per + 4)] = static_cast<T>(obj_prior);
                }
                break;
            case ParamRole::BnGamma: std::fill(v.begin(), v.end(), T(1)); break;
            case ParamRole::BnBeta: break;
        }
        w.tensors.push_back(Tensor<T>::from_data(p.shape, std::move(v)));
    }
    for (int id : graph.batchnorm_layers()) {
        w.running.push_back(RunningStats<T>::fresh(graph.layers()[static_cast<std::size_t>(id)].c_out));
    }
    return w;
}

template <typename T>
std::vector<Tensor<T>> forward(const Graph& graph, Weights<T>& weights, const Tensor<T>& batch, const ForwardOptions& opt) {
    const auto& layers = graph.layers();
    const Shape& in = graph.input_shape();
    if (batch.shape().c != in.c || batch.shape().h != in.h || batch.shape().w != in.w) {
        throw ShapeError("graph expects input (N, " + std::to_string(in.c) + ", " + std::to_string(in.h) + ", " +
                         std::to_string(in.w) + "), got " + batch.shape().str());
    }
    if (weights.tensors.size() != graph.params().size() || weights.running.size() != graph.batchnorm_layers().size()) {
        throw ValueError("weights do not match the graph");
    }
    // Parameter and running-stat slots per layer.
    std::vector<int> first_param(layers.size(), -1);
    for (std::size_t i = graph.params().size(); i-- > 0;) first_param[static_cast<std::size_t>(graph.params()[i].layer)] = static_cast<int>(i);
    std::vector<int> bn_slot(layers.size(), -1);
    for (std::size_t i = 0; i < graph.batchnorm_layers().size(); ++i) bn_slot[static_cast<std::size_t>(graph.batchnorm_layers()[i])] = static_cast<int>(i);

    const auto& last = graph.last_use();
    std::vector<Tensor<T>> values(layers.size());
    values[0] = batch;
    for (std::size_t i = 1; i < layers.size(); ++i) {
        const Layer& l = layers[i];
        const Tensor<T>& x = values[static_cast<std::size_t>(l.inputs.front())];
        const auto p = static_cast<std::size_t>(first_param[i]);
        switch (l.kind) {
            case LayerKind::Input: break;
            case LayerKind::Conv:
                values[i] = conv2d(x, weights.tensors[p], l.bias ? weights.tensors[p + 1] : Tensor<T>{},
                                   Conv2dOptions{l.stride, l.kernel / 2, l.groups});
                break;
            case LayerKind::BatchNorm:
                values[i] = batchnorm2d(x, weights.tensors[p], weights.tensors[p + 1], opt.bn, opt.bn_mode,
                                        weights.running[static_cast<std::size_t>(bn_slot[i])]);
                break;
            case LayerKind::SiLU: values[i] = silu(x); break;
            case LayerKind::MaxPool: values[i] = maxpool2d(x, l.kernel, l.stride); break;
            case LayerKind::Upsample: values[i] = upsample_nearest2x(x); break;
            case LayerKind::Concat: {
                std::vector<Tensor<T>> parts;
                parts.reserve(l.inputs.size());
                for (int j : l.inputs) parts.push_back(values[static_cast<std::size_t>(j)]);
                values[i] = concat_channels<T>(std::span<const Tensor<T>>(parts));
                break;
            }
            case LayerKind::Shuffle: values[i] = channel_shuffle(x, l.groups); break;
            case LayerKind::SimAM: values[i] = simam::apply(x, simam::SimamConfig{l.lambda}); break;
        }
        for (int j : l.inputs) {
            if (last[static_cast<std::size_t>(j)] == static_cast<int>(i)) values[static_cast<std::size_t>(j)] = Tensor<T>{};
        }
    }
    std::vector<Tensor<T>> out;
    out.reserve(graph.outputs().size());
    for (int o : graph.outputs()) out.push_back(values[static_cast<std::size_t>(o)]);
    return out;
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<float> init_weights<float>(const Graph&, std::uint64_t, double, int);
template Weights<double> init_weights<double>(const Graph&, std::uint64_t, double, int);
template std::vector<Tensor<float>> forward<float>(const Graph&, Weights<float>&, const Tensor<float>&, const ForwardOptions&);
template std::vector<Tensor<double>> forward<double>(const Graph&, Weights<double>&, const Tensor<double>&,
                                                     const ForwardOptions&);

}  // namespace istd::nn
