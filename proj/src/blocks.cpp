#include "istd/blocks.hpp"

#include "istd/error.hpp"

namespace istd::nn {

namespace {

void require_positive(int v, const char* what, const std::string& name) {
    if (v <= 0) throw ValueError(name + ": " + what + " must be positive, got " + std::to_string(v));
}

void require_even(int c, const std::string& name) {
    if (c % 2 != 0) throw ValueError(name + ": channel count must be even, got " + std::to_string(c));
}

void require_four_hidden(int hidden, int c_out, const std::string& name) {
    require_positive(hidden, "hidden", name);
    if (c_out != 4 * hidden) {
        throw ValueError(name + ": c_out " + std::to_string(c_out) + " must equal 4 * hidden (" + std::to_string(4 * hidden) + ")");
    }
}

/// The unscoped CBS layers, used inside any module.
int cbs_layers(GraphBuilder& g, int x, int c_out, int k, int s, int groups) {
    const int c = g.conv(x, c_out, k, s, groups, false, "conv");
    const int b = g.batchnorm(c, "bn");
    return g.silu(b, "act");
}

}  // namespace

int cbs(GraphBuilder& g, int x, int c_out, int k, int s, const std::string& name) {
    require_positive(c_out, "c_out", name);
    g.begin_module(name, {BlockKind::CBS, g.shape(x).c, c_out, k, s, 0});
    const int y = cbs_layers(g, x, c_out, k, s, 1);
    g.end_module();
    return y;
}

int elan(GraphBuilder& g, int x, int hidden, int c_out, const std::string& name) {
    require_four_hidden(hidden, c_out, name);
    g.begin_module(name, {BlockKind::ELAN, g.shape(x).c, c_out, 3, 1, hidden});
    const int stem1 = cbs(g, x, hidden, 1, 1, "stem1");
    const int stem2 = cbs(g, x, hidden, 1, 1, "stem2");
    const int c1 = cbs(g, stem2, hidden, 3, 1, "conv1");
    const int c2 = cbs(g, c1, hidden, 3, 1, "conv2");
    const int c3 = cbs(g, c2, hidden, 3, 1, "conv3");
    const int c4 = cbs(g, c3, hidden, 3, 1, "conv4");
    const int cat = g.concat({c4, c2, stem2, stem1}, "concat");
    const int y = cbs(g, cat, c_out, 1, 1, "fuse");
    g.end_module();
    return y;
}

int elan_w(GraphBuilder& g, int x, int hidden, int c_out, const std::string& name) {
    require_four_hidden(hidden, c_out, name);
    g.begin_module(name, {BlockKind::ELAN_W, g.shape(x).c, c_out, 3, 1, hidden});
    const int stem1 = cbs(g, x, 2 * hidden, 1, 1, "stem1");
    const int stem2 = cbs(g, x, 2 * hidden, 1, 1, "stem2");
    const int c1 = cbs(g, stem2, hidden, 3, 1, "conv1");
    const int c2 = cbs(g, c1, hidden, 3, 1, "conv2");
    const int c3 = cbs(g, c2, hidden, 3, 1, "conv3");
    const int c4 = cbs(g, c3, hidden, 3, 1, "conv4");
    const int cat = g.concat({c4, c3, c2, c1, stem2, stem1}, "concat");
    const int y = cbs(g, cat, c_out, 1, 1, "fuse");
    g.end_module();
    return y;
}

int mp1(GraphBuilder& g, int x, const std::string& name) {
    const int c = g.shape(x).c;
    require_even(c, name);
    g.begin_module(name, {BlockKind::MP1, c, c, 3, 2, c / 2});
    const int pool = g.maxpool(x, 2, 2, "pool");
    const int a = cbs(g, pool, c / 2, 1, 1, "pool_cbs");
    const int b1 = cbs(g, x, c / 2, 1, 1, "reduce");
    const int b = cbs(g, b1, c / 2, 3, 2, "down");
    const int y = g.concat({b, a}, "concat");
    g.end_module();
    return y;
}

int gsconv(GraphBuilder& g, int x, int c_out, int k, int s, const std::string& name) {
    require_positive(c_out, "c_out", name);
    require_even(c_out, name);
    g.begin_module(name, {BlockKind::GSConv, g.shape(x).c, c_out, k, s, c_out / 2});
    const int sc = cbs(g, x, c_out / 2, k, s, "sc");
    g.begin_module("dw", {BlockKind::CBS, c_out / 2, c_out / 2, 3, 1, 0});
    const int dw = cbs_layers(g, sc, c_out / 2, 3, 1, c_out / 2);
    g.end_module();
    const int cat = g.concat({sc, dw}, "concat");
    const int y = g.shuffle(cat, 2, "shuffle");
    g.end_module();
    return y;
}

int gs_bottleneck(GraphBuilder& g, int x, int c_out, const std::string& name) {
    require_even(c_out, name);
    g.begin_module(name, {BlockKind::GSBottleneck, g.shape(x).c, c_out, 3, 1, 0});
    const int a = gsconv(g, x, c_out, 1, 1, "gs1");
    const int y = gsconv(g, a, c_out, 3, 1, "gs2");
    g.end_module();
    return y;
}

int vov_gscsp(GraphBuilder& g, int x, int c_out, const std::string& name) {
    require_positive(c_out, "c_out", name);
    require_even(c_out, name);
    g.begin_module(name, {BlockKind::VoVGSCSP, g.shape(x).c, c_out, 1, 1, c_out / 2});
    const int a0 = cbs(g, x, c_out / 2, 1, 1, "cv1");
    const int a = gs_bottleneck(g, a0, c_out / 2, "gsb");
    const int b = cbs(g, x, c_out / 2, 1, 1, "cv2");
    const int cat = g.concat({a, b}, "concat");
    const int y = cbs(g, cat, c_out, 1, 1, "cv3");
    g.end_module();
    return y;
}

int add_block(GraphBuilder& g, int x, const BlockSpec& spec, const std::string& name) {
    if (spec.c_in != g.shape(x).c) {
        throw ShapeError(name + ": block expects " + std::to_string(spec.c_in) + " input channels, got " +
                         std::to_string(g.shape(x).c));
    }
    switch (spec.kind) {
        case BlockKind::CBS: return cbs(g, x, spec.c_out, spec.k, spec.s, name);
        case BlockKind::ELAN: return elan(g, x, spec.hidden, spec.c_out, name);
        case BlockKind::ELAN_W: return elan_w(g, x, spec.hidden, spec.c_out, name);
        case BlockKind::MP1: return mp1(g, x, name);
        case BlockKind::GSConv: return gsconv(g, x, spec.c_out, spec.k, spec.s, name);
        case BlockKind::GSBottleneck: return gs_bottleneck(g, x, spec.c_out, name);
        case BlockKind::VoVGSCSP: return vov_gscsp(g, x, spec.c_out, name);
        case BlockKind::SimAM: {
            g.begin_module(name, spec);
            const int y = g.simam(x, 1e-4, "simam");
            g.end_module();
            return y;
        }
        default: throw ValueError(name + ": " + to_string(spec.kind) + " is not a standalone block");
    }
}

Graph block_graph(const BlockSpec& spec, int h, int w) {
    GraphBuilder g(spec.c_in, h, w);
    g.mark_output(add_block(g, g.input(), spec, to_string(spec.kind)));
    return std::move(g).finish();
}

}  // namespace istd::nn
