#pragma once

#include <string>

#include "istd/graph.hpp"

namespace istd::nn {

/// Composite block builders. Each appends one named module to `g`, reading node `x` and returning
/// the output node. Input channels are taken from `x`.

/// conv (no bias) -> BN -> SiLU.
int cbs(GraphBuilder& g, int x, int c_out, int k, int s, const std::string& name);

/// Two 1x1 stems (c_in -> hidden); the second runs four 3x3 CBS (hidden -> hidden) tapped after conv 2
/// and conv 4; concat [conv4, conv2, stem2, stem1] -> 1x1 CBS to c_out. Requires c_out == 4 * hidden.
int elan(GraphBuilder& g, int x, int hidden, int c_out, const std::string& name);

/// Neck variant: stems at 2 * hidden, four 3x3 CBS at hidden each tapped, six-way concat
/// (8 * hidden) -> 1x1 CBS to c_out. Requires c_out == 4 * hidden.
int elan_w(GraphBuilder& g, int x, int hidden, int c_out, const std::string& name);

/// concat [3x3/s2 branch, maxpool branch], each c/2 channels. Requires even c.
int mp1(GraphBuilder& g, int x, const std::string& name);

/// CBS (c_in -> c_out/2, k, s) then depthwise 3x3 CBS, concat, shuffle with 2 groups. Requires even c_out.
int gsconv(GraphBuilder& g, int x, int c_out, int k, int s, const std::string& name);

/// gsconv 1x1 followed by gsconv 3x3.
int gs_bottleneck(GraphBuilder& g, int x, int c_out, const std::string& name);

/// concat [1x1 CBS -> gs_bottleneck, 1x1 CBS] (c_out/2 each) -> 1x1 CBS. Requires even c_out.
int vov_gscsp(GraphBuilder& g, int x, int c_out, const std::string& name);

/// Adds the block described by `spec` (ELAN kinds use spec.hidden).
int add_block(GraphBuilder& g, int x, const BlockSpec& spec, const std::string& name);

/// A standalone graph holding one block on an input of spec.c_in x h x w.
Graph block_graph(const BlockSpec& spec, int h, int w);

}  // namespace istd::nn
