#include <doctest.h>

#include <algorithm>

#include "graph_audit.hpp"
#include "istd/blocks.hpp"
#include "oracles.hpp"

using namespace istd::nn;
using istd::Shape;
using T = istd::Tensor<double>;

namespace {

/// Closed-form CBS count, independent of the graph code.
std::int64_t cbs_count(std::int64_t ci, std::int64_t co, std::int64_t k, std::int64_t groups = 1) {
    return ci / groups * co * k * k + 2 * co;
}

std::int64_t block_params(const BlockSpec& spec, int hw = 32) { return param_count(block_graph(spec, hw, hw)); }

}  // namespace

TEST_CASE("backbone golden parameter counts") {
    CHECK(block_params({BlockKind::CBS, 3, 32, 3, 1, 0}) == 928);
    CHECK(block_params({BlockKind::CBS, 32, 64, 3, 2, 0}) == 18560);
    CHECK(block_params({BlockKind::CBS, 64, 64, 3, 1, 0}) == 36992);
    CHECK(block_params({BlockKind::CBS, 64, 128, 3, 2, 0}) == 73984);
    CHECK(block_params({BlockKind::ELAN, 128, 256, 3, 1, 64}) == 230656);
    CHECK(block_params({BlockKind::MP1, 256, 256, 3, 2, 0}) == 213760);
    CHECK(block_params({BlockKind::ELAN, 256, 512, 3, 1, 128}) == 920064);
    CHECK(block_params({BlockKind::MP1, 512, 512, 3, 2, 0}) == 853504);
    CHECK(block_params({BlockKind::ELAN, 512, 1024, 3, 1, 256}) == 3675136);
    const std::int64_t rows = 928 + 18560 + 36992 + 73984 + 230656 + 213760 + 920064 + 853504 + 3675136;
    CHECK(rows == 6023584);
}

TEST_CASE("block parameter counts against closed forms") {
    SUBCASE("cbs") {
        for (auto [ci, co, k] : {std::tuple{3, 8, 3}, {16, 4, 1}, {5, 7, 5}}) {
            CHECK(block_params({BlockKind::CBS, ci, co, k, 1, 0}) == cbs_count(ci, co, k));
        }
    }
    SUBCASE("gsconv") {
        CHECK(block_params({BlockKind::GSConv, 64, 64, 1, 1, 0}) == 2464);
        for (auto [ci, co, k] : {std::tuple{64, 64, 1}, {32, 48, 3}, {7, 10, 3}}) {
            const std::int64_t h = co / 2;
            CHECK(block_params({BlockKind::GSConv, ci, co, k, 1, 0}) == ci * h * k * k + 2 * h + h * 9 + 2 * h);
        }
    }
    SUBCASE("elan and mp1 decompose into their CBS parts") {
        const std::int64_t h = 16;
        CHECK(block_params({BlockKind::ELAN, 24, 64, 3, 1, 16}) ==
              2 * cbs_count(24, h, 1) + 4 * cbs_count(h, h, 3) + cbs_count(4 * h, 64, 1));
        CHECK(block_params({BlockKind::MP1, 40, 40, 3, 2, 0}) ==
              2 * cbs_count(40, 20, 1) + cbs_count(20, 20, 3));
    }
    SUBCASE("composition is additive") {
        const std::int64_t gs1 = block_params({BlockKind::GSConv, 24, 32, 1, 1, 0});
        const std::int64_t gs2 = block_params({BlockKind::GSConv, 32, 32, 3, 1, 0});
        CHECK(block_params({BlockKind::GSBottleneck, 24, 32, 3, 1, 0}) == gs1 + gs2);
        const std::int64_t vov = cbs_count(48, 16, 1) + block_params({BlockKind::GSBottleneck, 16, 16, 3, 1, 0}) +
                                 cbs_count(48, 16, 1) + cbs_count(32, 32, 1);
        CHECK(block_params({BlockKind::VoVGSCSP, 48, 32, 1, 1, 0}) == vov);
    }
    SUBCASE("vov-gscsp is lighter than elan-w") {
        CHECK(block_params({BlockKind::VoVGSCSP, 512, 256, 1, 1, 0}) == 281216);
        CHECK(block_params({BlockKind::ELAN_W, 512, 256, 3, 1, 64}) == 448000);
        for (auto [ci, co] : {std::pair{512, 256}, {256, 128}, {384, 256}, {512, 512}, {64, 32}}) {
            CHECK(block_params({BlockKind::VoVGSCSP, ci, co, 1, 1, 0}) <
                  block_params({BlockKind::ELAN_W, ci, co, 3, 1, co / 4}));
        }
    }
    SUBCASE("simam and an empty graph add nothing") {
        CHECK(block_params({BlockKind::SimAM, 8, 8, 1, 1, 0}) == 0);
        GraphBuilder g(3, 8, 8);
        CHECK(param_count(std::move(g).finish()) == 0);
    }
}

TEST_CASE("block constraints") {
    CHECK_THROWS_AS(block_graph({BlockKind::ELAN, 64, 100, 3, 1, 32}, 8, 8), istd::ValueError);
    CHECK_THROWS_AS(block_graph({BlockKind::ELAN_W, 64, 100, 3, 1, 32}, 8, 8), istd::ValueError);
    CHECK_THROWS_AS(block_graph({BlockKind::MP1, 7, 7, 3, 2, 0}, 8, 8), istd::ValueError);
    CHECK_THROWS_AS(block_graph({BlockKind::GSConv, 8, 7, 1, 1, 0}, 8, 8), istd::ValueError);
    CHECK_THROWS_AS(block_graph({BlockKind::VoVGSCSP, 8, 9, 1, 1, 0}, 8, 8), istd::ValueError);
    CHECK_THROWS_AS(block_graph({BlockKind::GSBottleneck, 8, 5, 1, 1, 0}, 8, 8), istd::ValueError);
}

TEST_CASE("block output shapes") {
    const auto out = [](const BlockSpec& s, int hw) { return block_graph(s, hw, hw).output_shape(0); };
    CHECK(out({BlockKind::MP1, 256, 256, 3, 2, 0}, 160) == Shape{1, 256, 80, 80});
    CHECK(out({BlockKind::CBS, 32, 64, 3, 2, 0}, 160) == Shape{1, 64, 80, 80});
    CHECK(out({BlockKind::ELAN, 128, 256, 3, 1, 64}, 20) == Shape{1, 256, 20, 20});
    CHECK(out({BlockKind::ELAN_W, 64, 32, 3, 1, 8}, 12) == Shape{1, 32, 12, 12});
    CHECK(out({BlockKind::GSConv, 16, 32, 3, 2, 0}, 12) == Shape{1, 32, 6, 6});
    CHECK(out({BlockKind::GSBottleneck, 16, 8, 3, 1, 0}, 9) == Shape{1, 8, 9, 9});
    CHECK(out({BlockKind::VoVGSCSP, 24, 16, 1, 1, 0}, 10) == Shape{1, 16, 10, 10});

    SUBCASE("batch dimension is preserved at run time") {
        const Graph g = block_graph({BlockKind::MP1, 8, 8, 3, 2, 0}, 10, 10);
        auto w = init_weights<double>(g, 1);
        const auto y = forward(g, w, oracle::random_tensor({3, 8, 10, 10}, 2));
        CHECK(y[0].shape() == Shape{3, 8, 5, 5});
    }
}

TEST_CASE("gsconv ends in a channel permutation") {
    const Graph g = block_graph({BlockKind::GSConv, 6, 8, 3, 1, 0}, 7, 7);
    auto w = init_weights<double>(g, 3);
    const T x = oracle::random_tensor({1, 6, 7, 7}, 4);
    const auto y = forward(g, w, x)[0];
    // The concat feeding the shuffle carries the same multiset of values.
    const int concat = static_cast<int>(g.layers().size()) - 2;
    REQUIRE(g.layers()[static_cast<std::size_t>(concat)].kind == LayerKind::Concat);
    GraphBuilder gb(6, 7, 7);
    const int sc = cbs(gb, gb.input(), 4, 3, 1, "sc");
    gb.mark_output(sc);
    const Graph sub = std::move(gb).finish();
    std::vector<double> after(y.data().begin(), y.data().end());
    std::vector<double> before;
    {
        // Rebuild the pre-shuffle tensor by undoing the permutation.
        const auto perm = istd::channel_shuffle_permutation(8, 2);
        before.resize(after.size());
        for (int o = 0; o < 8; ++o) {
            std::copy_n(after.begin() + o * 49, 49, before.begin() + perm[static_cast<std::size_t>(o)] * 49);
        }
    }
    std::vector<double> a = after, b = before;
    std::ranges::sort(a);
    std::ranges::sort(b);
    CHECK(a == b);
    // The first half of the pre-shuffle tensor is the standard-conv branch.
    auto ws = init_weights<double>(sub, 3);
    for (std::size_t i = 0; i < ws.tensors.size(); ++i) ws.tensors[i] = w.tensors[i];
    const auto s = forward(sub, ws, x)[0];
    CHECK(std::equal(s.data().begin(), s.data().end(), before.begin()));
}

TEST_CASE("gs-bottleneck equals the composition of its two gsconvs") {
    const Graph whole = block_graph({BlockKind::GSBottleneck, 6, 8, 3, 1, 0}, 9, 9);
    const Graph first = block_graph({BlockKind::GSConv, 6, 8, 1, 1, 0}, 9, 9);
    const Graph second = block_graph({BlockKind::GSConv, 8, 8, 3, 1, 0}, 9, 9);
    auto w = init_weights<double>(whole, 11);
    auto w1 = init_weights<double>(first, 0);
    auto w2 = init_weights<double>(second, 0);
    REQUIRE(w.tensors.size() == w1.tensors.size() + w2.tensors.size());
    std::copy_n(w.tensors.begin(), w1.tensors.size(), w1.tensors.begin());
    std::copy(w.tensors.begin() + static_cast<std::ptrdiff_t>(w1.tensors.size()), w.tensors.end(), w2.tensors.begin());
    const T x = oracle::random_tensor({2, 6, 9, 9}, 12);
    const auto y = forward(whole, w, x)[0];
    const auto z = forward(second, w2, forward(first, w1, x)[0])[0];
    CHECK(std::equal(y.data().begin(), y.data().end(), z.data().begin(), z.data().end()));
}

TEST_CASE("block gradient audits") {
    for (const BlockSpec& s : {BlockSpec{BlockKind::CBS, 3, 4, 3, 2, 0}, BlockSpec{BlockKind::GSConv, 4, 6, 3, 1, 0},
                               BlockSpec{BlockKind::GSBottleneck, 4, 4, 3, 1, 0},
                               BlockSpec{BlockKind::VoVGSCSP, 6, 8, 1, 1, 0}, BlockSpec{BlockKind::ELAN, 4, 8, 3, 1, 2},
                               BlockSpec{BlockKind::ELAN_W, 4, 8, 3, 1, 2}, BlockSpec{BlockKind::MP1, 4, 4, 3, 2, 0}}) {
        CAPTURE(to_string(s.kind));
        const Graph g = block_graph(s, 6, 6);
        const auto r = oracle::audit_graph(g, 2, 21, 300);
        CHECK(r.max_rel_error <= 1e-5);
    }
}
