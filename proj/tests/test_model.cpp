#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "graph_audit.hpp"
#include "istd/model.hpp"
#include "oracles.hpp"

using namespace istd::model;
using istd::Shape;
namespace nn = istd::nn;

TEST_CASE("backbone parameter totals") {
    const auto rec = backbone_graph(Backbone::reconstructed, 640);
    const auto orig = backbone_graph(Backbone::original, 640);
    CHECK(nn::param_count(rec) == 6023584);
    CHECK(nn::param_count(orig) == 13371808);
    const double ratio = static_cast<double>(nn::param_count(rec)) / static_cast<double>(nn::param_count(orig));
    CHECK(std::abs(ratio - 0.4504) < 1e-3);
    CHECK(rec.output_shape(0) == Shape{1, 256, 160, 160});
    CHECK(rec.output_shape(1) == Shape{1, 512, 80, 80});
    CHECK(rec.output_shape(2) == Shape{1, 1024, 40, 40});
    CHECK(orig.output_shape(3) == Shape{1, 1024, 20, 20});

    SUBCASE("the nine top-level rows in order") {
        const std::vector<std::int64_t> rows{928, 18560, 36992, 73984, 230656, 213760, 920064, 853504, 3675136};
        std::vector<std::int64_t> got;
        for (int m = 0; m < static_cast<int>(rec.modules().size()); ++m) {
            if (rec.modules()[static_cast<std::size_t>(m)].depth == 1) got.push_back(rec.module_params(m));
        }
        CHECK(got == rows);
    }
    SUBCASE("input must be divisible by 32") {
        CHECK_THROWS_AS(backbone_graph(Backbone::reconstructed, 100), istd::ValueError);
        CHECK_THROWS_AS(build_model(ModelConfig{.input_size = 48}), istd::ValueError);
    }
}

TEST_CASE("neck and heads") {
    ModelConfig cfg;
    cfg.n_classes = 5;
    const auto g = build_model(cfg);
    CHECK(g.output_shape(0) == Shape{1, 30, 160, 160});
    CHECK(g.output_shape(1) == Shape{1, 30, 80, 80});
    CHECK(g.output_shape(2) == Shape{1, 30, 40, 40});
    CHECK(g.count_kind(nn::LayerKind::SimAM) == 2);
    const std::vector<int> neck_channels{128, 256, 512};
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& head = g.layers()[static_cast<std::size_t>(g.outputs()[i])];
        CHECK(g.layers()[static_cast<std::size_t>(head.inputs[0])].out.c == neck_channels[i]);
    }
    // No layer at stride 32.
    CHECK(std::ranges::all_of(g.layers(), [](const nn::Layer& l) { return l.out.h >= 40; }));

    SUBCASE("ltsn is lighter than the elan-w baseline") {
        ModelConfig base = cfg;
        base.neck = Neck::elanw_baseline;
        const auto b = build_model(base);
        CHECK(nn::param_count(g) < nn::param_count(b));
        CHECK(b.count_kind(nn::LayerKind::SimAM) == 0);
        CHECK(b.output_shape(0) == g.output_shape(0));
    }
    SUBCASE("simam adds no parameters") {
        nn::GraphBuilder a(3, 64, 64), b(3, 64, 64);
        const auto ta = build_backbone(a, Backbone::reconstructed, 0.25);
        const auto tb = build_backbone(b, Backbone::reconstructed, 0.25);
        build_neck(a, ta, Neck::ltsn, 0.25);
        build_neck(b, tb, Neck::ltsn, 0.25);
        b.simam(b.input(), 1e-4, "extra");
        CHECK(nn::param_count(std::move(a).finish()) == nn::param_count(std::move(b).finish()));
    }
    SUBCASE("missing tap") {
        nn::GraphBuilder b(3, 64, 64);
        CHECK_THROWS_AS(build_neck(b, Taps{}, Neck::ltsn), istd::ValueError);
    }
}

TEST_CASE("flop counting") {
    CHECK(nn::conv_macs(3, 32, 3, 1, 640, 640) == 353894400);
    nn::GraphBuilder b(3, 640, 640);
    b.conv(b.input(), 32, 3, 1, 1, false, "c");
    const auto g = std::move(b).finish();
    CHECK(nn::count_flops(g) == 2 * 353894400LL);
    const auto m = build_model(ModelConfig{.width = 0.25, .input_size = 64});
    std::int64_t sum = 0;
    for (int i = 0; i < static_cast<int>(m.modules().size()); ++i) {
        if (m.modules()[static_cast<std::size_t>(i)].depth == 0) sum += m.module_flops(i);
    }
    CHECK(sum == nn::count_flops(m));
}

TEST_CASE("forward determinism and batch independence") {
    const ModelConfig cfg{.width = 0.125, .input_size = 64, .n_classes = 2};
    const auto g = build_model(cfg);
    auto w = nn::init_weights<float>(g, 7);
    const auto zeros = nn::forward(g, w, istd::Tensor<float>::zeros({1, 3, 64, 64}));
    for (const auto& t : zeros) CHECK(std::ranges::all_of(t.data(), [](float v) { return std::isfinite(v); }));

    const auto x = istd::cast<float>(oracle::random_tensor({1, 3, 64, 64}, 8));
    const auto y1 = nn::forward(g, w, x);
    const auto y2 = nn::forward(g, w, x);
    for (std::size_t s = 0; s < 3; ++s) {
        CHECK(std::ranges::equal(y1[s].data(), y2[s].data()));
    }
    std::vector<float> dup(x.data().begin(), x.data().end());
    dup.insert(dup.end(), x.data().begin(), x.data().end());
    const auto y3 = nn::forward(g, w, istd::Tensor<float>::from_data({2, 3, 64, 64}, dup));
    for (std::size_t s = 0; s < 3; ++s) {
        const auto half = y1[s].numel();
        CHECK(std::equal(y3[s].data().begin(), y3[s].data().begin() + static_cast<std::ptrdiff_t>(half),
                         y3[s].data().begin() + static_cast<std::ptrdiff_t>(half)));
        CHECK(std::equal(y1[s].data().begin(), y1[s].data().end(), y3[s].data().begin()));
    }
    CHECK_THROWS_AS(nn::forward(g, w, istd::Tensor<float>::zeros({1, 3, 32, 64})), istd::ShapeError);
}

TEST_CASE("head initialization and zero-weight head") {
    const ModelConfig cfg{.width = 0.125, .input_size = 64, .n_classes = 3};
    const auto g = build_model(cfg);
    auto w = nn::init_weights<double>(g, 1);
    const auto& bias = w.get(g, "head0.conv.bias");
    for (int a = 0; a < 3; ++a) CHECK(bias.data()[static_cast<std::size_t>(a * 8 + 4)] == -4.5);
    for (std::size_t i = 0; i < g.params().size(); ++i) {
        if (g.layers()[static_cast<std::size_t>(g.params()[i].layer)].tag == "head") {
            for (auto& v : w.tensors[i].mutable_data()) v = 0.0;
        }
    }
    const auto raw = nn::forward(g, w, oracle::random_tensor({1, 3, 64, 64}, 2));
    const auto dets = decode(raw, cfg.anchors, 3, 64, DecodeOptions{0.0});
    REQUIRE(!dets[0].empty());
    for (const auto& d : dets[0]) CHECK(d.score == doctest::Approx(0.25));
    for (const auto& t : raw) {
        for (int a = 0; a < 3; ++a) CHECK(oracle::sigmoid(t.at(0, a * 8 + 4, 0, 0)) == 0.5);
    }
}

TEST_CASE("decode") {
    const AnchorSet anchors = AnchorSet::defaults();
    const int K = 2, per = 7;
    auto maps = [&](double fill) {
        std::vector<istd::Tensor<double>> raw;
        for (int s : {16, 8, 4}) raw.push_back(istd::Tensor<double>::full({1, 3 * per, s, s}, fill));
        return raw;
    };
    SUBCASE("all logits -20 give nothing") {
        CHECK(decode(maps(-20.0), anchors, K, 64).front().empty());
    }
    SUBCASE("one hand-set cell against scalar evaluation") {
        auto raw = maps(-20.0);
        // Scale P3 (stride 8), anchor 1, row 3, column 5.
        const double tx = 0.3, ty = -0.7, tw = 0.4, th = -0.2, obj = 2.0, c0 = -1.0, c1 = 1.5;
        const double vals[per] = {tx, ty, tw, th, obj, c0, c1};
        auto d = raw[1].mutable_data();
        for (int j = 0; j < per; ++j) d[(static_cast<std::size_t>(per + j) * 8 + 3) * 8 + 5] = vals[j];
        const auto dets = decode(raw, anchors, K, 64);
        REQUIRE(dets[0].size() == 1);
        const auto& det = dets[0][0];
        const auto sg = oracle::sigmoid;
        CHECK(det.class_id == 1);
        CHECK(det.score == doctest::Approx(sg(obj) * sg(c1)).epsilon(1e-12));
        CHECK(det.bbox.cx == doctest::Approx((2 * sg(tx) - 0.5 + 5) * 8).epsilon(1e-12));
        CHECK(det.bbox.cy == doctest::Approx((2 * sg(ty) - 0.5 + 3) * 8).epsilon(1e-12));
        CHECK(det.bbox.w == doctest::Approx(std::pow(2 * sg(tw), 2) * 24).epsilon(1e-12));
        CHECK(det.bbox.h == doctest::Approx(std::pow(2 * sg(th), 2) * 24).epsilon(1e-12));
    }
    SUBCASE("width stays below four anchors and boxes stay inside") {
        const auto raw = std::vector<istd::Tensor<double>>{oracle::random_tensor({1, 21, 16, 16}, 1, 6.0),
                                                           oracle::random_tensor({1, 21, 8, 8}, 2, 6.0),
                                                           oracle::random_tensor({1, 21, 4, 4}, 3, 6.0)};
        const auto dets = decode(raw, anchors, K, 64, DecodeOptions{0.0});
        CHECK(dets[0].size() > 500);
        for (const auto& d : dets[0]) {
            CHECK(d.bbox.w > 0.0);
            CHECK(d.bbox.w < 4 * 72.0);
            CHECK(d.bbox.cx - d.bbox.w / 2 >= -1e-9);
            CHECK(d.bbox.cx + d.bbox.w / 2 <= 64 + 1e-9);
            CHECK(d.score >= 0.0);
            CHECK(d.score <= 1.0);
        }
        CHECK(decode(raw, anchors, K, 64, DecodeOptions{0.0, 10})[0].size() == 10);
    }
    SUBCASE("threshold outside [0, 1]") {
        CHECK_THROWS_AS(decode(maps(0.0), anchors, K, 64, DecodeOptions{1.5}), istd::ValueError);
    }
}

TEST_CASE("config and anchors") {
    ModelConfig c{.neck = Neck::elanw_baseline, .width = 0.25, .input_size = 160, .n_classes = 4};
    const auto back = ModelConfig::from_json(c.to_json());
    CHECK(back.neck == Neck::elanw_baseline);
    CHECK(back.width == 0.25);
    CHECK(back.input_size == 160);
    CHECK(back.n_classes == 4);
    CHECK(back.anchors == c.anchors);
    CHECK_THROWS_AS(ModelConfig::from_json("{\"neck\": \"fpn\"}"), istd::ValueError);
    CHECK_THROWS_AS(ModelConfig::from_json("not json"), istd::ValueError);
    AnchorSet bad = AnchorSet::defaults();
    bad.scales[0][0] = Anchor{20, 20};
    CHECK_THROWS_AS(bad.validate(), istd::ValueError);
    bad.scales[0][0] = Anchor{-1, 4};
    CHECK_THROWS_AS(bad.validate(), istd::ValueError);
    CHECK(scaled_channels(32, 0.125) == 4);
    CHECK(scaled_channels(256, 0.25) == 64);
    CHECK(scaled_channels(1024, 0.125) == 128);
}

TEST_CASE("weights file round trip") {
    const ModelConfig cfg{.width = 0.125, .input_size = 64, .n_classes = 1};
    const auto g = build_model(cfg);
    auto w = nn::init_weights<float>(g, 5);
    w.running[3].mean[1] = 0.25f;
    w.running[3].var[2] = 3.5f;
    const auto path = std::filesystem::temp_directory_path() / "istd_test_weights.bin";
    save_weights(path, g, w);
    const auto r = load_weights(path, g);
    REQUIRE(r.tensors.size() == w.tensors.size());
    for (std::size_t i = 0; i < w.tensors.size(); ++i) CHECK(std::ranges::equal(r.tensors[i].data(), w.tensors[i].data()));
    CHECK(r.running[3].mean == w.running[3].mean);
    CHECK(r.running[3].var == w.running[3].var);

    std::ifstream in(path, std::ios::binary);
    char magic[5];
    in.read(magic, 5);
    CHECK(std::string(magic, 5) == "ISTD1");

    SUBCASE("corruption is reported") {
        std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
        CHECK_THROWS_AS(load_weights(path, g), istd::IoError);
        std::ofstream(path, std::ios::binary) << "NOPE!";
        CHECK_THROWS_AS(load_weights(path, g), istd::IoError);
    }
    SUBCASE("a different graph does not load") {
        const auto other = build_model(ModelConfig{.width = 0.25, .input_size = 64, .n_classes = 1});
        CHECK_THROWS(load_weights(path, other));
    }
    std::filesystem::remove(path);
}

TEST_CASE("full-model gradient audit") {
    const auto g = build_model(ModelConfig{.width = 0.125, .input_size = 64, .n_classes = 1});
    const auto r = oracle::audit_graph(g, 2, 31, 400);
    CAPTURE(r.worst);
    CHECK(r.max_rel_error <= 1e-4);
}
