#include "istd/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <span>
#include <unordered_map>
#include <cmath>
#include <fstream>
#include <sstream>

#include "istd/blocks.hpp"
#include "istd/error.hpp"

namespace istd::model {

using nn::GraphBuilder;

const char* to_string(Backbone v) { return v == Backbone::reconstructed ? "reconstructed" : "original"; }
const char* to_string(Neck v) { return v == Neck::ltsn ? "ltsn" : "elanw_baseline"; }

Backbone parse_backbone(const std::string& s) {
    if (s == "reconstructed") return Backbone::reconstructed;
    if (s == "original") return Backbone::original;
    throw ValueError("unknown backbone variant '" + s + "'");
}

Neck parse_neck(const std::string& s) {
    if (s == "ltsn") return Neck::ltsn;
    if (s == "elanw_baseline") return Neck::elanw_baseline;
    throw ValueError("unknown neck variant '" + s + "'");
}

AnchorSet AnchorSet::defaults() {
    return AnchorSet{{{{{{4, 4}, {8, 8}, {12, 12}}}, {{{16, 16}, {24, 24}, {32, 32}}}, {{{40, 40}, {56, 56}, {72, 72}}}}}};
}

void AnchorSet::validate() const {
    for (const auto& s : scales) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!(s[i].w > 0) || !(s[i].h > 0) || !std::isfinite(s[i].w) || !std::isfinite(s[i].h)) {
                throw ValueError("anchor sides must be positive and finite");
            }
            if (i > 0 && s[i].w * s[i].h < s[i - 1].w * s[i - 1].h) {
                throw ValueError("anchors must be sorted by ascending area within a scale");
            }
        }
    }
}

int scaled_channels(int c, double width) {
    if (!(width > 0)) throw ValueError("width multiplier must be positive");
    const int scaled = static_cast<int>(std::lround(c * width / 4.0)) * 4;
    return std::max(4, scaled);
}

void ModelConfig::validate() const {
    if (!(width > 0) || width > 4) throw ValueError("width multiplier must lie in (0, 4]");
    if (input_size <= 0 || input_size % 32 != 0) {
        throw ValueError("input size must be a positive multiple of 32, got " + std::to_string(input_size));
    }
    if (n_classes <= 0) throw ValueError("n_classes must be positive");
    if (!(simam_lambda > 0)) throw ValueError("simam_lambda must be positive");
    anchors.validate();
}

std::string ModelConfig::to_json() const {
    nlohmann::ordered_json j;
    j["backbone"] = to_string(backbone);
    j["neck"] = to_string(neck);
    j["width"] = width;
    j["input_size"] = input_size;
    j["n_classes"] = n_classes;
    j["simam_lambda"] = simam_lambda;
    j["simam"] = simam;
    auto& a = j["anchors"] = nlohmann::ordered_json::array();
    for (const auto& s : anchors.scales) {
        auto row = nlohmann::ordered_json::array();
        for (const auto& an : s) row.push_back({an.w, an.h});
        a.push_back(row);
    }
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    ModelConfig c;
    try {
        const auto j = nlohmann::json::parse(text);
        c.backbone = parse_backbone(j.value("backbone", std::string(to_string(c.backbone))));
        c.neck = parse_neck(j.value("neck", std::string(to_string(c.neck))));
        c.width = j.value("width", c.width);
        c.input_size = j.value("input_size", c.input_size);
        c.n_classes = j.value("n_classes", c.n_classes);
        c.simam_lambda = j.value("simam_lambda", c.simam_lambda);
        c.simam = j.value("simam", c.simam);
        if (j.contains("anchors")) {
            const auto& a = j.at("anchors");
            if (a.size() != 3) throw ValueError("anchors must list 3 scales");
            for (std::size_t s = 0; s < 3; ++s) {
                if (a[s].size() != 3) throw ValueError("each anchor scale must list 3 anchors");
                for (std::size_t i = 0; i < 3; ++i) {
                    c.anchors.scales[s][i] = Anchor{a[s][i].at(0).get<double>(), a[s][i].at(1).get<double>()};
                }
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("invalid model config: ") + e.what());
    }
    c.validate();
    return c;
}

void ModelConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json() << '\n';
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

Taps build_backbone(GraphBuilder& g, Backbone variant, double width) {
    const Shape& in = g.shape(g.input());
    if (in.h % 32 != 0 || in.w % 32 != 0) {
        throw ValueError("backbone input must be divisible by 32, got " + std::to_string(in.h) + "x" + std::to_string(in.w));
    }
    const auto c = [&](int ch) { return scaled_channels(ch, width); };
    g.begin_module("backbone", {nn::BlockKind::CBS, in.c, c(1024), 3, 1, 0});
    int x = nn::cbs(g, g.input(), c(32), 3, 1, "cbs0");
    x = nn::cbs(g, x, c(64), 3, 2, "cbs1");
    x = nn::cbs(g, x, c(64), 3, 1, "cbs2");
    x = nn::cbs(g, x, c(128), 3, 2, "cbs3");
    Taps t;
    t.p2 = nn::elan(g, x, c(256) / 4, c(256), "elan1");
    x = nn::mp1(g, t.p2, "mp1");
    t.p3 = nn::elan(g, x, c(512) / 4, c(512), "elan2");
    x = nn::mp1(g, t.p3, "mp2");
    t.p4 = nn::elan(g, x, c(1024) / 4, c(1024), "elan3");
    if (variant == Backbone::original) {
        x = nn::mp1(g, t.p4, "mp3");
        t.p5 = nn::elan(g, x, c(1024) / 4, c(1024), "elan4");
    }
    g.end_module();
    return t;
}

nn::Graph backbone_graph(Backbone variant, int input_size, double width, bool biased_convs) {
    GraphBuilder g(3, input_size, input_size);
    g.force_conv_bias(biased_convs);
    const Taps t = build_backbone(g, variant, width);
    g.mark_output(t.p2);
    g.mark_output(t.p3);
    g.mark_output(t.p4);
    if (t.p5 >= 0) g.mark_output(t.p5);
    return std::move(g).finish();
}

NeckOut build_neck(GraphBuilder& g, const Taps& taps, Neck variant, double width, double lambda, bool simam) {
    if (taps.p2 < 0 || taps.p3 < 0 || taps.p4 < 0) throw ValueError("neck requires the P2, P3 and P4 taps");
    const auto c = [&](int ch) { return scaled_channels(ch, width); };
    const bool ltsn = variant == Neck::ltsn;
    const auto merge = [&](int x, int c_out, const std::string& name) {
        return ltsn ? nn::vov_gscsp(g, x, c_out, name) : nn::elan_w(g, x, c_out / 4, c_out, name);
    };
    const auto attend = [&](int x, const std::string& name) {
        if (!ltsn || !simam) return x;
        g.begin_module(name, {nn::BlockKind::SimAM, g.shape(x).c, g.shape(x).c, 1, 1, 0});
        const int y = g.simam(x, lambda, "simam");
        g.end_module();
        return y;
    };
    g.begin_module("neck", {ltsn ? nn::BlockKind::VoVGSCSP : nn::BlockKind::ELAN_W, g.shape(taps.p4).c, c(512), 1, 1, 0});
    // Top-down.
    const int a = attend(nn::cbs(g, taps.p4, c(256), 1, 1, "reduce_p4"), "simam1");
    const int up_a = g.upsample(a, "up1");
    const int r3 = nn::cbs(g, taps.p3, c(256), 1, 1, "reduce_p3");
    const int m3 = merge(g.concat({up_a, r3}, "cat1"), c(256), "merge3");
    const int b = attend(nn::cbs(g, m3, c(128), 1, 1, "reduce_m3"), "simam2");
    const int up_b = g.upsample(b, "up2");
    const int r2 = nn::cbs(g, taps.p2, c(128), 1, 1, "reduce_p2");
    NeckOut out;
    out.p2 = merge(g.concat({up_b, r2}, "cat2"), c(128), "out_p2");
    // Bottom-up.
    const int d3 = nn::gsconv(g, out.p2, c(128), 3, 2, "down3");
    out.p3 = merge(g.concat({d3, m3}, "cat3"), c(256), "out_p3");
    const int d4 = nn::gsconv(g, out.p3, c(256), 3, 2, "down4");
    out.p4 = merge(g.concat({d4, a}, "cat4"), c(512), "out_p4");
    g.end_module();
    return out;
}

std::array<int, 3> build_heads(GraphBuilder& g, const NeckOut& neck, int n_classes) {
    if (n_classes <= 0) throw ValueError("n_classes must be positive");
    const int c_out = 3 * (5 + n_classes);
    std::array<int, 3> heads{};
    const std::array<int, 3> src{neck.p2, neck.p3, neck.p4};
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string name = "head" + std::to_string(i);
        g.begin_module(name, {nn::BlockKind::Head, g.shape(src[i]).c, c_out, 1, 1, 0});
        heads[i] = g.conv(src[i], c_out, 1, 1, 1, true, "conv", "head");
        g.end_module();
    }
    return heads;
}

nn::Graph build_model(const ModelConfig& cfg) {
    cfg.validate();
    GraphBuilder g(3, cfg.input_size, cfg.input_size);
    const Taps t = build_backbone(g, cfg.backbone, cfg.width);
    const NeckOut n = build_neck(g, t, cfg.neck, cfg.width, cfg.simam_lambda, cfg.simam);
    for (int h : build_heads(g, n, cfg.n_classes)) g.mark_output(h);
    return std::move(g).finish();
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

template <typename T>
std::vector<std::vector<Detection>> decode(const std::vector<Tensor<T>>& raw, const AnchorSet& anchors, int n_classes,
                                           int input_size, const DecodeOptions& opt) {
    if (!(opt.conf_thresh >= 0.0 && opt.conf_thresh <= 1.0)) throw ValueError("conf_thresh must lie in [0, 1]");
    if (raw.size() != 3) throw ShapeError("decode expects 3 head maps, got " + std::to_string(raw.size()));
    const int per = 5 + n_classes;
    const int batch = raw[0].shape().n;
    const auto size = static_cast<double>(input_size);
    std::vector<std::vector<Detection>> out(static_cast<std::size_t>(batch));
    for (std::size_t s = 0; s < 3; ++s) {
        const Shape& sh = raw[s].shape();
        if (sh.c != 3 * per || sh.n != batch) {
            throw ShapeError("head map " + std::to_string(s) + " has shape " + sh.str() + ", expected " +
                             std::to_string(3 * per) + " channels");
        }
        const double stride = kStrides[s];
        const auto d = raw[s].data();
        const auto at = [&](int n, int c, int y, int x) {
            return static_cast<double>(d[((static_cast<std::size_t>(n) * sh.c + c) * sh.h + y) * sh.w + x]);
        };
        for (int n = 0; n < batch; ++n) {
            for (int a = 0; a < 3; ++a) {
                const Anchor& an = anchors.scales[s][static_cast<std::size_t>(a)];
                const int base = a * per;
                for (int y = 0; y < sh.h; ++y) {
                    for (int x = 0; x < sh.w; ++x) {
                        const double obj = sigmoid(at(n, base + 4, y, x));
                        int best = 0;
                        double best_p = -1.0;
                        for (int k = 0; k < n_classes; ++k) {
                            const double p = sigmoid(at(n, base + 5 + k, y, x));
                            if (p > best_p) {
                                best_p = p;
                                best = k;
                            }
                        }
                        const double score = obj * best_p;
                        if (score < opt.conf_thresh) continue;
                        const double cx = (2.0 * sigmoid(at(n, base, y, x)) - 0.5 + x) * stride;
                        const double cy = (2.0 * sigmoid(at(n, base + 1, y, x)) - 0.5 + y) * stride;
                        const double sw = 2.0 * sigmoid(at(n, base + 2, y, x));
                        const double shh = 2.0 * sigmoid(at(n, base + 3, y, x));
                        const double w = sw * sw * an.w;
                        const double h = shh * shh * an.h;
                        const double x1 = std::clamp(cx - w / 2, 0.0, size), x2 = std::clamp(cx + w / 2, 0.0, size);
                        const double y1 = std::clamp(cy - h / 2, 0.0, size), y2 = std::clamp(cy + h / 2, 0.0, size);
                        if (!(x2 > x1) || !(y2 > y1)) continue;
                        out[static_cast<std::size_t>(n)].push_back(
                            Detection{box::BBox{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1}, best, score});
                    }
                }
            }
        }
    }
    if (opt.max_candidates > 0) {
        for (auto& dets : out) {
            if (dets.size() <= opt.max_candidates) continue;
            std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
            dets.resize(opt.max_candidates);
        }
    }
    return out;
}

template std::vector<std::vector<Detection>> decode<float>(const std::vector<Tensor<float>>&, const AnchorSet&, int, int,
                                                           const DecodeOptions&);
template std::vector<std::vector<Detection>> decode<double>(const std::vector<Tensor<double>>&, const AnchorSet&, int, int,
                                                            const DecodeOptions&);

namespace {

constexpr char kMagic[] = {'I', 'S', 'T', 'D', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff), static_cast<char>((v >> 16) & 0xff),
                       static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated weights file while reading " + what);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 | static_cast<std::uint32_t>(b[2]) << 16 |
           static_cast<std::uint32_t>(b[3]) << 24;
}

void put_record(std::ostream& os, const std::string& name, const std::vector<std::uint32_t>& dims, std::span<const float> data) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) put_u32(os, d);
    for (float f : data) put_u32(os, std::bit_cast<std::uint32_t>(f));
}

struct Record {
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

}  // namespace

void save_weights(const std::filesystem::path& path, const nn::Graph& graph, const nn::Weights<float>& w) {
    if (w.tensors.size() != graph.params().size() || w.running.size() != graph.batchnorm_layers().size()) {
        throw ValueError("weights do not match the graph");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os.write(kMagic, sizeof kMagic);
    for (std::size_t i = 0; i < w.tensors.size(); ++i) {
        const Shape& s = w.tensors[i].shape();
        put_record(os, graph.params()[i].name,
                   {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
                    static_cast<std::uint32_t>(s.w)},
                   w.tensors[i].data());
    }
    for (std::size_t i = 0; i < w.running.size(); ++i) {
        const std::string& name = graph.layers()[static_cast<std::size_t>(graph.batchnorm_layers()[i])].name;
        const auto& r = w.running[i];
        put_record(os, name + ".running_mean", {static_cast<std::uint32_t>(r.mean.size())}, r.mean);
        put_record(os, name + ".running_var", {static_cast<std::uint32_t>(r.var.size())}, r.var);
    }
    if (!os) throw IoError("failed writing " + path.string());
}

nn::Weights<float> load_weights(const std::filesystem::path& path, const nn::Graph& graph) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    char magic[sizeof kMagic];
    if (!is.read(magic, sizeof magic) || !std::equal(std::begin(magic), std::end(magic), std::begin(kMagic))) {
        throw IoError(path.string() + " is not an ISTD1 weights file");
    }
    std::unordered_map<std::string, Record> records;
    while (is.peek() != std::char_traits<char>::eof()) {
        const std::uint32_t len = get_u32(is, "name length");
        if (len > 4096) throw IoError("corrupt record name length " + std::to_string(len));
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw IoError("truncated weights file while reading a name");
        const std::uint32_t rank = get_u32(is, name + " rank");
        if (rank > 8) throw IoError("corrupt rank for " + name);
        Record r;
        std::uint64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            r.dims.push_back(get_u32(is, name + " dims"));
            count *= r.dims.back();
        }
        if (count > (1ULL << 32)) throw IoError("corrupt extent for " + name);
        r.data.resize(count);
        for (auto& f : r.data) f = std::bit_cast<float>(get_u32(is, name + " data"));
        records.emplace(std::move(name), std::move(r));
    }
    const auto take = [&](const std::string& name, std::size_t numel) -> Record& {
        const auto it = records.find(name);
        if (it == records.end()) throw IoError("weights file lacks " + name);
        if (it->second.data.size() != numel) {
            throw ShapeError("weights record " + name + " has " + std::to_string(it->second.data.size()) +
                             " values, graph expects " + std::to_string(numel));
        }
        return it->second;
    };
    nn::Weights<float> w;
    for (const auto& p : graph.params()) {
        Record& r = take(p.name, p.shape.numel());
        w.tensors.push_back(Tensor<float>::from_data(p.shape, std::move(r.data)));
    }
    for (int id : graph.batchnorm_layers()) {
        const auto& l = graph.layers()[static_cast<std::size_t>(id)];
        const auto c = static_cast<std::size_t>(l.c_out);
        w.running.push_back({std::move(take(l.name + ".running_mean", c).data), std::move(take(l.name + ".running_var", c).data)});
    }
    return w;
}

}  // namespace istd::model
