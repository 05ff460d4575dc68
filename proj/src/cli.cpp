#include "istd/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "istd/audit.hpp"
#include "istd/box_metrics.hpp"
#include "istd/data.hpp"
#include "istd/error.hpp"
#include "istd/eval.hpp"
#include "istd/format.hpp"
#include "istd/model.hpp"
#include "istd/simam.hpp"
#include "istd/train.hpp"

namespace istd::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// Per-module rows of the reconstructed backbone.
const std::vector<std::pair<std::string, std::int64_t>> kBackboneRows{
    {"cbs0", 928},       {"cbs1", 18560},   {"cbs2", 36992},   {"cbs3", 73984},     {"elan1", 230656},
    {"mp1", 213760},     {"elan2", 920064}, {"mp2", 853504},   {"elan3", 3675136},
};
constexpr std::int64_t kReconstructedTotal = 6023584;
constexpr std::int64_t kOriginalTotal = 13371808;

std::string pad(const std::string& s, std::size_t n) { return s.size() >= n ? s + " " : s + std::string(n - s.size(), ' '); }

box::BBox parse_box(const std::string& text, const std::string& flag) {
    std::vector<double> v;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        char* end = nullptr;
        const double x = std::strtod(part.c_str(), &end);
        if (part.empty() || *end != '\0') throw ValueError(flag + ": '" + text + "' is not cx,cy,w,h");
        v.push_back(x);
    }
    if (v.size() != 4) throw ValueError(flag + ": expected 4 comma-separated numbers, got '" + text + "'");
    const box::BBox b{v[0], v[1], v[2], v[3]};
    box::require_valid(b);
    return b;
}

// Top-level rows: direct children of the first top-level module for a backbone graph, top-level
// modules otherwise.
std::vector<int> report_modules(const nn::Graph& g, bool backbone_only) {
    std::vector<int> rows;
    for (int m = 0; m < static_cast<int>(g.modules().size()); ++m) {
        if (g.modules()[static_cast<std::size_t>(m)].depth == (backbone_only ? 1 : 0)) rows.push_back(m);
    }
    return rows;
}

std::string leaf_name(const std::string& scoped) {
    const auto dot = scoped.rfind('.');
    return dot == std::string::npos ? scoped : scoped.substr(dot + 1);
}

struct ParamsArgs {
    std::string variant = "reconstructed";
    std::string scope = "backbone";
    std::string neck = "ltsn";
    double width = 1.0;
    int input_size = 640;
    int classes = 1;
    std::string format = "table";
};

int cmd_params(const ParamsArgs& a, std::ostream& out) {
    nn::Graph g = [&] {
        if (a.scope == "backbone") return model::backbone_graph(model::parse_backbone(a.variant), a.input_size, a.width);
        model::ModelConfig mc;
        mc.backbone = model::parse_backbone(a.variant);
        mc.neck = model::parse_neck(a.neck);
        mc.width = a.width;
        mc.input_size = a.input_size;
        mc.n_classes = a.classes;
        return model::build_model(mc);
    }();
    const auto rows = report_modules(g, a.scope == "backbone");
    if (a.format == "json") {
        json j;
        j["variant"] = a.variant;
        j["scope"] = a.scope;
        j["width"] = round9(a.width);
        j["input_size"] = a.input_size;
        auto& mods = j["modules"] = json::array();
        for (int m : rows) {
            const auto& mod = g.modules()[static_cast<std::size_t>(m)];
            mods.push_back({{"name", leaf_name(mod.name)}, {"kind", nn::to_string(mod.spec.kind)}, {"params", g.module_params(m)},
                            {"flops", g.module_flops(m)}});
        }
        j["total_params"] = nn::param_count(g);
        j["total_flops"] = nn::count_flops(g);
        out << j.dump(2) << '\n';
        return kOk;
    }
    out << pad("module", 12) << pad("kind", 14) << pad("params", 12) << "flops\n";
    for (int m : rows) {
        const auto& mod = g.modules()[static_cast<std::size_t>(m)];
        out << pad(leaf_name(mod.name), 12) << pad(nn::to_string(mod.spec.kind), 14) << pad(std::to_string(g.module_params(m)), 12)
            << g.module_flops(m) << '\n';
    }
    out << pad("total", 26) << pad(std::to_string(nn::param_count(g)), 12) << nn::count_flops(g) << '\n';
    return kOk;
}

int cmd_verify_table1(bool biased, std::ostream& out) {
    const auto rec = model::backbone_graph(model::Backbone::reconstructed, 640, 1.0, biased);
    const auto orig = model::backbone_graph(model::Backbone::original, 640, 1.0, biased);
    const auto rows = report_modules(rec, true);
    bool ok = rows.size() == kBackboneRows.size();
    out << pad("row", 5) << pad("module", 8) << pad("expected", 10) << pad("actual", 10) << "status\n";
    for (std::size_t i = 0; i < kBackboneRows.size(); ++i) {
        const std::int64_t actual = i < rows.size() ? rec.module_params(rows[i]) : -1;
        const std::string name = i < rows.size() ? leaf_name(rec.modules()[static_cast<std::size_t>(rows[i])].name) : "?";
        const bool row_ok = actual == kBackboneRows[i].second && name == kBackboneRows[i].first;
        ok = ok && row_ok;
        out << pad(std::to_string(i + 1), 5) << pad(kBackboneRows[i].first, 8) << pad(std::to_string(kBackboneRows[i].second), 10)
            << pad(std::to_string(actual), 10) << (row_ok ? "OK" : "MISMATCH") << '\n';
    }
    const std::int64_t rt = nn::param_count(rec), ot = nn::param_count(orig);
    const double ratio = static_cast<double>(rt) / static_cast<double>(ot);
    const bool rt_ok = rt == kReconstructedTotal, ot_ok = ot == kOriginalTotal;
    const bool ratio_ok = std::lround(100.0 * ratio) == 45;
    out << pad("reconstructed total", 21) << pad(std::to_string(kReconstructedTotal), 10) << pad(std::to_string(rt), 10)
        << (rt_ok ? "OK" : "MISMATCH") << '\n';
    out << pad("original total", 21) << pad(std::to_string(kOriginalTotal), 10) << pad(std::to_string(ot), 10)
        << (ot_ok ? "OK" : "MISMATCH") << '\n';
    out << pad("ratio", 21) << pad("45%", 10) << pad(g9(100.0 * ratio) + "%", 10) << (ratio_ok ? "OK" : "MISMATCH") << '\n';
    ok = ok && rt_ok && ot_ok && ratio_ok;
    out << (ok ? "PASS" : "FAIL") << '\n';
    return ok ? kOk : kFailed;
}

struct SynthArgs {
    std::string out_dir;
    std::size_t count = 200;
    std::uint64_t first = 0;
    data::SynthConfig cfg;
    std::string background = "clouds";
};

std::vector<std::string> class_names(int n) {
    if (n == 1) return {"target"};
    std::vector<std::string> names;
    for (int i = 0; i < n; ++i) names.push_back("size" + std::to_string(i));
    return names;
}

int cmd_synth(SynthArgs a, std::ostream& out) {
    a.cfg.background = data::parse_background(a.background);
    a.cfg.validate();
    const auto samples = data::synth_dataset(a.cfg, a.count, a.first);
    data::save_dataset(a.out_dir, samples, class_names(a.cfg.n_classes()));
    {
        std::ofstream f(fs::path(a.out_dir) / "synth.json");
        if (!f) throw IoError("cannot write " + (fs::path(a.out_dir) / "synth.json").string());
        f << a.cfg.to_json() << '\n';
    }
    std::size_t targets = 0;
    for (const auto& s : samples) targets += s.gts.size();
    json j;
    j["images"] = samples.size();
    j["targets"] = targets;
    j["classes"] = a.cfg.n_classes();
    out << j.dump() << '\n';
    return kOk;
}

struct TrainArgs {
    std::string data_dir;
    std::string out_dir;
    std::string variant = "reconstructed";
    std::string neck = "ltsn";
    double width = 0.125;
    double train_ratio = 0.7;
    double val_ratio = 0.2;
    std::uint64_t split_seed = 0;
    std::string loss_mode = "mixed";
    train::TrainConfig cfg;
};

int cmd_train(TrainArgs a, std::ostream& out) {
    a.cfg.loss_mode = train::parse_loss_mode(a.loss_mode);
    a.cfg.validate();
    if (!(a.train_ratio > 0 && a.val_ratio >= 0 && a.train_ratio + a.val_ratio <= 1.0)) {
        throw ValueError("split ratios must be positive and sum to at most 1");
    }
    auto ds = data::load_dataset(a.data_dir, 1);
    if (ds.samples.empty()) throw ValueError(a.data_dir + " holds no images");
    const Shape& s0 = ds.samples.front().image.shape();
    if (s0.h != s0.w) throw ValueError("training images must be square");

    std::vector<std::string> ids;
    std::map<std::string, const data::Sample*> by_id;
    for (const auto& s : ds.samples) {
        ids.push_back(s.id);
        by_id[s.id] = &s;
    }
    const auto split = data::split_dataset(ids, {a.train_ratio, a.val_ratio, 1.0 - a.train_ratio - a.val_ratio}, a.split_seed);
    const auto pick = [&](const std::vector<std::string>& xs) {
        std::vector<data::Sample> v;
        for (const auto& id : xs) v.push_back(*by_id.at(id));
        return v;
    };
    const auto tr = pick(split.train), va = pick(split.val);

    model::ModelConfig mc;
    mc.backbone = model::parse_backbone(a.variant);
    mc.neck = model::parse_neck(a.neck);
    mc.width = a.width;
    mc.input_size = s0.h;
    mc.n_classes = static_cast<int>(ds.class_names.size());
    mc.validate();
    const auto graph = model::build_model(mc);

    const fs::path dir(a.out_dir);
    fs::create_directories(dir);
    std::ofstream log(dir / "log.jsonl");
    if (!log) throw IoError("cannot write " + (dir / "log.jsonl").string());
    const auto res = train::train(graph, mc, nn::init_weights<float>(graph, a.cfg.seed), tr, va, a.cfg, [&](const train::EpochLog& l) {
        out << l.to_json() << '\n';
        log << l.to_json() << '\n';
    });
    mc.save(dir / "model.json");
    model::save_weights(dir / "weights.istd", graph, res.weights);
    json sp;
    sp["train"] = split.train;
    sp["val"] = split.val;
    sp["test"] = split.test;
    sp["nwd_C"] = round9(res.nwd_C);
    std::ofstream(dir / "split.json") << sp.dump(2) << '\n';
    return kOk;
}

struct EvalArgs {
    std::string data_dir;
    std::string model_path;
    std::string weights_path;
    std::string overlap = "iou";
    double nms = 0.5;
    std::size_t max_candidates = 300;
    eval::EvalOptions opt;
};

int cmd_eval(EvalArgs a, std::ostream& out) {
    a.opt.overlap = a.overlap == "nwd" ? eval::Overlap::nwd : eval::Overlap::iou;
    const auto mc = model::ModelConfig::load(a.model_path);
    const auto graph = model::build_model(mc);
    auto w = model::load_weights(a.weights_path, graph);
    const auto ds = data::load_dataset(a.data_dir, 1);
    if (ds.samples.empty()) throw ValueError(a.data_dir + " holds no images");
    const auto preds = train::predict(graph, w, mc, ds.samples, 0.001, a.nms, a.max_candidates);
    std::vector<std::vector<eval::GroundTruth>> gts;
    for (const auto& s : ds.samples) gts.push_back(s.gts);
    out << eval::evaluate(preds, gts, mc.n_classes, a.opt).to_json() << '\n';
    return kOk;
}

int cmd_nwd(const std::string& ta, const std::string& tb, double c, const std::string& format, std::ostream& out) {
    const box::BBox a = parse_box(ta, "--box-a"), b = parse_box(tb, "--box-b");
    box::require_positive_c(c);
    const double iou = box::iou(a, b), w2 = box::wasserstein2_boxes(a, b), nwd = box::nwd(a, b, c);
    if (format == "json") {
        json j;
        j["iou"] = round9(iou);
        j["w2_squared"] = round9(w2);
        j["nwd"] = round9(nwd);
        out << j.dump() << '\n';
    } else {
        out << "iou " << g9(iou) << "\nw2_squared " << g9(w2) << "\nnwd " << g9(nwd) << '\n';
    }
    return kOk;
}

int cmd_simam(const std::string& image, const std::string& out_path, double lambda, std::ostream& out) {
    const Tensor<float> img = data::load_image(image, 1);
    const Tensor<double> x = cast<double>(img);
    const Tensor<double> heat = simam::energy_heatmap(x, simam::SimamConfig{lambda});
    const auto v = heat.data();
    const auto peak = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    double mean = 0;
    for (double h : v) mean += h;
    mean /= static_cast<double>(v.size());
    std::vector<float> f(v.begin(), v.end());
    data::save_image(Tensor<float>::from_data(heat.shape(), std::move(f)), out_path);
    const int w = heat.shape().w;
    json j;
    j["width"] = w;
    j["height"] = heat.shape().h;
    j["peak_x"] = static_cast<int>(peak) % w;
    j["peak_y"] = static_cast<int>(peak) / w;
    j["mean"] = round9(mean);
    out << j.dump() << '\n';
    return kOk;
}

int cmd_gradcheck(const std::string& which, std::uint64_t seed, std::ostream& out) {
    const auto results = audit::run(which, seed);
    bool ok = true;
    for (const auto& r : results) {
        ok = ok && r.passed();
        out << pad(r.name, 24) << pad(g9(r.check.max_rel_error), 16) << pad(std::to_string(r.check.checked), 8)
            << (r.passed() ? "PASS" : "FAIL") << '\n';
    }
    out << "tolerance " << g9(audit::kTolerance) << '\n';
    return ok ? kOk : kFailed;
}

void check_threads_env() {
    const char* t = std::getenv("ISTD_THREADS");
    if (t == nullptr) return;
    char* end = nullptr;
    const long n = std::strtol(t, &end, 10);
    if (*t == '\0' || *end != '\0' || n < 1) throw ValueError(std::string("ISTD_THREADS must be a positive integer, got '") + t + "'");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Infrared small-target detector toolkit"};
    app.name("istd");
    app.require_subcommand(1);

    ParamsArgs pa;
    auto* params = app.add_subcommand("params", "Per-module parameter and FLOP counts");
    params->add_option("--variant", pa.variant, "reconstructed | original")->check(CLI::IsMember({"reconstructed", "original"}));
    params->add_option("--scope", pa.scope, "backbone | model")->check(CLI::IsMember({"backbone", "model"}));
    params->add_option("--neck", pa.neck, "ltsn | elanw_baseline (model scope)")->check(CLI::IsMember({"ltsn", "elanw_baseline"}));
    params->add_option("--width", pa.width, "Width multiplier")->check(CLI::PositiveNumber);
    params->add_option("--input-size", pa.input_size, "Square input side")->check(CLI::PositiveNumber);
    params->add_option("--classes", pa.classes, "Class count (model scope)")->check(CLI::PositiveNumber);
    params->add_option("--format", pa.format, "table | json")->check(CLI::IsMember({"table", "json"}));

    bool biased = false;
    auto* verify = app.add_subcommand("verify-table1", "Check the backbone parameter table");
    verify->add_flag("--biased-convs", biased, "Give every conv a bias (negative control)");

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Write a synthetic infrared dataset");
    synth->add_option("--out", sa.out_dir, "Output directory")->required();
    synth->add_option("--count", sa.count, "Number of scenes");
    synth->add_option("--first-index", sa.first, "Index of the first scene");
    synth->add_option("--seed", sa.cfg.seed, "Generator seed");
    synth->add_option("--img-size", sa.cfg.img_size, "Image side in pixels");
    synth->add_option("--targets-min", sa.cfg.targets_min);
    synth->add_option("--targets-max", sa.cfg.targets_max);
    synth->add_option("--size-min", sa.cfg.size_min, "Smallest target side in pixels");
    synth->add_option("--size-max", sa.cfg.size_max, "Largest target side in pixels");
    synth->add_option("--contrast-min", sa.cfg.contrast_min);
    synth->add_option("--contrast-max", sa.cfg.contrast_max);
    synth->add_option("--noise", sa.cfg.noise_sigma, "Gaussian noise sigma");
    synth->add_option("--background", sa.background, "gradient | clouds | clutter")->check(CLI::IsMember({"gradient", "clouds", "clutter"}));
    synth->add_option("--class-edges", sa.cfg.class_edges, "Size boundaries between classes")->delimiter(',');

    TrainArgs ta;
    auto* trn = app.add_subcommand("train", "Train the toy detector on a dataset directory");
    trn->add_option("--data", ta.data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    trn->add_option("--out", ta.out_dir, "Output directory")->required();
    trn->add_option("--variant", ta.variant)->check(CLI::IsMember({"reconstructed", "original"}));
    trn->add_option("--neck", ta.neck)->check(CLI::IsMember({"ltsn", "elanw_baseline"}));
    trn->add_option("--width", ta.width, "Width multiplier")->check(CLI::PositiveNumber);
    trn->add_option("--train-ratio", ta.train_ratio);
    trn->add_option("--val-ratio", ta.val_ratio);
    trn->add_option("--split-seed", ta.split_seed);
    trn->add_option("--epochs", ta.cfg.epochs);
    trn->add_option("--batch-size", ta.cfg.batch_size);
    trn->add_option("--lr", ta.cfg.learning_rate);
    trn->add_option("--lr-final-ratio", ta.cfg.lr_final_ratio);
    trn->add_option("--momentum", ta.cfg.momentum);
    trn->add_option("--loss-mode", ta.loss_mode, "iou_only | nwd_only | mixed")->check(CLI::IsMember({"iou_only", "nwd_only", "mixed"}));
    trn->add_option("--iou-ratio", ta.cfg.iou_ratio);
    trn->add_option("--nwd-c", ta.cfg.nwd_C, "NWD constant; 0 derives it from the training boxes");
    trn->add_option("--w-box", ta.cfg.w_box);
    trn->add_option("--w-obj", ta.cfg.w_obj);
    trn->add_option("--w-cls", ta.cfg.w_cls);
    trn->add_option("--seed", ta.cfg.seed);

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Evaluate trained weights on a dataset directory");
    ev->add_option("--data", ea.data_dir)->required()->check(CLI::ExistingDirectory);
    ev->add_option("--model", ea.model_path, "model.json")->required()->check(CLI::ExistingFile);
    ev->add_option("--weights", ea.weights_path)->required()->check(CLI::ExistingFile);
    ev->add_option("--conf", ea.opt.conf_thresh);
    ev->add_option("--iou", ea.opt.iou_thresh, "Match threshold");
    ev->add_option("--overlap", ea.overlap, "iou | nwd")->check(CLI::IsMember({"iou", "nwd"}));
    ev->add_option("--nwd-c", ea.opt.nwd_c);
    ev->add_option("--nms", ea.nms);
    ev->add_option("--max-candidates", ea.max_candidates);

    std::string box_a, box_b, nwd_format = "text";
    double nwd_c = 12.0;
    auto* nwd = app.add_subcommand("nwd", "IoU, squared Wasserstein distance and NWD of two boxes");
    nwd->add_option("--box-a", box_a, "cx,cy,w,h")->required();
    nwd->add_option("--box-b", box_b, "cx,cy,w,h")->required();
    nwd->add_option("--c", nwd_c, "Normalizing constant");
    nwd->add_option("--format", nwd_format, "text | json")->check(CLI::IsMember({"text", "json"}));

    std::string sm_image, sm_out;
    double sm_lambda = 1e-4;
    auto* sm = app.add_subcommand("simam", "Write the SimAM energy heatmap of an image");
    sm->add_option("--image", sm_image, "PGM or PPM image")->required()->check(CLI::ExistingFile);
    sm->add_option("--out", sm_out, "Output PGM")->required();
    sm->add_option("--lambda", sm_lambda);

    std::string gc_module = "all";
    std::uint64_t gc_seed = 0;
    auto* gc = app.add_subcommand("gradcheck", "Central-difference gradient audits");
    std::vector<std::string> suites{"all"};
    for (const auto& n : audit::suite_names()) suites.push_back(n);
    gc->add_option("--module", gc_module, "all | simam | nwd | ciou | blocks | model | loss")->check(CLI::IsMember(suites));
    gc->add_option("--seed", gc_seed);

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        check_threads_env();
        if (*params) return cmd_params(pa, out);
        if (*verify) return cmd_verify_table1(biased, out);
        if (*synth) return cmd_synth(sa, out);
        if (*trn) return cmd_train(ta, out);
        if (*ev) return cmd_eval(ea, out);
        if (*nwd) return cmd_nwd(box_a, box_b, nwd_c, nwd_format, out);
        if (*sm) return cmd_simam(sm_image, sm_out, sm_lambda, out);
        if (*gc) return cmd_gradcheck(gc_module, gc_seed, out);
    } catch (const NumericError& e) {
        err << "error: " << e.what() << '\n';
        return kFailed;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    }
    return kUsage;
}

}  // namespace istd::cli
