#include "istd/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "istd/error.hpp"
#include "istd/rng.hpp"

namespace istd::train {

const char* to_string(LossMode m) {
    switch (m) {
        case LossMode::iou_only: return "iou_only";
        case LossMode::nwd_only: return "nwd_only";
        case LossMode::mixed: return "mixed";
    }
    return "?";
}

LossMode parse_loss_mode(const std::string& s) {
    if (s == "iou_only") return LossMode::iou_only;
    if (s == "nwd_only") return LossMode::nwd_only;
    if (s == "mixed") return LossMode::mixed;
    throw ValueError("unknown loss mode '" + s + "'");
}

void TrainConfig::validate() const {
    if (epochs < 0) throw ValueError("epochs must be non-negative");
    if (batch_size <= 0) throw ValueError("batch_size must be positive");
    if (!(learning_rate >= 0.0)) throw ValueError("learning_rate must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValueError("momentum must lie in [0, 1)");
    if (!(iou_ratio >= 0.0 && iou_ratio <= 1.0)) throw ValueError("iou_ratio must lie in [0, 1]");
    if (!(lr_final_ratio >= 0.0 && lr_final_ratio <= 1.0)) throw ValueError("lr_final_ratio must lie in [0, 1]");
    if (!(assign.max_ratio > 1.0)) throw ValueError("anchor ratio limit must exceed 1");
    if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw ValueError("bn_momentum must lie in (0, 1]");
    if (!(nwd_C >= 0.0)) throw ValueError("nwd_C must be non-negative (0 selects the dataset default)");
    if (!(w_box >= 0 && w_obj >= 0 && w_cls >= 0)) throw ValueError("loss weights must be non-negative");
}

double TrainConfig::learning_rate_at(std::size_t step, std::size_t total_steps) const {
    if (total_steps == 0) return learning_rate;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return learning_rate * (1.0 - (1.0 - lr_final_ratio) * t);
}

double TrainConfig::effective_iou_ratio() const {
    switch (loss_mode) {
        case LossMode::iou_only: return 1.0;
        case LossMode::nwd_only: return 0.0;
        case LossMode::mixed: return iou_ratio;
    }
    return iou_ratio;
}

namespace {

double anchor_ratio(const box::BBox& b, const model::Anchor& an) {
    return std::max({b.w / an.w, an.w / b.w, b.h / an.h, an.h / b.h});
}

}  // namespace

Targets assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const model::AnchorSet& anchors,
                       const std::array<std::array<int, 2>, 3>& grids, const std::array<int, 3>& strides,
                       const AssignOptions& opt) {
    Targets t;
    for (std::size_t img = 0; img < gts.size(); ++img) {
        std::vector<std::array<int, 4>> taken;
        const auto is_taken = [&](const std::array<int, 4>& key) { return std::find(taken.begin(), taken.end(), key) != taken.end(); };
        for (const auto& g : gts[img]) {
            if (g.bbox.w < 1.0 || g.bbox.h < 1.0) {
                ++t.skipped;
                continue;
            }
            int best_s = -1, best_a = -1;
            double best_r = opt.max_ratio;
            for (int s = 0; s < 3; ++s) {
                for (int a = 0; a < 3; ++a) {
                    const double r = anchor_ratio(g.bbox, anchors.scales[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)]);
                    if (r < best_r) {
                        best_r = r;
                        best_s = s;
                        best_a = a;
                    }
                }
            }
            if (best_s < 0) {
                ++t.skipped;
                continue;
            }
            const auto& grid = grids[static_cast<std::size_t>(best_s)];
            const int stride = strides[static_cast<std::size_t>(best_s)];
            const int gx = std::clamp(static_cast<int>(std::floor(g.bbox.cx / stride)), 0, grid[1] - 1);
            const int gy = std::clamp(static_cast<int>(std::floor(g.bbox.cy / stride)), 0, grid[0] - 1);
            const std::array<int, 4> key{best_s, best_a, gy, gx};
            if (is_taken(key)) {
                ++t.collisions;
                continue;
            }
            taken.push_back(key);
            t.positives.push_back(Positive{static_cast<int>(img), best_s, best_a, gy, gx, g.bbox, g.class_id});
            if (!opt.all_matching_anchors) continue;
            for (int a = 0; a < 3; ++a) {
                const std::array<int, 4> extra{best_s, a, gy, gx};
                if (a == best_a || is_taken(extra)) continue;
                if (anchor_ratio(g.bbox, anchors.scales[static_cast<std::size_t>(best_s)][static_cast<std::size_t>(a)]) >= opt.max_ratio) continue;
                taken.push_back(extra);
                t.positives.push_back(Positive{static_cast<int>(img), best_s, a, gy, gx, g.bbox, g.class_id});
            }
        }
    }
    return t;
}

LossSpec loss_spec(const TrainConfig& cfg, double nwd_C, int n_classes) {
    return LossSpec{cfg.loss_mode, cfg.effective_iou_ratio(), nwd_C, cfg.w_box, cfg.w_obj, cfg.w_cls, n_classes};
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double bce(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

template <typename T>
LossOut<T> total_loss(const std::vector<Tensor<T>>& raw, const Targets& targets, const model::AnchorSet& anchors,
                      const LossSpec& spec) {
    if (raw.size() != 3) throw ShapeError("total_loss expects 3 head maps");
    if (!(spec.iou_ratio >= 0.0 && spec.iou_ratio <= 1.0)) throw ValueError("iou_ratio must lie in [0, 1]");
    if (!(spec.nwd_C > 0.0)) throw ValueError("nwd_C must be positive");
    const int per = 5 + spec.n_classes;
    const double r = spec.mode == LossMode::iou_only ? 1.0 : spec.mode == LossMode::nwd_only ? 0.0 : spec.iou_ratio;

    std::array<std::vector<double>, 3> grads;
    double obj_sum = 0.0, cls_sum = 0.0, box_sum = 0.0;
    for (std::size_t s = 0; s < 3; ++s) {
        const Shape& sh = raw[s].shape();
        if (sh.c != 3 * per) throw ShapeError("head map " + std::to_string(s) + " has " + std::to_string(sh.c) + " channels, expected " + std::to_string(3 * per));
        const auto z = raw[s].data();
        auto& g = grads[s];
        g.assign(z.size(), 0.0);
        const auto idx = [&](int n, int c, int y, int x) { return ((static_cast<std::size_t>(n) * sh.c + c) * sh.h + y) * sh.w + x; };

        std::vector<const Positive*> pos;
        for (const auto& p : targets.positives) {
            if (p.scale != static_cast<int>(s)) continue;
            if (p.image < 0 || p.image >= sh.n || p.gy < 0 || p.gy >= sh.h || p.gx < 0 || p.gx >= sh.w) {
                throw ShapeError("positive outside head map " + std::to_string(s));
            }
            pos.push_back(&p);
        }

        // Objectness over every (image, anchor, cell).
        const double n_cells = static_cast<double>(sh.n) * 3.0 * sh.h * sh.w;
        std::vector<char> is_pos(static_cast<std::size_t>(sh.n) * 3 * sh.h * sh.w, 0);
        for (const Positive* p : pos) is_pos[((static_cast<std::size_t>(p->image) * 3 + p->anchor) * sh.h + p->gy) * sh.w + p->gx] = 1;
        double obj = 0.0;
        for (int n = 0; n < sh.n; ++n) {
            for (int a = 0; a < 3; ++a) {
                for (int y = 0; y < sh.h; ++y) {
                    for (int x = 0; x < sh.w; ++x) {
                        const std::size_t i = idx(n, a * per + 4, y, x);
                        const double t = is_pos[((static_cast<std::size_t>(n) * 3 + a) * sh.h + y) * sh.w + x];
                        const double zi = z[i];
                        obj += bce(zi, t);
                        g[i] += spec.w_obj * (sigmoid(zi) - t) / n_cells;
                    }
                }
            }
        }
        obj_sum += obj / n_cells;
        if (pos.empty()) continue;

        const double n_pos = static_cast<double>(pos.size());
        const double n_cls = n_pos * spec.n_classes;
        double cls = 0.0, boxl = 0.0;
        const double stride = model::kStrides[s];
        for (const Positive* p : pos) {
            const int base = p->anchor * per;
            for (int k = 0; k < spec.n_classes; ++k) {
                const std::size_t i = idx(p->image, base + 5 + k, p->gy, p->gx);
                const double t = k == p->class_id ? 1.0 : 0.0;
                cls += bce(z[i], t);
                g[i] += spec.w_cls * (sigmoid(z[i]) - t) / n_cls;
            }
            const auto& an = anchors.scales[s][static_cast<std::size_t>(p->anchor)];
            std::array<std::size_t, 4> ii{};
            std::array<double, 4> sg{};
            for (int j = 0; j < 4; ++j) {
                ii[static_cast<std::size_t>(j)] = idx(p->image, base + j, p->gy, p->gx);
                sg[static_cast<std::size_t>(j)] = sigmoid(z[ii[static_cast<std::size_t>(j)]]);
            }
            const box::BBox pred{(2.0 * sg[0] - 0.5 + p->gx) * stride, (2.0 * sg[1] - 0.5 + p->gy) * stride,
                                 std::max(4.0 * sg[2] * sg[2] * an.w, 1e-12), std::max(4.0 * sg[3] * sg[3] * an.h, 1e-12)};
            // The same convex combination for every mode keeps the boundary modes bit-identical.
            const auto gi = box::iou_loss_grad(pred, p->box);
            const auto gn = box::nwd_loss_grad(pred, p->box, spec.nwd_C);
            boxl += std::max(0.0, (1.0 - r) * gn.value + r * gi.value);
            const std::array<double, 4> dbox{
                2.0 * sg[0] * (1.0 - sg[0]) * stride, 2.0 * sg[1] * (1.0 - sg[1]) * stride,
                8.0 * sg[2] * sg[2] * (1.0 - sg[2]) * an.w, 8.0 * sg[3] * sg[3] * (1.0 - sg[3]) * an.h};
            for (std::size_t j = 0; j < 4; ++j) {
                const double dl = (1.0 - r) * gn.grad[j] + r * gi.grad[j];
                g[ii[j]] += spec.w_box * dl * dbox[j] / n_pos;
            }
        }
        cls_sum += cls / n_cls;
        box_sum += boxl / n_pos;
    }

    LossOut<T> out;
    out.box = box_sum;
    out.obj = obj_sum;
    out.cls = cls_sum;
    const double total = spec.w_box * box_sum + spec.w_obj * obj_sum + spec.w_cls * cls_sum;
    out.total = Tensor<T>::from_op(Shape{}, std::vector<T>{static_cast<T>(total)}, raw, "total_loss",
                                   [grads = std::move(grads)](Node<T>& self) {
                                       const double up = self.grad[0];
                                       for (std::size_t s = 0; s < 3; ++s) {
                                           Node<T>& in = *self.inputs[s];
                                           if (!in.requires_grad) continue;
                                           for (std::size_t i = 0; i < grads[s].size(); ++i) in.grad[i] += static_cast<T>(up * grads[s][i]);
                                       }
                                   });
    return out;
}

template LossOut<float> total_loss<float>(const std::vector<Tensor<float>>&, const Targets&, const model::AnchorSet&, const LossSpec&);
template LossOut<double> total_loss<double>(const std::vector<Tensor<double>>&, const Targets&, const model::AnchorSet&, const LossSpec&);

void sgd_step(nn::Weights<float>& w, const nn::Graph& graph, double lr, double momentum, SgdState& state) {
    if (!(lr >= 0.0)) throw ValueError("learning rate must be non-negative");
    if (state.velocity.size() != w.tensors.size()) {
        state.velocity.assign(w.tensors.size(), {});
        for (std::size_t i = 0; i < w.tensors.size(); ++i) state.velocity[i].assign(w.tensors[i].numel(), 0.0);
    }
    for (std::size_t i = 0; i < w.tensors.size(); ++i) {
        const auto g = w.tensors[i].grad();
        for (float v : g) {
            if (!std::isfinite(v)) throw NumericError("non-finite gradient for parameter " + graph.params()[i].name);
        }
    }
    for (std::size_t i = 0; i < w.tensors.size(); ++i) {
        const auto g = w.tensors[i].grad();
        auto p = w.tensors[i].mutable_data();
        auto& v = state.velocity[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = momentum * v[j] + g[j];
            p[j] = static_cast<float>(p[j] - lr * v[j]);
        }
    }
}

std::string EpochLog::to_json() const {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "{\"epoch\": %d, \"loss_total\": %.9g, \"loss_box\": %.9g, \"loss_obj\": %.9g, \"loss_cls\": %.9g, \"val_map50\": %.9g}",
                  epoch, loss_total, loss_box, loss_obj, loss_cls, val_map50);
    return buf;
}

Tensor<float> stack_images(const std::vector<const data::Sample*>& samples) {
    if (samples.empty()) throw ValueError("empty batch");
    Shape s = samples.front()->image.shape();
    std::vector<float> buf;
    buf.reserve(s.numel() * samples.size());
    for (const auto* smp : samples) {
        const Shape& o = smp->image.shape();
        if (o.c != s.c || o.h != s.h || o.w != s.w) throw ShapeError("batch images differ in shape: " + s.str() + " vs " + o.str());
        buf.insert(buf.end(), smp->image.data().begin(), smp->image.data().end());
    }
    s.n = static_cast<int>(samples.size());
    return Tensor<float>::from_data(s, std::move(buf));
}

namespace {

std::array<std::array<int, 2>, 3> grids_of(const nn::Graph& graph) {
    std::array<std::array<int, 2>, 3> g{};
    for (std::size_t s = 0; s < 3; ++s) g[s] = {graph.output_shape(s).h, graph.output_shape(s).w};
    return g;
}

Tensor<float> to_input(const Tensor<float>& batch, int channels) {
    if (batch.shape().c == channels) return batch;
    if (batch.shape().c != 1 || channels != 3) throw ShapeError("cannot adapt " + batch.shape().str() + " to " + std::to_string(channels) + " channels");
    Shape s = batch.shape();
    s.c = 3;
    std::vector<float> out;
    out.reserve(s.numel());
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
        const auto* src = batch.data().data() + static_cast<std::size_t>(n) * plane;
        for (int c = 0; c < 3; ++c) out.insert(out.end(), src, src + plane);
    }
    return Tensor<float>::from_data(s, std::move(out));
}

}  // namespace

std::vector<std::vector<model::Detection>> predict(const nn::Graph& graph, nn::Weights<float>& w, const model::ModelConfig& mc,
                                                   const std::vector<data::Sample>& samples, double conf, double nms_iou,
                                                   std::size_t max_candidates, int batch_size) {
    std::vector<std::vector<model::Detection>> out;
    for (std::size_t i = 0; i < samples.size(); i += static_cast<std::size_t>(batch_size)) {
        std::vector<const data::Sample*> b;
        for (std::size_t j = i; j < std::min(samples.size(), i + static_cast<std::size_t>(batch_size)); ++j) b.push_back(&samples[j]);
        const auto raw = nn::forward(graph, w, to_input(stack_images(b), graph.input_shape().c));
        auto dets = model::decode(raw, mc.anchors, mc.n_classes, mc.input_size, model::DecodeOptions{conf, max_candidates});
        for (auto& d : dets) out.push_back(eval::nms(std::move(d), nms_iou));
    }
    return out;
}

TrainResult train(const nn::Graph& graph, const model::ModelConfig& mc, nn::Weights<float> weights,
                  const std::vector<data::Sample>& train_set, const std::vector<data::Sample>& val_set, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
    cfg.validate();
    if (train_set.empty()) throw ValueError("training split is empty");
    TrainResult res;
    if (cfg.nwd_C > 0) {
        res.nwd_C = cfg.nwd_C;
    } else {
        std::vector<box::BBox> boxes;
        for (const auto& s : train_set) {
            for (const auto& g : s.gts) boxes.push_back(g.bbox);
        }
        res.nwd_C = boxes.empty() ? 12.0 : box::default_nwd_constant(boxes);
    }
    const LossSpec spec = loss_spec(cfg, res.nwd_C, mc.n_classes);
    const auto grids = grids_of(graph);
    Rng rng(cfg.seed);
    SgdState sgd;
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    const int in_c = graph.input_shape().c;
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t total_steps = static_cast<std::size_t>(cfg.epochs) * ((order.size() + bs - 1) / bs);
    std::size_t step_index = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
        }
        EpochLog log;
        log.epoch = epoch;
        int steps = 0;
        for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const data::Sample*> b;
            std::vector<std::vector<GroundTruth>> gts;
            for (std::size_t j = i; j < std::min(order.size(), i + static_cast<std::size_t>(cfg.batch_size)); ++j) {
                b.push_back(&train_set[order[j]]);
                gts.push_back(train_set[order[j]].gts);
            }
            weights.set_requires_grad(true);
            weights.zero_grad();
            const auto raw = nn::forward(graph, weights, to_input(stack_images(b), in_c), nn::ForwardOptions{BnMode::train, BatchNormOptions{1e-3, cfg.bn_momentum}});
            const auto targets = assign_targets(gts, mc.anchors, grids, model::kStrides, cfg.assign);
            const auto loss = total_loss(raw, targets, mc.anchors, spec);
            const double value = loss.total.item();
            if (!std::isfinite(value)) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(steps + 1));
            }
            backward(loss.total);
            sgd_step(weights, graph, cfg.learning_rate_at(step_index++, total_steps), cfg.momentum, sgd);
            log.loss_total += value;
            log.loss_box += loss.box;
            log.loss_obj += loss.obj;
            log.loss_cls += loss.cls;
            ++steps;
        }
        weights.set_requires_grad(false);
        log.loss_total /= steps;
        log.loss_box /= steps;
        log.loss_obj /= steps;
        log.loss_cls /= steps;
        if (!val_set.empty()) {
            const auto preds = predict(graph, weights, mc, val_set, cfg.val_conf, cfg.val_nms, cfg.val_max_candidates, cfg.batch_size);
            std::vector<std::vector<GroundTruth>> vg;
            for (const auto& s : val_set) vg.push_back(s.gts);
            log.val_map50 = eval::evaluate(preds, vg, mc.n_classes).map50;
        }
        res.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    weights.set_requires_grad(false);
    res.weights = std::move(weights);
    return res;
}

GradCheckResult gradient_audit(const nn::Graph& graph, const model::ModelConfig& mc, const nn::Weights<double>& weights,
                               const std::vector<data::Sample>& batch, const LossSpec& spec, std::size_t sample_size,
                               std::uint64_t seed, const AssignOptions& assign) {
    std::vector<const data::Sample*> b;
    std::vector<std::vector<GroundTruth>> gts;
    for (const auto& s : batch) {
        b.push_back(&s);
        gts.push_back(s.gts);
    }
    const Tensor<double> x = cast<double>(to_input(stack_images(b), graph.input_shape().c));
    const Targets targets = assign_targets(gts, mc.anchors, grids_of(graph), model::kStrides, assign);
    std::vector<Tensor<double>> params;
    for (const auto& t : weights.tensors) params.push_back(Tensor<double>::from_data(t.shape(), std::vector<double>(t.data().begin(), t.data().end())));
    const auto running = weights.running;
    const ScalarFn fn = [&](const std::vector<Tensor<double>>& v) {
        nn::Weights<double> w{v, running};
        const auto raw = nn::forward(graph, w, x, nn::ForwardOptions{BnMode::train, {}});
        return total_loss(raw, targets, mc.anchors, spec).total;
    };
    return grad_check(fn, params, 1e-6, sample_size, seed);
}

}  // namespace istd::train
