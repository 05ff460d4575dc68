#include "istd/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "istd/error.hpp"
#include "istd/format.hpp"

namespace istd::eval {

bool score_order(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.bbox.cx != b.bbox.cx) return a.bbox.cx < b.bbox.cx;
    if (a.bbox.cy != b.bbox.cy) return a.bbox.cy < b.bbox.cy;
    if (a.bbox.w != b.bbox.w) return a.bbox.w < b.bbox.w;
    if (a.bbox.h != b.bbox.h) return a.bbox.h < b.bbox.h;
    return a.class_id < b.class_id;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
    if (!(iou_thresh >= 0.0 && iou_thresh <= 1.0)) throw ValueError("nms iou_thresh must lie in [0, 1]");
    std::stable_sort(dets.begin(), dets.end(), score_order);
    std::vector<Detection> kept;
    for (const Detection& d : dets) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
            return k.class_id == d.class_id && box::iou(k.bbox, d.bbox) > iou_thresh;
        });
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

namespace {

double overlap(const box::BBox& a, const box::BBox& b, Overlap kind, double c) {
    return kind == Overlap::iou ? box::iou(a, b) : box::nwd(a, b, c);
}

}  // namespace

MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruth> gts, const MatchOptions& opt) {
    MatchResult r{std::vector<bool>(dets.size(), false), std::vector<int>(dets.size(), -1), std::vector<bool>(gts.size(), false)};
    for (std::size_t i = 0; i < dets.size(); ++i) {
        int best = -1;
        double best_o = opt.thresh;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (r.gt_matched[j] || gts[j].class_id != dets[i].class_id) continue;
            const double o = overlap(dets[i].bbox, gts[j].bbox, opt.overlap, opt.nwd_c);
            if (o >= best_o && (best < 0 || o > best_o)) {
                best = static_cast<int>(j);
                best_o = o;
            }
        }
        if (best >= 0) {
            r.det_tp[i] = true;
            r.det_gt[i] = best;
            r.gt_matched[static_cast<std::size_t>(best)] = true;
        }
    }
    return r;
}

double average_precision(const std::vector<bool>& tp_flags, std::size_t n_gt) {
    std::vector<double> ranks(tp_flags.size());
    std::iota(ranks.rbegin(), ranks.rend(), 1.0);
    return average_precision(tp_flags, ranks, n_gt);
}

double average_precision(const std::vector<bool>& tp_flags, std::span<const double> scores, std::size_t n_gt) {
    if (scores.size() != tp_flags.size()) throw ValueError("average_precision: flags and scores differ in length");
    if (n_gt == 0) return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> recall, precision;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < tp_flags.size(); ++i) {
        tp += tp_flags[i] ? 1 : 0;
        if (i + 1 < tp_flags.size() && scores[i + 1] == scores[i]) continue;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    }
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0, prev = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
        ap += (recall[i] - prev) * precision[i];
        prev = recall[i];
    }
    return ap;
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& preds, const std::vector<std::vector<GroundTruth>>& gts,
                    int n_classes, const EvalOptions& opt) {
    if (gts.empty()) throw ValueError("evaluate: empty dataset");
    if (preds.size() != gts.size()) {
        throw ValueError("evaluate: " + std::to_string(preds.size()) + " prediction lists for " + std::to_string(gts.size()) + " images");
    }
    if (n_classes <= 0) throw ValueError("evaluate: n_classes must be positive");
    const auto K = static_cast<std::size_t>(n_classes);
    const MatchOptions mopt{opt.iou_thresh, opt.overlap, opt.nwd_c};

    struct Scored {
        Detection det;
        bool tp;
    };
    std::vector<std::vector<Scored>> per_class(K);
    std::vector<std::size_t> n_gt(K, 0);
    std::vector<std::vector<double>> counts(K + 1, std::vector<double>(K + 1, 0.0));
    EvalReport rep;
    rep.options = opt;

    for (std::size_t img = 0; img < gts.size(); ++img) {
        for (const auto& g : gts[img]) {
            if (g.class_id < 0 || g.class_id >= n_classes) throw ValueError("ground-truth class outside the class universe");
            ++n_gt[static_cast<std::size_t>(g.class_id)];
        }
        std::vector<Detection> dets = preds[img];
        for (const auto& d : dets) {
            if (d.class_id < 0 || d.class_id >= n_classes) throw ValueError("detection class outside the class universe");
        }
        std::stable_sort(dets.begin(), dets.end(), score_order);
        const MatchResult m = match_detections(dets, gts[img], mopt);
        for (std::size_t i = 0; i < dets.size(); ++i) per_class[static_cast<std::size_t>(dets[i].class_id)].push_back({dets[i], m.det_tp[i]});

        // Operating point: the score-order prefix at or above conf_thresh.
        std::size_t n_keep = 0;
        while (n_keep < dets.size() && dets[n_keep].score >= opt.conf_thresh) ++n_keep;
        std::vector<bool> gt_hit(gts[img].size(), false);
        std::vector<bool> det_used(n_keep, false);
        for (std::size_t i = 0; i < n_keep; ++i) {
            if (!m.det_tp[i]) continue;
            ++rep.tp;
            det_used[i] = true;
            const auto j = static_cast<std::size_t>(m.det_gt[i]);
            gt_hit[j] = true;
            const auto c = static_cast<std::size_t>(gts[img][j].class_id);
            counts[c][c] += 1.0;
        }
        rep.fp += n_keep - std::count(det_used.begin(), det_used.end(), true);
        rep.fn += std::count(gt_hit.begin(), gt_hit.end(), false);
        // Cross-class confusions: a missed gt claimed by the most-overlapping unused detection.
        for (std::size_t j = 0; j < gts[img].size(); ++j) {
            if (gt_hit[j]) continue;
            int best = -1;
            double best_o = opt.iou_thresh;
            for (std::size_t i = 0; i < n_keep; ++i) {
                if (det_used[i]) continue;
                const double o = overlap(dets[i].bbox, gts[img][j].bbox, opt.overlap, opt.nwd_c);
                if (o >= best_o && (best < 0 || o > best_o)) {
                    best = static_cast<int>(i);
                    best_o = o;
                }
            }
            const auto c = static_cast<std::size_t>(gts[img][j].class_id);
            if (best >= 0) {
                det_used[static_cast<std::size_t>(best)] = true;
                counts[c][static_cast<std::size_t>(dets[static_cast<std::size_t>(best)].class_id)] += 1.0;
            } else {
                counts[c][K] += 1.0;
            }
        }
        for (std::size_t i = 0; i < n_keep; ++i) {
            if (!det_used[i]) counts[K][static_cast<std::size_t>(dets[i].class_id)] += 1.0;
        }
    }

    double ap_sum = 0.0;
    for (std::size_t c = 0; c < K; ++c) {
        if (n_gt[c] == 0) continue;
        auto& list = per_class[c];
        std::stable_sort(list.begin(), list.end(), [](const Scored& a, const Scored& b) { return score_order(a.det, b.det); });
        std::vector<bool> flags;
        std::vector<double> scores;
        for (const auto& s : list) {
            flags.push_back(s.tp);
            scores.push_back(s.det.score);
        }
        const double ap = average_precision(flags, scores, n_gt[c]);
        rep.per_class_ap[static_cast<int>(c)] = ap;
        ap_sum += ap;
    }
    rep.map50 = rep.per_class_ap.empty() ? 0.0 : ap_sum / static_cast<double>(rep.per_class_ap.size());
    rep.precision = rep.tp + rep.fp == 0 ? 0.0 : static_cast<double>(rep.tp) / static_cast<double>(rep.tp + rep.fp);
    rep.recall = rep.tp + rep.fn == 0 ? 0.0 : static_cast<double>(rep.tp) / static_cast<double>(rep.tp + rep.fn);
    for (auto& row : counts) {
        const double total = std::accumulate(row.begin(), row.end(), 0.0);
        if (total > 0) {
            for (double& v : row) v /= total;
        }
    }
    rep.confusion = std::move(counts);
    return rep;
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["precision"] = round9(precision);
    j["recall"] = round9(recall);
    j["map50"] = round9(map50);
    auto& ap = j["per_class_ap"] = nlohmann::ordered_json::object();
    for (const auto& [c, v] : per_class_ap) ap[std::to_string(c)] = round9(v);
    auto& cm = j["confusion"] = nlohmann::ordered_json::array();
    for (const auto& row : confusion) {
        auto r = nlohmann::ordered_json::array();
        for (double v : row) r.push_back(round9(v));
        cm.push_back(r);
    }
    j["tp"] = tp;
    j["fp"] = fp;
    j["fn"] = fn;
    j["metadata"] = {{"conf_thresh", options.conf_thresh},
                     {"iou_thresh", options.iou_thresh},
                     {"interpolation", "all-point"},
                     {"matching", options.overlap == Overlap::iou ? "iou" : "nwd"}};
    return j.dump(2);
}

}  // namespace istd::eval
