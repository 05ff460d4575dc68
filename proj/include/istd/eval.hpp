#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "istd/box_metrics.hpp"
#include "istd/model.hpp"

namespace istd::eval {

using model::Detection;

struct GroundTruth {
    box::BBox bbox;
    int class_id = 0;
};

/// Greedy per-class suppression in (score desc, cx asc, cy asc) order; a box is dropped when its IoU
/// with a kept box of its class exceeds `iou_thresh`. The result keeps that order.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

/// Sort key shared by NMS and matching.
bool score_order(const Detection& a, const Detection& b);

struct MatchResult {
    std::vector<bool> det_tp;
    /// Index of the matched ground truth per detection, -1 when unmatched.
    std::vector<int> det_gt;
    std::vector<bool> gt_matched;
};

enum class Overlap { iou, nwd };

struct MatchOptions {
    double thresh = 0.5;
    Overlap overlap = Overlap::iou;
    /// NWD normalizing constant when overlap is nwd.
    double nwd_c = 12.0;
};

/// Detections must be in score order. Each claims the most-overlapping unmatched gt of its class at
/// or above the threshold.
MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruth> gts, const MatchOptions& opt = {});

/// All-point AP: area under the precision envelope. Flags are in score order, one PR point each.
/// Returns NaN when n_gt is 0.
double average_precision(const std::vector<bool>& tp_flags, std::size_t n_gt);

/// As above, but detections sharing a score form one PR point, so the result does not depend on
/// how ties are ordered. `scores` must be non-increasing.
double average_precision(const std::vector<bool>& tp_flags, std::span<const double> scores, std::size_t n_gt);

struct EvalOptions {
    double conf_thresh = 0.25;
    double iou_thresh = 0.5;
    Overlap overlap = Overlap::iou;
    double nwd_c = 12.0;
};

struct EvalReport {
    double precision = 0;
    double recall = 0;
    double map50 = 0;
    /// Classes with at least one ground truth.
    std::map<int, double> per_class_ap;
    /// (K+1) x (K+1), row = actual class, column = predicted class; index K is background.
    std::vector<std::vector<double>> confusion;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    EvalOptions options;

    [[nodiscard]] std::string to_json() const;
};

/// AP uses every detection; precision, recall and the confusion matrix use those scoring at least
/// conf_thresh. An empty dataset or mismatched image counts raise ValueError.
EvalReport evaluate(const std::vector<std::vector<Detection>>& preds, const std::vector<std::vector<GroundTruth>>& gts,
                    int n_classes, const EvalOptions& opt = {});

}  // namespace istd::eval
