#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "istd/data.hpp"
#include "istd/grad_check.hpp"
#include "istd/model.hpp"

namespace istd::train {

using eval::GroundTruth;

enum class LossMode { iou_only, nwd_only, mixed };
const char* to_string(LossMode m);
LossMode parse_loss_mode(const std::string& s);

struct AssignOptions {
    /// Anchors match a gt when max(w/aw, aw/w, h/ah, ah/h) is below this.
    double max_ratio = 4.0;
    /// Besides the best anchor, every matching anchor of the same scale and cell becomes positive.
    bool all_matching_anchors = true;
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 0.1;
    /// The learning rate decays linearly per step to learning_rate * lr_final_ratio.
    double lr_final_ratio = 0.05;
    double momentum = 0.9;
    /// Running-statistics momentum of BatchNorm during training.
    double bn_momentum = 0.1;
    LossMode loss_mode = LossMode::mixed;
    double iou_ratio = 0.5;
    /// NWD constant in pixels; 0 takes the mean sqrt(w h) of the training boxes.
    double nwd_C = 0.0;
    std::uint64_t seed = 0;
    double w_box = 0.05;
    double w_obj = 1.0;
    double w_cls = 0.5;
    /// Validation decoding.
    double val_conf = 0.001;
    double val_nms = 0.5;
    std::size_t val_max_candidates = 300;
    AssignOptions assign;

    void validate() const;
    [[nodiscard]] double learning_rate_at(std::size_t step, std::size_t total_steps) const;
    /// Weight of the IoU term in the box loss: 1 for iou_only, 0 for nwd_only, iou_ratio for mixed.
    [[nodiscard]] double effective_iou_ratio() const;
};

/// One positive (image, scale, anchor, cell) and the box it must regress to.
struct Positive {
    int image = 0;
    int scale = 0;
    int anchor = 0;
    int gy = 0;
    int gx = 0;
    box::BBox box;
    int class_id = 0;
};

struct Targets {
    std::vector<Positive> positives;
    /// Ground truths smaller than 1 px or matching no anchor within ratio 4.
    int skipped = 0;
    /// Ground truths whose (scale, anchor, cell) was already taken in the same image.
    int collisions = 0;
};

/// Each gt goes to the cell containing its center at the scale of its best anchor, the one with the
/// smallest max(w/aw, aw/w, h/ah, ah/h) when that ratio is below the limit. A gt whose best slot is
/// already taken counts as a collision.
Targets assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const model::AnchorSet& anchors,
                       const std::array<std::array<int, 2>, 3>& grids, const std::array<int, 3>& strides = model::kStrides,
                       const AssignOptions& opt = {});

template <typename T>
struct LossOut {
    Tensor<T> total;
    double box = 0;
    double obj = 0;
    double cls = 0;
};

struct LossSpec {
    LossMode mode = LossMode::mixed;
    double iou_ratio = 0.5;
    double nwd_C = 12.0;
    double w_box = 0.05;
    double w_obj = 1.0;
    double w_cls = 0.5;
    int n_classes = 1;
};

LossSpec loss_spec(const TrainConfig& cfg, double nwd_C, int n_classes);

/// Objectness BCE averaged over every (cell, anchor) of a scale, class BCE and the box term averaged
/// over the positives of a scale; each summed over scales, then weighted. Differentiable in `raw`.
template <typename T>
LossOut<T> total_loss(const std::vector<Tensor<T>>& raw, const Targets& targets, const model::AnchorSet& anchors,
                      const LossSpec& spec);

/// Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v. A non-finite gradient raises NumericError
/// naming the parameter.
struct SgdState {
    std::vector<std::vector<double>> velocity;
};
void sgd_step(nn::Weights<float>& w, const nn::Graph& graph, double lr, double momentum, SgdState& state);

struct EpochLog {
    int epoch = 0;
    double loss_total = 0;
    double loss_box = 0;
    double loss_obj = 0;
    double loss_cls = 0;
    double val_map50 = 0;

    [[nodiscard]] std::string to_json() const;
};

/// Stacks sample images into one (n, c, h, w) batch.
Tensor<float> stack_images(const std::vector<const data::Sample*>& samples);

/// Detections after decoding and per-image NMS.
std::vector<std::vector<model::Detection>> predict(const nn::Graph& graph, nn::Weights<float>& w, const model::ModelConfig& mc,
                                                   const std::vector<data::Sample>& samples, double conf, double nms_iou,
                                                   std::size_t max_candidates, int batch_size = 8);

struct TrainResult {
    nn::Weights<float> weights;
    std::vector<EpochLog> log;
    double nwd_C = 0;
};

/// Deterministic given (data, configs). `on_epoch` sees every log record as it is produced.
TrainResult train(const nn::Graph& graph, const model::ModelConfig& mc, nn::Weights<float> weights,
                  const std::vector<data::Sample>& train_set, const std::vector<data::Sample>& val_set, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Finite differences of total_loss on `sample_size` seeded parameter components (f64 weights, BN in
/// train mode), against backward().
GradCheckResult gradient_audit(const nn::Graph& graph, const model::ModelConfig& mc, const nn::Weights<double>& weights,
                               const std::vector<data::Sample>& batch, const LossSpec& spec, std::size_t sample_size,
                               std::uint64_t seed, const AssignOptions& assign = {});

}  // namespace istd::train
