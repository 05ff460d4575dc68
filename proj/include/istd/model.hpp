#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "istd/box_metrics.hpp"
#include "istd/graph.hpp"

namespace istd::model {

enum class Backbone { reconstructed, original };
enum class Neck { ltsn, elanw_baseline };

const char* to_string(Backbone v);
const char* to_string(Neck v);
Backbone parse_backbone(const std::string& s);
Neck parse_neck(const std::string& s);

struct Anchor {
    double w = 0;
    double h = 0;
    bool operator==(const Anchor&) const = default;
};

/// Three anchors per scale, scales ordered P2, P3, P4 (strides 4, 8, 16), in input pixels.
struct AnchorSet {
    std::array<std::array<Anchor, 3>, 3> scales{};

    static AnchorSet defaults();
    /// Positive sides and ascending area within each scale, else ValueError.
    void validate() const;
    bool operator==(const AnchorSet&) const = default;
};

inline constexpr std::array<int, 3> kStrides{4, 8, 16};

/// Channel count scaled by the width multiplier, rounded to a multiple of 4 (at least 4).
int scaled_channels(int c, double width);

struct ModelConfig {
    Backbone backbone = Backbone::reconstructed;
    Neck neck = Neck::ltsn;
    double width = 1.0;
    int input_size = 640;
    int n_classes = 1;
    double simam_lambda = 1e-4;
    /// When false the LTSN attention points pass features through unchanged.
    bool simam = true;
    AnchorSet anchors = AnchorSet::defaults();

    void validate() const;
    [[nodiscard]] std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static ModelConfig load(const std::filesystem::path& path);
};

/// Backbone feature taps (graph node ids) at strides 4, 8, 16, and 32 for the original variant.
struct Taps {
    int p2 = -1;
    int p3 = -1;
    int p4 = -1;
    int p5 = -1;
};

/// Appends a backbone to `g` (whose input must be divisible by 32).
Taps build_backbone(nn::GraphBuilder& g, Backbone variant, double width = 1.0);

/// A backbone-only graph; outputs are the taps (P2, P3, P4, then P5 for the original).
nn::Graph backbone_graph(Backbone variant, int input_size, double width = 1.0, bool biased_convs = false);

struct NeckOut {
    int p2 = -1;
    int p3 = -1;
    int p4 = -1;
};

NeckOut build_neck(nn::GraphBuilder& g, const Taps& taps, Neck variant, double width = 1.0, double lambda = 1e-4,
                   bool simam = true);

/// One 1x1 biased conv per scale with 3 * (5 + n_classes) channels; channel a * (5 + K) + j holds
/// field j (tx, ty, tw, th, obj, classes...) of anchor a.
std::array<int, 3> build_heads(nn::GraphBuilder& g, const NeckOut& neck, int n_classes);

/// Backbone, neck and heads; outputs are the three head maps (strides 4, 8, 16).
nn::Graph build_model(const ModelConfig& cfg);

struct Detection {
    box::BBox bbox;
    int class_id = 0;
    double score = 0;
};

struct DecodeOptions {
    double conf_thresh = 0.25;
    /// Highest-scoring candidates kept per image; 0 keeps all.
    std::size_t max_candidates = 0;
};

/// Decodes raw head maps into per-image detections (boxes clamped to the image; degenerate boxes dropped).
template <typename T>
std::vector<std::vector<Detection>> decode(const std::vector<Tensor<T>>& raw, const AnchorSet& anchors, int n_classes,
                                           int input_size, const DecodeOptions& opt = {});

/// Weights file: "ISTD1", then per tensor a record of name length (u32 LE), name bytes, rank (u32),
/// dims (u32 each) and f32 LE data. Running statistics follow as "<bn>.running_mean" / ".running_var".
void save_weights(const std::filesystem::path& path, const nn::Graph& graph, const nn::Weights<float>& w);
nn::Weights<float> load_weights(const std::filesystem::path& path, const nn::Graph& graph);

}  // namespace istd::model
