#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "istd/eval.hpp"
#include "istd/tensor.hpp"

namespace istd::data {

using eval::GroundTruth;

struct Sample {
    /// (1, c, h, w) with values in [0, 1].
    Tensor<float> image;
    std::vector<GroundTruth> gts;
    std::string id;
};

/// YOLO text labels: "class cx cy w h" per line, normalized to [0, 1]. Boxes become pixels against
/// the image size and are clipped to the image.
std::vector<GroundTruth> parse_labels(const std::string& text, int img_w, int img_h, const std::string& source = "labels");
std::vector<GroundTruth> load_labels(const std::filesystem::path& path, int img_w, int img_h);
std::string format_labels(const std::vector<GroundTruth>& gts, int img_w, int img_h);
void save_labels(const std::filesystem::path& path, const std::vector<GroundTruth>& gts, int img_w, int img_h);

/// Binary 8-bit PGM (P5) or PPM (P6). With channels == 1 a P6 is reduced to luminance
/// 0.299 R + 0.587 G + 0.114 B; with channels == 3 a P5 is replicated.
Tensor<float> load_image(const std::filesystem::path& path, int channels = 1);
/// 1 channel writes P5, 3 channels P6; values are clamped to [0, 1] and rounded to 8 bits.
void save_image(const Tensor<float>& image, const std::filesystem::path& path);

struct Split {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};

/// Seeded Fisher-Yates shuffle; train and val take floor(n * r), test the remainder.
Split split_dataset(std::vector<std::string> ids, const std::array<double, 3>& ratios, std::uint64_t seed);

enum class Background { gradient, clouds, clutter };
const char* to_string(Background b);
Background parse_background(const std::string& s);

struct SynthConfig {
    int img_size = 160;
    int targets_min = 1;
    int targets_max = 3;
    /// Label box side in pixels (six standard deviations of the Gaussian profile).
    double size_min = 4.0;
    double size_max = 12.0;
    /// Peak height above the local background.
    double contrast_min = 0.25;
    double contrast_max = 0.45;
    double noise_sigma = 0.03;
    Background background = Background::clouds;
    std::uint64_t seed = 0;
    /// Size-bucket boundaries: class = number of edges <= size. Empty gives one class.
    std::vector<double> class_edges;

    void validate() const;
    [[nodiscard]] int n_classes() const { return static_cast<int>(class_edges.size()) + 1; }
    [[nodiscard]] std::string to_json() const;
    static SynthConfig from_json(const std::string& text);
};

/// Fully determined by (cfg.seed, index). Targets that cannot be placed without overlap after
/// bounded retries are dropped.
Sample synth_scene(const SynthConfig& cfg, std::uint64_t index);

std::vector<Sample> synth_dataset(const SynthConfig& cfg, std::size_t count, std::uint64_t first_index = 0);

/// Layout: images/<id>.pgm, labels/<id>.txt, classes.txt.
void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples, const std::vector<std::string>& class_names);

struct Dataset {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;
};

/// Samples sorted by id.
Dataset load_dataset(const std::filesystem::path& dir, int channels = 1);

}  // namespace istd::data
