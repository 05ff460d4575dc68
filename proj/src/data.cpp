#include "istd/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <fstream>
#include <sstream>

#include "istd/error.hpp"
#include "istd/rng.hpp"

namespace istd::data {

namespace fs = std::filesystem;

std::vector<GroundTruth> parse_labels(const std::string& text, int img_w, int img_h, const std::string& source) {
    if (img_w <= 0 || img_h <= 0) throw ValueError("image size must be positive");
    std::vector<GroundTruth> out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto where = source + ":" + std::to_string(line_no);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        double cls = 0, v[4];
        if (!(ls >> cls >> v[0] >> v[1] >> v[2] >> v[3])) throw ValueError(where + ": expected 'class cx cy w h'");
        std::string extra;
        if (ls >> extra) throw ValueError(where + ": unexpected trailing field '" + extra + "'");
        if (cls < 0 || cls != std::floor(cls)) throw ValueError(where + ": class must be a non-negative integer");
        for (double x : v) {
            if (!(x >= 0.0 && x <= 1.0)) throw ValueError(where + ": value outside [0, 1]");
        }
        if (v[2] <= 0 || v[3] <= 0) throw ValueError(where + ": box sides must be positive");
        const double x1 = std::max(0.0, (v[0] - v[2] / 2) * img_w), x2 = std::min<double>(img_w, (v[0] + v[2] / 2) * img_w);
        const double y1 = std::max(0.0, (v[1] - v[3] / 2) * img_h), y2 = std::min<double>(img_h, (v[1] + v[3] / 2) * img_h);
        if (!(x2 > x1 && y2 > y1)) throw ValueError(where + ": box lies outside the image");
        out.push_back(GroundTruth{box::BBox{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1}, static_cast<int>(cls)});
    }
    return out;
}

std::vector<GroundTruth> load_labels(const fs::path& path, int img_w, int img_h) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_labels(ss.str(), img_w, img_h, path.string());
}

std::string format_labels(const std::vector<GroundTruth>& gts, int img_w, int img_h) {
    std::string out;
    char buf[160];
    for (const auto& g : gts) {
        std::snprintf(buf, sizeof buf, "%d %.9g %.9g %.9g %.9g\n", g.class_id, g.bbox.cx / img_w, g.bbox.cy / img_h,
                      g.bbox.w / img_w, g.bbox.h / img_h);
        out += buf;
    }
    return out;
}

void save_labels(const fs::path& path, const std::vector<GroundTruth>& gts, int img_w, int img_h) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << format_labels(gts, img_w, img_h);
}

namespace {

/// Reads one header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

int header_int(std::istream& in, const fs::path& path) {
    const std::string t = header_token(in);
    if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        throw IoError(path.string() + ": malformed header");
    }
    return std::stoi(t);
}

}  // namespace

Tensor<float> load_image(const fs::path& path, int channels) {
    if (channels != 1 && channels != 3) throw ValueError("channels must be 1 or 3");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    const std::string magic = header_token(in);
    if (magic != "P5" && magic != "P6") throw IoError(path.string() + ": unsupported format '" + magic + "' (need P5 or P6)");
    const int w = header_int(in, path), h = header_int(in, path), maxval = header_int(in, path);
    if (maxval != 255) throw IoError(path.string() + ": only 8-bit images are supported, maxval " + std::to_string(maxval));
    if (w <= 0 || h <= 0) throw IoError(path.string() + ": empty image");
    const int src_c = magic == "P5" ? 1 : 3;
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * src_c);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw IoError(path.string() + ": truncated pixel data");
    }
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    std::vector<float> out(plane * static_cast<std::size_t>(channels));
    for (std::size_t i = 0; i < plane; ++i) {
        if (src_c == 1) {
            for (int c = 0; c < channels; ++c) out[c * plane + i] = static_cast<float>(raw[i] / 255.0);
        } else if (channels == 3) {
            for (int c = 0; c < 3; ++c) out[c * plane + i] = static_cast<float>(raw[3 * i + c] / 255.0);
        } else {
            const double y = 0.299 * raw[3 * i] + 0.587 * raw[3 * i + 1] + 0.114 * raw[3 * i + 2];
            out[i] = static_cast<float>(y / 255.0);
        }
    }
    return Tensor<float>::from_data({1, channels, h, w}, std::move(out));
}

void save_image(const Tensor<float>& image, const fs::path& path) {
    const Shape& s = image.shape();
    if (s.n != 1 || (s.c != 1 && s.c != 3)) throw ShapeError("save_image expects (1, 1|3, h, w), got " + s.str());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << (s.c == 1 ? "P5" : "P6") << '\n' << s.w << ' ' << s.h << "\n255\n";
    const std::size_t plane = s.plane();
    std::vector<unsigned char> raw(plane * static_cast<std::size_t>(s.c));
    const auto d = image.data();
    for (std::size_t i = 0; i < plane; ++i) {
        for (int c = 0; c < s.c; ++c) {
            const double v = std::clamp(static_cast<double>(d[c * plane + i]), 0.0, 1.0);
            raw[i * static_cast<std::size_t>(s.c) + static_cast<std::size_t>(c)] = static_cast<unsigned char>(std::lround(v * 255.0));
        }
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Split split_dataset(std::vector<std::string> ids, const std::array<double, 3>& ratios, std::uint64_t seed) {
    if (ids.empty()) throw ValueError("split_dataset: empty id list");
    for (double r : ratios) {
        if (!(r >= 0.0)) throw ValueError("split ratios must be non-negative");
    }
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ValueError("split ratios must sum to 1");
    Rng rng(seed);
    for (std::size_t i = ids.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(ids[i - 1], ids[j]);
    }
    const double n = static_cast<double>(ids.size());
    // The small tolerance keeps products like 10 * 0.7 = 6.9999... at 7.
    const auto n_train = static_cast<std::size_t>(std::floor(n * ratios[0] + 1e-9));
    const auto n_val = std::min(ids.size() - n_train, static_cast<std::size_t>(std::floor(n * ratios[1] + 1e-9)));
    Split s;
    s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
    return s;
}

const char* to_string(Background b) {
    switch (b) {
        case Background::gradient: return "gradient";
        case Background::clouds: return "clouds";
        case Background::clutter: return "clutter";
    }
    return "?";
}

Background parse_background(const std::string& s) {
    if (s == "gradient") return Background::gradient;
    if (s == "clouds") return Background::clouds;
    if (s == "clutter") return Background::clutter;
    throw ValueError("unknown background '" + s + "'");
}

void SynthConfig::validate() const {
    if (img_size < 16) throw ValueError("img_size must be at least 16");
    if (targets_min < 0 || targets_max < targets_min) throw ValueError("invalid targets_per_image range");
    if (!(size_min >= 1.0) || size_max < size_min) throw ValueError("target sizes must satisfy 1 <= size_min <= size_max");
    if (size_max > img_size / 2.0) throw ValueError("size_max must not exceed half the image");
    if (!(contrast_min > 0.0) || contrast_max < contrast_min || contrast_max > 0.5) {
        throw ValueError("contrast range must satisfy 0 < min <= max <= 0.5");
    }
    if (!(noise_sigma >= 0.0) || noise_sigma > 0.2) throw ValueError("noise_sigma must lie in [0, 0.2]");
    if (!std::is_sorted(class_edges.begin(), class_edges.end())) throw ValueError("class_edges must be ascending");
}

std::string SynthConfig::to_json() const {
    nlohmann::ordered_json j;
    j["img_size"] = img_size;
    j["targets_per_image"] = {targets_min, targets_max};
    j["target_size"] = {size_min, size_max};
    j["target_intensity"] = {contrast_min, contrast_max};
    j["noise_sigma"] = noise_sigma;
    j["background"] = to_string(background);
    j["seed"] = seed;
    j["class_edges"] = class_edges;
    return j.dump(2);
}

SynthConfig SynthConfig::from_json(const std::string& text) {
    SynthConfig c;
    try {
        const auto j = nlohmann::json::parse(text);
        c.img_size = j.value("img_size", c.img_size);
        if (j.contains("targets_per_image")) {
            c.targets_min = j["targets_per_image"].at(0).get<int>();
            c.targets_max = j["targets_per_image"].at(1).get<int>();
        }
        if (j.contains("target_size")) {
            c.size_min = j["target_size"].at(0).get<double>();
            c.size_max = j["target_size"].at(1).get<double>();
        }
        if (j.contains("target_intensity")) {
            c.contrast_min = j["target_intensity"].at(0).get<double>();
            c.contrast_max = j["target_intensity"].at(1).get<double>();
        }
        c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
        c.background = parse_background(j.value("background", std::string(to_string(c.background))));
        c.seed = j.value("seed", c.seed);
        c.class_edges = j.value("class_edges", c.class_edges);
    } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("invalid synth config: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

/// SplitMix64 finalizer: decorrelates the per-scene stream from (seed, index).
std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

struct Blob {
    double x, y, sigma, amp;
};

void add_blob(std::vector<double>& img, int n, const Blob& b) {
    const int r = static_cast<int>(std::ceil(4.0 * b.sigma));
    const int x0 = std::max(0, static_cast<int>(b.x) - r), x1 = std::min(n - 1, static_cast<int>(b.x) + r);
    const int y0 = std::max(0, static_cast<int>(b.y) - r), y1 = std::min(n - 1, static_cast<int>(b.y) + r);
    const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double dx = x + 0.5 - b.x, dy = y + 0.5 - b.y;
            img[static_cast<std::size_t>(y) * n + x] += b.amp * std::exp(-(dx * dx + dy * dy) * inv);
        }
    }
}

}  // namespace

Sample synth_scene(const SynthConfig& cfg, std::uint64_t index) {
    cfg.validate();
    Rng rng(mix(mix(cfg.seed) ^ index));
    const int n = cfg.img_size;
    std::vector<double> img(static_cast<std::size_t>(n) * n);

    // Background: base level plus a linear gradient, then low-frequency blobs.
    const double base = rng.uniform(0.12, 0.3);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double slope = rng.uniform(0.0, 0.1) / n;
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            img[static_cast<std::size_t>(y) * n + x] = base + slope * ((x - n / 2.0) * std::cos(angle) + (y - n / 2.0) * std::sin(angle));
        }
    }
    if (cfg.background != Background::gradient) {
        const int clouds = rng.uniform_int(2, 5);
        for (int i = 0; i < clouds; ++i) {
            add_blob(img, n, Blob{rng.uniform(0, n), rng.uniform(0, n), rng.uniform(0.15, 0.3) * n, rng.uniform(-0.05, 0.08)});
        }
    }

    Sample s;
    char id[32];
    std::snprintf(id, sizeof id, "%06llu", static_cast<unsigned long long>(index));
    s.id = id;
    if (cfg.background == Background::clutter) {
        // Faint, broad distractors that are not labeled.
        const int k = rng.uniform_int(1, 4);
        for (int i = 0; i < k; ++i) {
            add_blob(img, n, Blob{rng.uniform(0, n), rng.uniform(0, n), rng.uniform(2.5, 5.0), rng.uniform(0.04, 0.1)});
        }
    }

    const int wanted = static_cast<int>(rng.uniform_int(cfg.targets_min, cfg.targets_max));
    for (int t = 0; t < wanted; ++t) {
        const double size = rng.uniform(cfg.size_min, cfg.size_max);
        const double contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
        const int margin = static_cast<int>(std::ceil(size / 2.0)) + 1;
        for (int attempt = 0; attempt < 100; ++attempt) {
            // Centers sit on pixel centers.
            const int px = static_cast<int>(rng.uniform_int(margin, n - 1 - margin));
            const int py = static_cast<int>(rng.uniform_int(margin, n - 1 - margin));
            const double cx = px + 0.5, cy = py + 0.5;
            const bool clash = std::any_of(s.gts.begin(), s.gts.end(), [&](const GroundTruth& g) {
                const double gap = (g.bbox.w + size) / 2.0 + 4.0;
                return std::abs(g.bbox.cx - cx) < gap && std::abs(g.bbox.cy - cy) < gap;
            });
            if (clash) continue;
            add_blob(img, n, Blob{cx, cy, size / 6.0, contrast});
            const int cls = static_cast<int>(std::upper_bound(cfg.class_edges.begin(), cfg.class_edges.end(), size) - cfg.class_edges.begin());
            s.gts.push_back(GroundTruth{box::BBox{cx, cy, size, size}, cls});
            break;
        }
    }
    if (cfg.noise_sigma > 0) {
        for (double& v : img) v += cfg.noise_sigma * rng.normal();
    }
    std::vector<float> px(img.size());
    std::transform(img.begin(), img.end(), px.begin(), [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); });
    s.image = Tensor<float>::from_data({1, 1, n, n}, std::move(px));
    return s;
}

std::vector<Sample> synth_dataset(const SynthConfig& cfg, std::size_t count, std::uint64_t first_index) {
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(synth_scene(cfg, first_index + i));
    return out;
}

void save_dataset(const fs::path& dir, const std::vector<Sample>& samples, const std::vector<std::string>& class_names) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "labels");
    for (const auto& s : samples) {
        save_image(s.image, dir / "images" / (s.id + ".pgm"));
        save_labels(dir / "labels" / (s.id + ".txt"), s.gts, s.image.shape().w, s.image.shape().h);
    }
    std::ofstream out(dir / "classes.txt");
    if (!out) throw IoError("cannot write " + (dir / "classes.txt").string());
    for (const auto& c : class_names) out << c << '\n';
}

Dataset load_dataset(const fs::path& dir, int channels) {
    if (!fs::is_directory(dir / "images")) throw IoError(dir.string() + " has no images/ directory");
    Dataset d;
    std::ifstream cls(dir / "classes.txt");
    if (!cls) throw IoError("cannot read " + (dir / "classes.txt").string());
    for (std::string line; std::getline(cls, line);) {
        if (!line.empty()) d.class_names.push_back(line);
    }
    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(dir / "images")) {
        if (e.path().extension() == ".pgm" || e.path().extension() == ".ppm") images.push_back(e.path());
    }
    std::sort(images.begin(), images.end());
    for (const auto& p : images) {
        Sample s;
        s.id = p.stem().string();
        s.image = load_image(p, channels);
        const fs::path lab = dir / "labels" / (s.id + ".txt");
        if (fs::exists(lab)) s.gts = load_labels(lab, s.image.shape().w, s.image.shape().h);
        for (const auto& g : s.gts) {
            if (g.class_id >= static_cast<int>(d.class_names.size())) throw ValueError(lab.string() + ": class id beyond classes.txt");
        }
        d.samples.push_back(std::move(s));
    }
    return d;
}

}  // namespace istd::data
