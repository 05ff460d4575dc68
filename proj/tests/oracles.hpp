#pragma once

// Test-only reference implementations. Deliberately naive and independent of the library's
// im2col/GEMM, fused and dual-number code paths.

#include <algorithm>
#include <cmath>
#include <vector>

#include "istd/rng.hpp"
#include "istd/tensor.hpp"

namespace oracle {

inline istd::Tensor<double> random_tensor(const istd::Shape& s, std::uint64_t seed, double scale = 1.0,
                                          bool requires_grad = false) {
    istd::Rng rng(seed);
    std::vector<double> v(s.numel());
    for (auto& x : v) x = rng.normal() * scale;
    return istd::Tensor<double>::from_data(s, std::move(v), requires_grad);
}

inline std::size_t idx(const istd::Shape& s, int n, int c, int h, int w) {
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
}

/// Direct 7-loop grouped cross-correlation with zero padding.
inline std::vector<double> conv2d(const istd::Tensor<double>& x, const istd::Tensor<double>& w,
                                  const std::vector<double>& bias, int stride, int pad, int groups) {
    const auto xs = x.shape();
    const auto ws = w.shape();
    const int k = ws.h;
    const int ho = (xs.h + 2 * pad - k) / stride + 1;
    const int wo = (xs.w + 2 * pad - k) / stride + 1;
    const int cin_g = xs.c / groups, cout_g = ws.n / groups;
    const istd::Shape os{xs.n, ws.n, ho, wo};
    std::vector<double> out(os.numel(), 0.0);
    for (int n = 0; n < xs.n; ++n)
        for (int co = 0; co < ws.n; ++co) {
            const int g = co / cout_g;
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
                    for (int ci = 0; ci < cin_g; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                                acc += x.at(n, g * cin_g + ci, iy, ix) * w.at(co, ci, ky, kx);
                            }
                    out[idx(os, n, co, oy, ox)] = acc;
                }
        }
    return out;
}

inline std::vector<double> maxpool(const istd::Tensor<double>& x, int k, int stride) {
    const auto s = x.shape();
    const int ho = (s.h - k) / stride + 1, wo = (s.w - k) / stride + 1;
    std::vector<double> out;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double m = -INFINITY;
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) m = std::max(m, x.at(n, c, oy * stride + ky, ox * stride + kx));
                    out.push_back(m);
                }
    return out;
}

/// The neuron energy written out scalar-by-scalar from its definition.
inline double simam_energy(const std::vector<double>& channel, std::size_t i, double lambda) {
    const double m = static_cast<double>(channel.size());
    double mu = 0.0;
    for (double v : channel) mu += v;
    mu /= m;
    double var = 0.0;
    for (double v : channel) var += (v - mu) * (v - mu);
    var /= m;
    const double t = channel[i];
    return 4.0 * (var + lambda) / ((t - mu) * (t - mu) + 2.0 * var + 2.0 * lambda);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// IoU by midpoint rasterization on a `cells` x `cells` grid over the union's bounding square.
inline double raster_iou(double acx, double acy, double aw, double ah, double bcx, double bcy, double bw, double bh,
                         int cells) {
    const double x0 = std::min(acx - aw / 2, bcx - bw / 2), x1 = std::max(acx + aw / 2, bcx + bw / 2);
    const double y0 = std::min(acy - ah / 2, bcy - bh / 2), y1 = std::max(acy + ah / 2, bcy + bh / 2);
    const double dx = (x1 - x0) / cells, dy = (y1 - y0) / cells;
    long inter = 0, uni = 0;
    for (int i = 0; i < cells; ++i)
        for (int j = 0; j < cells; ++j) {
            const double x = x0 + (i + 0.5) * dx, y = y0 + (j + 0.5) * dy;
            const bool in_a = std::abs(x - acx) < aw / 2 && std::abs(y - acy) < ah / 2;
            const bool in_b = std::abs(x - bcx) < bw / 2 && std::abs(y - bcy) < bh / 2;
            inter += in_a && in_b;
            uni += in_a || in_b;
        }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// CIoU loss written independently from its published definition.
inline double ciou_loss(double pcx, double pcy, double pw, double ph, double gcx, double gcy, double gw, double gh) {
    const double px1 = pcx - pw / 2, px2 = pcx + pw / 2, py1 = pcy - ph / 2, py2 = pcy + ph / 2;
    const double gx1 = gcx - gw / 2, gx2 = gcx + gw / 2, gy1 = gcy - gh / 2, gy2 = gcy + gh / 2;
    const double iw = std::max(0.0, std::min(px2, gx2) - std::max(px1, gx1));
    const double ih = std::max(0.0, std::min(py2, gy2) - std::max(py1, gy1));
    const double inter = iw * ih;
    const double iou = inter / (pw * ph + gw * gh - inter);
    const double cw = std::max(px2, gx2) - std::min(px1, gx1);
    const double ch = std::max(py2, gy2) - std::min(py1, gy1);
    const double rho2 = (pcx - gcx) * (pcx - gcx) + (pcy - gcy) * (pcy - gcy);
    const double pi = 3.14159265358979323846;
    const double v = 4.0 / (pi * pi) * std::pow(std::atan(gw / gh) - std::atan(pw / ph), 2);
    const double alpha = v == 0.0 ? 0.0 : v / (1.0 - iou + v);
    return 1.0 - (iou - rho2 / (cw * cw + ch * ch) - alpha * v);
}

/// Central difference of a scalar function of one variable.
template <typename F>
double central_diff(F&& f, double x, double eps = 1e-6) {
    return (f(x + eps) - f(x - eps)) / (2.0 * eps);
}

}  // namespace oracle
