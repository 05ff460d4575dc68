#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>

#include "istd/dual.hpp"
#include "istd/error.hpp"

namespace istd::box {

/// Axis-aligned box in center format, absolute pixels.
template <typename S>
struct BasicBox {
    S cx{};
    S cy{};
    S w{};
    S h{};
};

using BBox = BasicBox<double>;

/// 2-D Gaussian N(mean, cov); cov is row-major 2x2.
struct GaussianBox {
    std::array<double, 2> mean{};
    std::array<double, 4> cov{};
};

struct LossConfig {
    /// NWD normalization constant in pixels.
    double C = 12.0;
    /// Share of the IoU term in the mixed regression loss.
    double iou_ratio = 0.5;
};

template <typename S>
void require_valid(const BasicBox<S>& b) {
    const double w = value_of(b.w), h = value_of(b.h);
    if (!(w > 0.0) || !(h > 0.0) || !std::isfinite(w) || !std::isfinite(h) || !std::isfinite(value_of(b.cx)) ||
        !std::isfinite(value_of(b.cy))) {
        throw ValueError("invalid box: width and height must be positive and all fields finite");
    }
}

inline void require_positive_c(double c) {
    if (!(c > 0.0)) throw ValueError("NWD constant C must be > 0, got " + std::to_string(c));
}

template <typename S>
S iou(const BasicBox<S>& a, const BasicBox<S>& b) {
    require_valid(a);
    require_valid(b);
    const S half(0.5);
    const S ax1 = a.cx - a.w * half, ax2 = a.cx + a.w * half;
    const S ay1 = a.cy - a.h * half, ay2 = a.cy + a.h * half;
    const S bx1 = b.cx - b.w * half, bx2 = b.cx + b.w * half;
    const S by1 = b.cy - b.h * half, by2 = b.cy + b.h * half;
    S iw = (ax2 < bx2 ? ax2 : bx2) - (ax1 > bx1 ? ax1 : bx1);
    S ih = (ay2 < by2 ? ay2 : by2) - (ay1 > by1 ? ay1 : by1);
    if (iw <= S(0) || ih <= S(0)) return S(0);
    const S inter = iw * ih;
    return inter / (a.w * a.h + b.w * b.h - inter);
}

/// 1 - IoU + rho^2 / c^2 + alpha v, with c the enclosing-box diagonal and
/// v = 4/pi^2 (atan(w_gt/h_gt) - atan(w/h))^2, alpha = v / (1 - IoU + v).
template <typename S>
S ciou_loss(const BasicBox<S>& pred, const BasicBox<S>& gt) {
    const S overlap = iou(pred, gt);
    const S half(0.5);
    const S ex1 = (pred.cx - pred.w * half) < (gt.cx - gt.w * half) ? pred.cx - pred.w * half : gt.cx - gt.w * half;
    const S ex2 = (pred.cx + pred.w * half) > (gt.cx + gt.w * half) ? pred.cx + pred.w * half : gt.cx + gt.w * half;
    const S ey1 = (pred.cy - pred.h * half) < (gt.cy - gt.h * half) ? pred.cy - pred.h * half : gt.cy - gt.h * half;
    const S ey2 = (pred.cy + pred.h * half) > (gt.cy + gt.h * half) ? pred.cy + pred.h * half : gt.cy + gt.h * half;
    const S c2 = (ex2 - ex1) * (ex2 - ex1) + (ey2 - ey1) * (ey2 - ey1);
    const S dx = pred.cx - gt.cx, dy = pred.cy - gt.cy;
    const S rho2 = dx * dx + dy * dy;
    using std::atan;
    const S dv = atan(gt.w / gt.h) - atan(pred.w / pred.h);
    const S v = S(4.0 / (std::numbers::pi * std::numbers::pi)) * dv * dv;
    S aspect(0);
    if (v > S(0)) aspect = v * v / (S(1) - overlap + v);
    return S(1) - overlap + rho2 / c2 + aspect;
}

/// Squared Euclidean distance between [cx, cy, w/2, h/2] of the two boxes: the closed form of
/// the 2-Wasserstein distance between their Gaussians.
template <typename S>
S wasserstein2_boxes(const BasicBox<S>& a, const BasicBox<S>& b) {
    require_valid(a);
    require_valid(b);
    const S dx = a.cx - b.cx, dy = a.cy - b.cy;
    const S dw = (a.w - b.w) * S(0.5), dh = (a.h - b.h) * S(0.5);
    return dx * dx + dy * dy + dw * dw + dh * dh;
}

/// exp(-sqrt(W2^2) / C), in (0, 1].
template <typename S>
S nwd(const BasicBox<S>& a, const BasicBox<S>& b, double C) {
    require_positive_c(C);
    using std::exp;
    using std::sqrt;
    return exp(-sqrt(wasserstein2_boxes(a, b)) / S(C));
}

template <typename S>
S nwd_loss(const BasicBox<S>& pred, const BasicBox<S>& gt, double C) {
    return S(1) - nwd(pred, gt, C);
}

GaussianBox gauss_from_box(const BBox& b);

/// Symmetric square root of a 2x2 SPD matrix (row-major).
std::array<double, 4> sqrt_spd2(const std::array<double, 4>& m);

/// ||m1 - m2||^2 + Tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2) for arbitrary SPD covariances.
double wasserstein2_general(const GaussianBox& p, const GaussianBox& q);

/// Loss value and its gradient with respect to the predicted (cx, cy, w, h).
struct BoxLossGrad {
    double value = 0.0;
    std::array<double, 4> grad{};
};

BoxLossGrad iou_loss_grad(const BBox& pred, const BBox& gt);
BoxLossGrad ciou_loss_grad(const BBox& pred, const BBox& gt);
BoxLossGrad nwd_loss_grad(const BBox& pred, const BBox& gt, double C);

struct RegressionPair {
    BBox pred;
    BBox gt;
    /// IoU (or IoU-family similarity) already measured for the pair, in [0, 1].
    double iou = 0.0;
};

/// (1 - iou_ratio) * mean(1 - nwd) + iou_ratio * mean(1 - iou); each mean is taken over the pairs
/// independently. An empty list gives 0.
double box_regression_loss(std::span<const RegressionPair> pairs, const LossConfig& cfg);

/// sqrt(w * h) averaged over boxes: the dataset-derived default for C.
double default_nwd_constant(std::span<const BBox> boxes);

}  // namespace istd::box
