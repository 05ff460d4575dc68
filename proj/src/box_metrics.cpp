#include "istd/box_metrics.hpp"

#include <cmath>

namespace istd::box {
namespace {

using D4 = Dual<4>;

BasicBox<D4> seeded(const BBox& b) { return {D4(b.cx, 0), D4(b.cy, 1), D4(b.w, 2), D4(b.h, 3)}; }
BasicBox<D4> constant(const BBox& b) { return {D4(b.cx), D4(b.cy), D4(b.w), D4(b.h)}; }
BoxLossGrad unpack(const D4& v) { return {v.v, v.d}; }

void require_spd(const std::array<double, 4>& m) {
    const double asym = std::abs(m[1] - m[2]);
    const double det = m[0] * m[3] - m[1] * m[2];
    if (!(m[0] > 0.0) || !(m[3] > 0.0) || !(det > 0.0) || asym > 1e-12 * (std::abs(m[0]) + std::abs(m[3]))) {
        throw ValueError("covariance is not symmetric positive definite");
    }
}

std::array<double, 4> matmul2(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    return {a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2],
            a[2] * b[1] + a[3] * b[3]};
}

}  // namespace

GaussianBox gauss_from_box(const BBox& b) {
    require_valid(b);
    return {{b.cx, b.cy}, {b.w * b.w / 4.0, 0.0, 0.0, b.h * b.h / 4.0}};
}

std::array<double, 4> sqrt_spd2(const std::array<double, 4>& m) {
    require_spd(m);
    // For 2x2 SPD M: sqrt(M) = (M + s I) / t with s = sqrt(det M), t = sqrt(tr M + 2 s).
    const double s = std::sqrt(m[0] * m[3] - m[1] * m[2]);
    const double t = std::sqrt(m[0] + m[3] + 2.0 * s);
    return {(m[0] + s) / t, m[1] / t, m[2] / t, (m[3] + s) / t};
}

double wasserstein2_general(const GaussianBox& p, const GaussianBox& q) {
    require_spd(p.cov);
    require_spd(q.cov);
    const double dx = p.mean[0] - q.mean[0];
    const double dy = p.mean[1] - q.mean[1];
    const auto root_q = sqrt_spd2(q.cov);
    auto inner = matmul2(matmul2(root_q, p.cov), root_q);
    // Symmetrize away rounding before the second square root.
    inner[1] = inner[2] = 0.5 * (inner[1] + inner[2]);
    const auto cross = sqrt_spd2(inner);
    const double trace = p.cov[0] + p.cov[3] + q.cov[0] + q.cov[3] - 2.0 * (cross[0] + cross[3]);
    return dx * dx + dy * dy + trace;
}

BoxLossGrad iou_loss_grad(const BBox& pred, const BBox& gt) {
    return unpack(D4(1.0) - iou(seeded(pred), constant(gt)));
}

BoxLossGrad ciou_loss_grad(const BBox& pred, const BBox& gt) { return unpack(ciou_loss(seeded(pred), constant(gt))); }

BoxLossGrad nwd_loss_grad(const BBox& pred, const BBox& gt, double C) {
    return unpack(nwd_loss(seeded(pred), constant(gt), C));
}

double box_regression_loss(std::span<const RegressionPair> pairs, const LossConfig& cfg) {
    require_positive_c(cfg.C);
    if (!(cfg.iou_ratio >= 0.0 && cfg.iou_ratio <= 1.0)) throw ValueError("iou_ratio must lie in [0, 1]");
    if (pairs.empty()) return 0.0;
    double nwd_term = 0.0, iou_term = 0.0;
    for (const auto& p : pairs) {
        if (!(p.iou >= 0.0 && p.iou <= 1.0)) throw ValueError("pair IoU must lie in [0, 1]");
        nwd_term += 1.0 - nwd(p.pred, p.gt, cfg.C);
        iou_term += 1.0 - p.iou;
    }
    const auto n = static_cast<double>(pairs.size());
    return (1.0 - cfg.iou_ratio) * (nwd_term / n) + cfg.iou_ratio * (iou_term / n);
}

double default_nwd_constant(std::span<const BBox> boxes) {
    if (boxes.empty()) throw ValueError("cannot derive the NWD constant from an empty box set");
    double acc = 0.0;
    for (const auto& b : boxes) acc += std::sqrt(b.w * b.h);
    return acc / static_cast<double>(boxes.size());
}

}  // namespace istd::box
