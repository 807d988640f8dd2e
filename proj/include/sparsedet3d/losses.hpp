// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "sparsedet3d/geometry.hpp"
#include "sparsedet3d/sparse_tensor.hpp"

namespace sparsedet3d {

using Matrix = FeatureMatrix<double>;

/// Loss value with its gradient with respect to the raw head output it was
/// computed from (same shape as that output).
struct LossGrad {
    double value = 0.0;
    Matrix grad;
};

inline constexpr double kProbEps = 1e-7;

/// Mean over rows of the per-class binary focal term
/// -alpha (1 - p_t)^gamma log p_t summed over columns. targets[i] is the
/// positive column of row i, or -1 for an all-negative row.
double focal_loss(const Matrix& probs, std::span<const int> targets, double gamma, double alpha);

/// focal_loss on sigmoid(logits), with the gradient in logit space.
LossGrad focal_loss_logits(const Matrix& logits, std::span<const int> targets, double gamma, double alpha);

/// Mean of -(y log p + (1-y) log(1-p)) over all entries.
double binary_cross_entropy(const Matrix& probs, const Matrix& targets);

/// Relative-entropy form of binary cross-entropy on sigmoid(logits): the
/// cross-entropy minus the entropy of the soft target, so a perfect
/// prediction scores 0 while the gradient equals that of plain BCE.
/// Averaged over entries.
LossGrad bce_logits(const Matrix& logits, const Matrix& targets);

/// Elementwise 0.5 x^2 / beta below beta, |x| - 0.5 beta above; averaged.
double smooth_l1(std::span<const double> pred, std::span<const double> target, double beta = 1.0);

/// smooth_l1 over matching matrices, averaged over all entries.
LossGrad smooth_l1_grad(const Matrix& pred, const Matrix& target, double beta = 1.0);

/// Per-entry derivative of the unaveraged smooth-l1 term.
inline double smooth_l1_deriv(double x, double beta) {
    if (x > beta) return 1.0;
    if (x < -beta) return -1.0;
    return x / beta;
}
inline double smooth_l1_term(double x, double beta) {
    const double a = std::abs(x);
    return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

struct LossWeights {
    double sem = 1.0;
    double vote = 1.0;
    double cntr = 1.0;
    double box = 1.0;
    double cls = 1.0;
    double rebox = 0.5;

    void validate() const;
};

/// Per-term losses in a fixed order plus the weighted total.
struct LossTerms {
    double sem = 0.0;
    double vote = 0.0;
    double cntr = 0.0;
    double box = 0.0;
    double cls = 0.0;
    double rebox = 0.0;
};

struct LossReport {
    LossTerms terms;
    double total = 0.0;
    // Diagnostics.
    int positives = 0;        // stage-I voxels with a same-class target
    int train_proposals = 0;  // proposals fed to the refinement loss
};

/// Names in report order: sem, vote, cntr, box, cls, rebox.
std::array<std::string, 6> loss_term_names();
std::array<double, 6> loss_term_values(const LossTerms& t);
std::array<double, 6> loss_weight_values(const LossWeights& w);

/// Weighted sum in report order. Throws std::runtime_error naming the first
/// non-finite term.
LossReport total_loss(const LossTerms& terms, const LossWeights& weights);

// Stage-I box parameterization. The 8 regression outputs are
// (dx, dy, dz) in units of the class cell, log(w/w_j), log(l/l_j),
// log(h/h_j), sin(theta), cos(theta).
using BoxCode = std::array<double, 8>;

template <class T>
BoxT<T> decode_stage_one(const std::array<T, 8>& r, const Vec3& voxel_center, const Vec3& cell, const Vec3& prior) {
    using std::atan2;
    using std::exp;
    BoxT<T> b;
    b.cx = voxel_center[0] + r[0] * cell[0];
    b.cy = voxel_center[1] + r[1] * cell[1];
    b.cz = voxel_center[2] + r[2] * cell[2];
    b.w = exp(r[3]) * prior[0];
    b.l = exp(r[4]) * prior[1];
    b.h = exp(r[5]) * prior[2];
    b.theta = atan2(r[6], r[7]);
    return b;
}

Box3D decode_stage_one(const BoxCode& r, const Vec3& voxel_center, const Vec3& cell, const Vec3& prior);
BoxCode encode_stage_one(const Box3D& box, const Vec3& voxel_center, const Vec3& cell, const Vec3& prior);

/// Cube root of the product over the three box axes of min(face-, face+) /
/// max(face-, face+) in the box frame; 0 outside, 1 at the center.
double centerness_target(const Box3D& box, const Vec3& p);

/// Mean over rows of 1 - iou3d(decode(reg[i]), gt[i]); gradient in the raw
/// regression space. Rows with no overlap contribute 1 and a zero gradient.
LossGrad box_iou_loss(const Matrix& reg, std::span<const Vec3> voxel_centers, std::span<const Vec3> cells,
                      std::span<const Vec3> priors, std::span<const Box3D> gt);

// Refinement residual t = ((x_gt - x)/d, (y_gt - y)/d, (z_gt - z)/d,
// log h_gt/h, log w_gt/w, log l_gt/l, sin dtheta, cos dtheta) with
// d = sqrt(h^2 + w^2 + l^2).
using Residual = std::array<double, 8>;

Residual encode_residual(const Box3D& gt, const Box3D& proposal);

template <class T>
BoxT<T> decode_residual_t(const std::array<T, 8>& t, const Box3D& p) {
    using std::atan2;
    using std::exp;
    const double d = std::sqrt(p.h * p.h + p.w * p.w + p.l * p.l);
    BoxT<T> b;
    b.cx = p.cx + t[0] * d;
    b.cy = p.cy + t[1] * d;
    b.cz = p.cz + t[2] * d;
    b.h = exp(t[3]) * p.h;
    b.w = exp(t[4]) * p.w;
    b.l = exp(t[5]) * p.l;
    b.theta = p.theta + atan2(t[6], t[7]);
    return b;
}

/// Inverse of encode_residual; theta wrapped to (-pi, pi].
Box3D decode_residual(const Residual& t, const Box3D& proposal);

/// Mean over proposals of sum_k smooth_l1(pred_k - target_k) plus
/// 1 - iou3d(decode(pred), gt), with the gradient in residual space.
LossGrad rebox_loss(const Matrix& pred, std::span<const Box3D> proposals, std::span<const Box3D> gt,
                    double beta = 1.0);

}  // namespace sparsedet3d
