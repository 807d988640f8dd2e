// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sparsedet3d/dual.hpp"

namespace sparsedet3d {
namespace {

double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void check_rows(const Matrix& m, size_t n, const char* what) {
    if (static_cast<size_t>(m.rows()) != n) {
        throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(n) + " rows, got " +
                                    std::to_string(m.rows()));
    }
}

void check_targets(std::span<const int> targets, Eigen::Index cols) {
    for (int t : targets) {
        if (t >= cols) throw std::invalid_argument("focal_loss: target class out of range");
    }
}

// Binary focal term and its derivative with respect to p.
struct FocalTerm {
    double value;
    double dp;
};

FocalTerm focal_term(double p, bool positive, double gamma, double alpha) {
    p = clamp_prob(p);
    if (positive) {
        const double q = 1.0 - p;
        const double lg = std::log(p);
        const double mod = std::pow(q, gamma);
        const double dmod = gamma == 0.0 ? 0.0 : -gamma * std::pow(q, gamma - 1.0);
        return {-alpha * mod * lg, -alpha * (dmod * lg + mod / p)};
    }
    const double lg = std::log(1.0 - p);
    const double mod = std::pow(p, gamma);
    const double dmod = gamma == 0.0 ? 0.0 : gamma * std::pow(p, gamma - 1.0);
    return {-alpha * mod * lg, -alpha * (dmod * lg - mod / (1.0 - p))};
}

}  // namespace

double focal_loss(const Matrix& probs, std::span<const int> targets, double gamma, double alpha) {
    check_rows(probs, targets.size(), "focal_loss");
    check_targets(targets, probs.cols());
    if (probs.rows() == 0) return 0.0;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        for (Eigen::Index c = 0; c < probs.cols(); ++c) {
            sum += focal_term(probs(i, c), targets[i] == c, gamma, alpha).value;
        }
    }
    return sum / static_cast<double>(probs.rows());
}

LossGrad focal_loss_logits(const Matrix& logits, std::span<const int> targets, double gamma, double alpha) {
    check_rows(logits, targets.size(), "focal_loss");
    check_targets(targets, logits.cols());
    LossGrad out;
    out.grad = Matrix::Zero(logits.rows(), logits.cols());
    if (logits.rows() == 0) return out;
    const double inv_n = 1.0 / static_cast<double>(logits.rows());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            const double p = sigmoid(logits(i, c));
            const FocalTerm f = focal_term(p, targets[i] == c, gamma, alpha);
            out.value += f.value;
            // Clamped probabilities are flat in the logit.
            const bool clamped = p < kProbEps || p > 1.0 - kProbEps;
            out.grad(i, c) = clamped ? 0.0 : f.dp * p * (1.0 - p) * inv_n;
        }
    }
    out.value *= inv_n;
    return out;
}

double binary_cross_entropy(const Matrix& probs, const Matrix& targets) {
    if (probs.rows() != targets.rows() || probs.cols() != targets.cols()) {
        throw std::invalid_argument("binary_cross_entropy: shape mismatch");
    }
    if (probs.size() == 0) return 0.0;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        const double p = clamp_prob(probs.data()[i]);
        const double y = targets.data()[i];
        sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
    return sum / static_cast<double>(probs.size());
}

LossGrad bce_logits(const Matrix& logits, const Matrix& targets) {
    if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
        throw std::invalid_argument("bce_logits: shape mismatch");
    }
    LossGrad out;
    out.grad = Matrix::Zero(logits.rows(), logits.cols());
    if (logits.size() == 0) return out;
    const double inv_n = 1.0 / static_cast<double>(logits.size());
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        const double z = logits.data()[i];
        const double y = targets.data()[i];
        // Stable log-sigmoid pair.
        const double log_p = -std::log1p(std::exp(-std::abs(z))) + std::min(z, 0.0);
        const double log_q = log_p - z;
        double entropy = 0.0;
        if (y > 0.0) entropy -= y * std::log(y);
        if (y < 1.0) entropy -= (1.0 - y) * std::log(1.0 - y);
        out.value += -(y * log_p + (1.0 - y) * log_q) - entropy;
        out.grad.data()[i] = (sigmoid(z) - y) * inv_n;
    }
    out.value = std::max(0.0, out.value * inv_n);
    return out;
}

double smooth_l1(std::span<const double> pred, std::span<const double> target, double beta) {
    if (pred.size() != target.size()) throw std::invalid_argument("smooth_l1: length mismatch");
    if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be positive");
    if (pred.empty()) return 0.0;
    double sum = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) sum += smooth_l1_term(pred[i] - target[i], beta);
    return sum / static_cast<double>(pred.size());
}

LossGrad smooth_l1_grad(const Matrix& pred, const Matrix& target, double beta) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw std::invalid_argument("smooth_l1: shape mismatch");
    }
    LossGrad out;
    out.grad = Matrix::Zero(pred.rows(), pred.cols());
    if (pred.size() == 0) return out;
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
        const double x = pred.data()[i] - target.data()[i];
        out.value += smooth_l1_term(x, beta);
        out.grad.data()[i] = smooth_l1_deriv(x, beta) * inv_n;
    }
    out.value *= inv_n;
    return out;
}

void LossWeights::validate() const {
    const auto names = loss_term_names();
    const auto values = loss_weight_values(*this);
    for (size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i]) || values[i] < 0.0) {
            throw std::invalid_argument("loss weight " + names[i] + " must be finite and non-negative");
        }
    }
}

std::array<std::string, 6> loss_term_names() { return {"sem", "vote", "cntr", "box", "cls", "rebox"}; }

std::array<double, 6> loss_term_values(const LossTerms& t) { return {t.sem, t.vote, t.cntr, t.box, t.cls, t.rebox}; }

std::array<double, 6> loss_weight_values(const LossWeights& w) {
    return {w.sem, w.vote, w.cntr, w.box, w.cls, w.rebox};
}

LossReport total_loss(const LossTerms& terms, const LossWeights& weights) {
    const auto names = loss_term_names();
    const auto values = loss_term_values(terms);
    const auto w = loss_weight_values(weights);
    LossReport r;
    r.terms = terms;
    for (size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw std::runtime_error("non-finite loss term '" + names[i] + "' (" + std::to_string(values[i]) + ")");
        }
        r.total += w[i] * values[i];
    }
    return r;
}

Box3D decode_stage_one(const BoxCode& r, const Vec3& voxel_center, const Vec3& cell, const Vec3& prior) {
    return decode_stage_one<double>(r, voxel_center, cell, prior);
}

BoxCode encode_stage_one(const Box3D& box, const Vec3& voxel_center, const Vec3& cell, const Vec3& prior) {
    return {(box.cx - voxel_center[0]) / cell[0],
            (box.cy - voxel_center[1]) / cell[1],
            (box.cz - voxel_center[2]) / cell[2],
            std::log(box.w / prior[0]),
            std::log(box.l / prior[1]),
            std::log(box.h / prior[2]),
            std::sin(box.theta),
            std::cos(box.theta)};
}

double centerness_target(const Box3D& box, const Vec3& p) {
    const Vec3 q = to_canonical(p, box);
    const std::array<double, 3> half{0.5 * box.w, 0.5 * box.l, 0.5 * box.h};
    double prod = 1.0;
    for (int a = 0; a < 3; ++a) {
        const double lo = q[a] + half[a];
        const double hi = half[a] - q[a];
        if (lo <= 0.0 || hi <= 0.0) return 0.0;
        prod *= std::min(lo, hi) / std::max(lo, hi);
    }
    return std::clamp(std::cbrt(prod), 0.0, 1.0);
}

LossGrad box_iou_loss(const Matrix& reg, std::span<const Vec3> voxel_centers, std::span<const Vec3> cells,
                      std::span<const Vec3> priors, std::span<const Box3D> gt) {
    const size_t n = gt.size();
    check_rows(reg, n, "box_iou_loss");
    if (reg.cols() != 8) throw std::invalid_argument("box_iou_loss: regression must have 8 columns");
    if (voxel_centers.size() != n || cells.size() != n || priors.size() != n) {
        throw std::invalid_argument("box_iou_loss: size mismatch");
    }
    LossGrad out;
    out.grad = Matrix::Zero(reg.rows(), 8);
    if (n == 0) return out;
    using D = Dual<8>;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
        std::array<D, 8> r;
        for (int k = 0; k < 8; ++k) r[k] = D::variable(reg(static_cast<Eigen::Index>(i), k), k);
        const BoxT<D> b = decode_stage_one<D>(r, voxel_centers[i], cells[i], priors[i]);
        const D iou = iou3d(b, lift_box<D>(gt[i]));
        out.value += 1.0 - iou.v;
        for (int k = 0; k < 8; ++k) out.grad(static_cast<Eigen::Index>(i), k) = -iou.d[k] * inv_n;
    }
    out.value *= inv_n;
    return out;
}

Residual encode_residual(const Box3D& gt, const Box3D& p) {
    const double d = std::sqrt(p.h * p.h + p.w * p.w + p.l * p.l);
    const double dt = gt.theta - p.theta;
    return {(gt.cx - p.cx) / d,
            (gt.cy - p.cy) / d,
            (gt.cz - p.cz) / d,
            std::log(gt.h / p.h),
            std::log(gt.w / p.w),
            std::log(gt.l / p.l),
            std::sin(dt),
            std::cos(dt)};
}

Box3D decode_residual(const Residual& t, const Box3D& proposal) {
    Box3D b = decode_residual_t<double>(t, proposal);
    b.theta = wrap_angle(b.theta);
    return b;
}

LossGrad rebox_loss(const Matrix& pred, std::span<const Box3D> proposals, std::span<const Box3D> gt, double beta) {
    const size_t n = proposals.size();
    check_rows(pred, n, "rebox_loss");
    if (gt.size() != n) throw std::invalid_argument("rebox_loss: size mismatch");
    if (pred.cols() != 8) throw std::invalid_argument("rebox_loss: residuals must have 8 columns");
    LossGrad out;
    out.grad = Matrix::Zero(pred.rows(), 8);
    if (n == 0) return out;
    using D = Dual<8>;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const Residual t = encode_residual(gt[i], proposals[i]);
        double value = 0.0;
        std::array<D, 8> r;
        for (int k = 0; k < 8; ++k) {
            const double x = pred(row, k) - t[k];
            value += smooth_l1_term(x, beta);
            out.grad(row, k) = smooth_l1_deriv(x, beta) * inv_n;
            r[k] = D::variable(pred(row, k), k);
        }
        const D iou = iou3d(decode_residual_t<D>(r, proposals[i]), lift_box<D>(gt[i]));
        value += 1.0 - iou.v;
        for (int k = 0; k < 8; ++k) out.grad(row, k) -= iou.d[k] * inv_n;
        out.value += value;
    }
    out.value *= inv_n;
    return out;
}

}  // namespace sparsedet3d
