// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "sparsedet3d/losses.hpp"
#include "sparsedet3d/oracle.hpp"

using namespace sparsedet3d;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo, double hi) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
    return m;
}

std::vector<double> flat(const Matrix& m) { return {m.data(), m.data() + m.size()}; }

Matrix unflat(const std::vector<double>& v, Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    std::copy(v.begin(), v.end(), m.data());
    return m;
}

Box3D random_box(Rng& rng) {
    return {rng.uniform(-1, 1),    rng.uniform(-1, 1),    rng.uniform(-1, 1),
            rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5),
            rng.uniform(-std::numbers::pi, std::numbers::pi)};
}

}  // namespace

TEST(Focal, MatchesFormula) {
    Rng rng(1);
    const Matrix p = random_matrix(rng, 12, 3, 0.01, 0.99);
    const std::vector<int> t{0, 1, 2, -1, 0, 1, 2, -1, 0, 0, 1, 2};
    EXPECT_NEAR(focal_loss(p, t, 2.0, 0.25), oracle::focal_formula(p, t, 2.0, 0.25), 1e-12);
    EXPECT_NEAR(focal_loss(p, t, 0.0, 1.0), oracle::focal_formula(p, t, 0.0, 1.0), 1e-12);
}

TEST(Focal, GammaZeroAlphaOneIsCrossEntropy) {
    Matrix p(1, 2);
    p << 0.8, 0.3;
    const std::vector<int> t{0};
    EXPECT_NEAR(focal_loss(p, t, 0.0, 1.0), -std::log(0.8) - std::log(0.7), 1e-12);
}

TEST(Focal, LogitGradient) {
    Rng rng(2);
    const Matrix z = random_matrix(rng, 8, 3, -3, 3);
    const std::vector<int> t{0, 2, -1, 1, 1, 0, -1, 2};
    const LossGrad g = focal_loss_logits(z, t, 2.0, 0.25);
    auto f = [&](const std::vector<double>& v) { return focal_loss_logits(unflat(v, 8, 3), t, 2.0, 0.25).value; };
    EXPECT_LE(oracle::rel_err(flat(g.grad), oracle::central_diff(f, flat(z), 1e-6)), 1e-5);
}

TEST(Focal, Errors) {
    const Matrix p = Matrix::Constant(2, 3, 0.5);
    const std::vector<int> bad_rows{0};
    const std::vector<int> bad_class{0, 3};
    EXPECT_THROW(focal_loss(p, bad_rows, 2, 0.25), std::invalid_argument);
    EXPECT_THROW(focal_loss(p, bad_class, 2, 0.25), std::invalid_argument);
}

TEST(Bce, PerfectPredictionScoresZero) {
    Matrix t(1, 3);
    t << 0.2, 0.5, 0.9;
    Matrix z(1, 3);
    for (int i = 0; i < 3; ++i) z(0, i) = std::log(t(0, i) / (1 - t(0, i)));
    const LossGrad g = bce_logits(z, t);
    EXPECT_NEAR(g.value, 0.0, 1e-12);
    EXPECT_LE(g.grad.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Bce, GradientMatchesPlainCrossEntropy) {
    Rng rng(3);
    const Matrix z = random_matrix(rng, 5, 2, -2, 2);
    const Matrix t = random_matrix(rng, 5, 2, 0, 1);
    const LossGrad g = bce_logits(z, t);
    auto f = [&](const std::vector<double>& v) {
        const Matrix zz = unflat(v, 5, 2);
        return binary_cross_entropy((1.0 / (1.0 + (-zz.array()).exp())).matrix(), t);
    };
    EXPECT_LE(oracle::rel_err(flat(g.grad), oracle::central_diff(f, flat(z), 1e-6)), 1e-5);
}

TEST(SmoothL1, PiecewiseValues) {
    const std::vector<double> zero{0, 0, 0};
    EXPECT_DOUBLE_EQ(smooth_l1(std::vector<double>{0.5, 0, 0}, zero, 1.0), 0.125 / 3);
    EXPECT_DOUBLE_EQ(smooth_l1(std::vector<double>{2.0, 0, 0}, zero, 1.0), 1.5 / 3);
    EXPECT_DOUBLE_EQ(smooth_l1(std::vector<double>{-2.0, 0, 0}, zero, 0.5), 1.75 / 3);
    Rng rng(4);
    std::vector<double> x(40);
    for (double& v : x) v = rng.uniform(-3, 3);
    const std::vector<double> z(40, 0.0);
    EXPECT_NEAR(smooth_l1(x, z, 1.0), oracle::smooth_l1_formula(x, 1.0), 1e-14);
}

TEST(SmoothL1, ContinuousAtBeta) {
    for (double beta : {0.1, 1.0, 2.5}) {
        EXPECT_NEAR(smooth_l1_term(beta - 1e-12, beta), smooth_l1_term(beta + 1e-12, beta), 1e-9);
        EXPECT_NEAR(smooth_l1_deriv(beta - 1e-12, beta), 1.0, 1e-9);
    }
}

TEST(Weights, TotalIsWeightedSum) {
    LossTerms t{1, 2, 3, 4, 5, 6};
    LossWeights w;
    const LossReport r = total_loss(t, w);
    EXPECT_DOUBLE_EQ(r.total, 1 + 2 + 3 + 4 + 5 + 0.5 * 6);
    t.cntr = std::nan("");
    try {
        total_loss(t, w);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("cntr"), std::string::npos);
    }
}

TEST(Weights, Defaults) {
    const LossWeights w;
    EXPECT_EQ(w.sem, 1.0);
    EXPECT_EQ(w.vote, 1.0);
    EXPECT_EQ(w.cntr, 1.0);
    EXPECT_EQ(w.box, 1.0);
    EXPECT_EQ(w.cls, 1.0);
    EXPECT_EQ(w.rebox, 0.5);
}

TEST(Centerness, CenterOneBoundaryZero) {
    const Box3D b{1, 1, 1, 2, 1, 0.5, 0.7};
    EXPECT_NEAR(centerness_target(b, {1, 1, 1}), 1.0, 1e-12);
    const Vec3 face = from_canonical({1.0, 0, 0}, b);
    EXPECT_NEAR(centerness_target(b, face), 0.0, 1e-4);
    EXPECT_EQ(centerness_target(b, {5, 5, 5}), 0.0);
    const double c = centerness_target(b, from_canonical({0.5, 0, 0}, b));
    EXPECT_NEAR(c, std::cbrt(0.5 / 1.5), 1e-12);
}

TEST(Residual, RoundTripAndUnitHeading) {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const Box3D g = random_box(rng);
        const Box3D p = random_box(rng);
        const Residual t = encode_residual(g, p);
        EXPECT_NEAR(t[6] * t[6] + t[7] * t[7], 1.0, 1e-15);
        const Box3D d = decode_residual(t, p);
        EXPECT_NEAR(d.cx, g.cx, 1e-9);
        EXPECT_NEAR(d.cy, g.cy, 1e-9);
        EXPECT_NEAR(d.cz, g.cz, 1e-9);
        EXPECT_NEAR(d.w, g.w, 1e-9);
        EXPECT_NEAR(d.l, g.l, 1e-9);
        EXPECT_NEAR(d.h, g.h, 1e-9);
        EXPECT_NEAR(std::abs(wrap_angle(d.theta - g.theta)), 0.0, 1e-9);
    }
}

TEST(Residual, IdentityIsZero) {
    const Box3D b{0.3, -0.2, 0.1, 0.5, 0.7, 0.9, 0.4};
    const Residual t = encode_residual(b, b);
    for (int k = 0; k < 6; ++k) EXPECT_NEAR(t[k], 0.0, 1e-15);
    EXPECT_NEAR(t[6], 0.0, 1e-15);
    EXPECT_NEAR(t[7], 1.0, 1e-15);
}

TEST(StageOne, RoundTrip) {
    Rng rng(6);
    for (int i = 0; i < 200; ++i) {
        const Box3D g = random_box(rng);
        const Vec3 c{g.cx + 0.1, g.cy - 0.05, g.cz};
        const Vec3 cell{0.04, 0.05, 0.06};
        const Vec3 prior{0.3, 0.4, 0.5};
        const Box3D d = decode_stage_one(encode_stage_one(g, c, cell, prior), c, cell, prior);
        EXPECT_NEAR(d.cx, g.cx, 1e-9);
        EXPECT_NEAR(d.w, g.w, 1e-9);
        EXPECT_NEAR(d.h, g.h, 1e-9);
        EXPECT_NEAR(std::abs(wrap_angle(d.theta - g.theta)), 0.0, 1e-9);
    }
}

TEST(BoxIou, PerfectRegressionIsZero) {
    const Box3D g{0.2, 0.1, 0.3, 0.4, 0.5, 0.6, 0.3};
    const Vec3 c{0.25, 0.1, 0.3};
    const Vec3 cell{0.05, 0.05, 0.05};
    const Vec3 prior{0.4, 0.4, 0.4};
    const BoxCode r = encode_stage_one(g, c, cell, prior);
    Matrix reg(1, 8);
    for (int k = 0; k < 8; ++k) reg(0, k) = r[k];
    const std::vector<Vec3> cs{c}, cells{cell}, priors{prior};
    const std::vector<Box3D> gt{g};
    EXPECT_NEAR(box_iou_loss(reg, cs, cells, priors, gt).value, 0.0, 1e-9);
}

TEST(Rebox, PerfectResidualIsZero) {
    Rng rng(7);
    const Box3D g = random_box(rng);
    const Box3D p = random_box(rng);
    const Residual t = encode_residual(g, p);
    Matrix pred(1, 8);
    for (int k = 0; k < 8; ++k) pred(0, k) = t[k];
    const std::vector<Box3D> ps{p}, gs{g};
    EXPECT_NEAR(rebox_loss(pred, ps, gs).value, 0.0, 1e-9);
    EXPECT_THROW(rebox_loss(Matrix::Zero(1, 7), ps, gs), std::invalid_argument);
}

TEST(Oracles, LossSuites) {
    EXPECT_TRUE(oracle::suite_loss_formulas(8, 20, 1e-10).passed);
    const auto g = oracle::suite_loss_gradients(9, 5, 1e-4);
    EXPECT_TRUE(g.passed) << g.detail;
}
