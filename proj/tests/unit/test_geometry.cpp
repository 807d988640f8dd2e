// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "sparsedet3d/geometry.hpp"
#include "sparsedet3d/oracle.hpp"

using namespace sparsedet3d;

namespace {

constexpr double kPi = std::numbers::pi;

Box3D random_box(Rng& rng) {
    return {rng.uniform(-1, 1),  rng.uniform(-1, 1),  rng.uniform(-1, 1),  rng.uniform(0.2, 1.5),
            rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5), rng.uniform(-kPi, kPi)};
}

}  // namespace

TEST(Geometry, WrapAngle) {
    EXPECT_NEAR(wrap_angle(3 * kPi), kPi, 1e-12);
    EXPECT_NEAR(wrap_angle(-kPi), kPi, 1e-12);
    EXPECT_NEAR(wrap_angle(0.5), 0.5, 0);
    EXPECT_NEAR(wrap_angle(2 * kPi + 0.1), 0.1, 1e-12);
}

TEST(Geometry, ValidateBox) {
    EXPECT_NO_THROW(validate_box({0, 0, 0, 1, 1, 1, 0}));
    EXPECT_THROW(validate_box({0, 0, 0, 0, 1, 1, 0}), std::invalid_argument);
    EXPECT_THROW(validate_box({0, 0, 0, 1, -1, 1, 0}), std::invalid_argument);
    EXPECT_THROW(validate_box({0, 0, 0, 1, 1, INFINITY, 0}), std::invalid_argument);
}

TEST(Geometry, CornersMatchOracle) {
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        const Box3D b = random_box(rng);
        const auto a = corners(b);
        const auto r = oracle::box_corners(b);
        for (int c = 0; c < 8; ++c) {
            for (int k = 0; k < 3; ++k) EXPECT_NEAR(a[c][k], r[c][k], 1e-12);
        }
    }
}

TEST(Geometry, CanonicalRoundTrip) {
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        const Box3D b = random_box(rng);
        const Vec3 p{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
        const Vec3 q = from_canonical(to_canonical(p, b), b);
        for (int k = 0; k < 3; ++k) EXPECT_NEAR(q[k], p[k], 1e-12);
    }
    const Box3D b{1, 2, 3, 1, 1, 1, kPi / 2};
    const Vec3 q = to_canonical({1, 3, 3}, b);
    EXPECT_NEAR(q[0], 1.0, 1e-12);
    EXPECT_NEAR(q[1], 0.0, 1e-12);
    EXPECT_NEAR(q[2], 0.0, 1e-12);
}

TEST(Geometry, ContainsMatchesHalfspaces) {
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        const Box3D b = random_box(rng);
        for (int s = 0; s < 100; ++s) {
            const Vec3 p{b.cx + rng.uniform(-1, 1), b.cy + rng.uniform(-1, 1), b.cz + rng.uniform(-1, 1)};
            EXPECT_EQ(contains(b, p), oracle::contains_halfspace(b, p));
        }
    }
    const Box3D unit{0, 0, 0, 1, 1, 1, 0};
    EXPECT_TRUE(contains(unit, {0.5, 0, 0}));
    EXPECT_FALSE(contains(unit, {0.5000001, 0, 0}));
}

TEST(Iou, AnalyticCases) {
    const Box3D a{0, 0, 0, 1, 1, 1, 0};
    EXPECT_NEAR(iou3d(a, a), 1.0, 1e-9);
    EXPECT_NEAR(iou3d(a, Box3D{0.5, 0, 0, 1, 1, 1, 0}), 1.0 / 3.0, 1e-9);
    EXPECT_NEAR(iou3d(a, Box3D{0, 0, 0.5, 1, 1, 1, 0}), 1.0 / 3.0, 1e-9);
    EXPECT_NEAR(iou3d(a, Box3D{3, 0, 0, 1, 1, 1, 0}), 0.0, 0);
    EXPECT_NEAR(iou3d(a, Box3D{0, 0, 0, 2, 2, 2, 0}), 0.125, 1e-9);
    EXPECT_NEAR(iou3d(a, Box3D{0, 0, 0, 1, 1, 1, kPi / 2}), 1.0, 1e-9);
    EXPECT_NEAR(iou3d(a, Box3D{1, 0, 0, 1, 1, 1, 0}), 0.0, 1e-12);  // touching faces
    EXPECT_TRUE(oracle::suite_iou_analytic(1e-9).passed);
}

TEST(Iou, SymmetricAndBounded) {
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        const Box3D a = random_box(rng);
        const Box3D b = random_box(rng);
        const double v = iou3d(a, b);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0 + 1e-12);
        EXPECT_NEAR(v, iou3d(b, a), 1e-12);
        EXPECT_NEAR(iou3d(a, a), 1.0, 1e-12);
    }
}

TEST(Iou, PeriodicInHeading) {
    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        const Box3D a = random_box(rng);
        Box3D b = random_box(rng);
        const double v = iou3d(a, b);
        b.theta += kPi;
        EXPECT_NEAR(iou3d(a, b), v, 1e-9);
    }
}

TEST(Iou, AgreesWithMonteCarlo) {
    Rng rng(6);
    for (int i = 0; i < 10; ++i) {
        const Box3D a = random_box(rng);
        Box3D b = random_box(rng);
        b.cx = a.cx + rng.uniform(-0.4, 0.4);
        b.cy = a.cy + rng.uniform(-0.4, 0.4);
        b.cz = a.cz + rng.uniform(-0.3, 0.3);
        EXPECT_NEAR(iou3d(a, b), oracle::monte_carlo_iou(a, b, 200000, rng), 0.02);
    }
}

TEST(Iou, GradientMatchesFiniteDifferences) {
    Rng rng(7);
    int checked = 0;
    while (checked < 20) {
        const Box3D a = random_box(rng);
        Box3D b = random_box(rng);
        b.cx = a.cx + rng.uniform(-0.3, 0.3);
        b.cy = a.cy + rng.uniform(-0.3, 0.3);
        b.cz = a.cz + rng.uniform(-0.2, 0.2);
        const IouGrad g = iou3d_grad(a, b);
        if (g.iou < 0.1 || g.iou > 0.9) continue;
        ++checked;
        EXPECT_NEAR(g.iou, iou3d(a, b), 1e-12);
        auto f = [&](const std::vector<double>& x) {
            return iou3d(Box3D{x[0], x[1], x[2], x[3], x[4], x[5], x[6]}, b);
        };
        const auto fd = oracle::central_diff(f, {a.cx, a.cy, a.cz, a.w, a.l, a.h, a.theta}, 1e-6);
        EXPECT_LE(oracle::rel_err(g.grad, fd, 1e-8), 1e-4);
    }
}
