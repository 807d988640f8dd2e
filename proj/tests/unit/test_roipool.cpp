// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "sparsedet3d/oracle.hpp"
#include "sparsedet3d/roipool.hpp"

using namespace sparsedet3d;

namespace {

Box3D random_box(Rng& rng) {
    return {rng.uniform(-1, 1),    rng.uniform(-1, 1),    rng.uniform(-1, 1),
            rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0),
            rng.uniform(-std::numbers::pi, std::numbers::pi)};
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1, 1);
    return m;
}

ConvWeights<double> random_weights(Rng& rng, int k, int c_in, int c_out) {
    ConvWeights<double> w(k, c_in, c_out, true);
    w.kernel = random_matrix(rng, w.kernel.rows(), c_out);
    w.bias = random_matrix(rng, 1, c_out);
    return w;
}

}  // namespace

TEST(RoiGrid, SinglePointAtCenter) {
    const std::vector<Box3D> props{{0.51, 0.33, 0.27, 0.4, 0.3, 0.2, 0.7}};
    const GridSample g = sample_roi_grid(props, {1, 1, 1}, {0.02, 0.02, 0.02});
    ASSERT_EQ(g.size(), 1u);
    EXPECT_EQ(g.points[0], (Coord3{25, 16, 13}));
    ASSERT_EQ(g.owners[0].size(), 1u);
    EXPECT_NEAR(g.owners[0][0].position[0], 0.51, 1e-15);
    const Vec3 c = roi_grid_point(props[0], {1, 1, 1}, 0, 0, 0);
    EXPECT_NEAR(c[1], 0.33, 1e-15);
}

TEST(RoiGrid, IdenticalProposalsMerge) {
    const Box3D b{0.3, 0.2, 0.1, 0.5, 0.4, 0.3, 0.2};
    const std::vector<Box3D> one{b};
    const std::vector<Box3D> two{b, b};
    const GridSample g1 = sample_roi_grid(one, {7, 7, 7}, {0.02, 0.02, 0.02});
    const GridSample g2 = sample_roi_grid(two, {7, 7, 7}, {0.02, 0.02, 0.02});
    EXPECT_EQ(g1.size(), g2.size());
    for (const auto& owners : g2.owners) {
        std::set<int32_t> ps;
        for (const GridOwner& o : owners) ps.insert(o.proposal);
        EXPECT_EQ(ps, (std::set<int32_t>{0, 1}));
    }
}

TEST(RoiGrid, BoundAndContainment) {
    Rng rng(1);
    std::vector<Box3D> props;
    for (int i = 0; i < 6; ++i) props.push_back(random_box(rng));
    const GridSample g = sample_roi_grid(props, {5, 4, 3}, {0.04, 0.04, 0.04}, 2);
    EXPECT_LE(g.size(), props.size() * 60);
    std::set<Coord3> uniq(g.points.begin(), g.points.end());
    EXPECT_EQ(uniq.size(), g.size());
    size_t owners = 0;
    for (size_t i = 0; i < g.size(); ++i) {
        EXPECT_EQ(g.points[i].x % 2, 0);
        for (const GridOwner& o : g.owners[i]) {
            ++owners;
            EXPECT_TRUE(oracle::contains_halfspace(props[static_cast<size_t>(o.proposal)], o.position, 1e-9));
        }
    }
    EXPECT_EQ(owners, props.size() * 60);
}

TEST(RoiGrid, SharedPointIsStrictlyFewer) {
    // Coarse voxels make the two proposals share quantized points.
    const std::vector<Box3D> props{{0, 0, 0, 1, 1, 1, 0}, {0.1, 0, 0, 1, 1, 1, 0}};
    const GridSample g = sample_roi_grid(props, {3, 3, 3}, {1, 1, 1});
    EXPECT_LT(g.size(), 54u);
}

TEST(RoiGrid, ZeroResolutionRejected) {
    const std::vector<Box3D> props{{0, 0, 0, 1, 1, 1, 0}};
    EXPECT_THROW(sample_roi_grid(props, {0, 1, 1}, {1, 1, 1}), std::invalid_argument);
}

TEST(Canonical, CenterAndTranslation) {
    const Box3D b{1, 2, 3, 1, 1, 1, 0};
    const auto q = canonical_transform(std::vector<Vec3>{{1, 2, 3}, {2, 2, 3}}, b);
    EXPECT_EQ(q[0], (Vec3{0, 0, 0}));
    EXPECT_EQ(q[1], (Vec3{1, 0, 0}));
}

TEST(Canonical, CornersBecomeAxisAligned) {
    Rng rng(2);
    for (int i = 0; i < 50; ++i) {
        const Box3D b = random_box(rng);
        const auto c = corners(b);
        const auto q = canonical_transform(std::vector<Vec3>(c.begin(), c.end()), b);
        for (const Vec3& p : q) {
            EXPECT_NEAR(std::abs(p[0]), 0.5 * b.w, 1e-9);
            EXPECT_NEAR(std::abs(p[1]), 0.5 * b.l, 1e-9);
            EXPECT_NEAR(std::abs(p[2]), 0.5 * b.h, 1e-9);
        }
    }
}

TEST(Canonical, Isometry) {
    Rng rng(3);
    const Box3D b = random_box(rng);
    std::vector<Vec3> pts(20);
    for (Vec3& p : pts) p = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    const auto q = canonical_transform(pts, b);
    auto dist = [](const Vec3& a, const Vec3& c) {
        return std::sqrt((a[0] - c[0]) * (a[0] - c[0]) + (a[1] - c[1]) * (a[1] - c[1]) + (a[2] - c[2]) * (a[2] - c[2]));
    };
    for (size_t i = 0; i < pts.size(); ++i) {
        for (size_t j = i + 1; j < pts.size(); ++j) EXPECT_NEAR(dist(pts[i], pts[j]), dist(q[i], q[j]), 1e-9);
    }
}

TEST(Abstraction, EmptySpaceGivesEmptyOutput) {
    Rng rng(4);
    SparseTensor<double> x;
    x.coords = {{0, 0, 0}, {1, 0, 0}};
    x.feats = random_matrix(rng, 2, 3);
    const std::vector<Box3D> far{{50, 50, 50, 1, 1, 1, 0}};
    const auto res = sparse_abstraction(x, far, {7, 7, 7}, random_weights(rng, 5, 3, 4));
    EXPECT_EQ(res.output.size(), 0u);
}

TEST(Abstraction, OracleSuite) {
    const auto r = oracle::suite_roi_abstraction(5, 10, 1e-10);
    EXPECT_TRUE(r.passed) << r.detail;
}

TEST(RoiPool, HollowProposalIsZero) {
    Rng rng(6);
    SparseTensor<double> x;
    x.coords = {{0, 0, 0}};
    x.feats = random_matrix(rng, 1, 3);
    const std::vector<Box3D> props{{0.5, 0.5, 0.5, 1, 1, 1, 0}, {40, 40, 40, 1, 1, 1, 0}};
    RoiWeights w{random_weights(rng, 5, 3, 4), random_weights(rng, 7, 4, 2)};
    const RoiFeature f = roiconv_pool(x, props, RoiConfig{}, w);
    EXPECT_EQ(f.hollow, (std::vector<char>{0, 1}));
    EXPECT_EQ(f.feats.row(1).cwiseAbs().sum(), 0.0);
    EXPECT_THROW(roiconv_pool(x, std::vector<Box3D>{}, RoiConfig{}, w), std::invalid_argument);
}

TEST(RoiPool, SingleVoxelHandEvaluation) {
    // Unit voxels, one voxel at the box center: every 7^3 grid point
    // quantizes onto that voxel, block 1 sees it through the central tap and
    // block 2 receives it once in each of its 343 kernel cells.
    Rng rng(7);
    SparseTensor<double> x;
    x.coords = {{0, 0, 0}};
    x.feats = random_matrix(rng, 1, 3);
    const std::vector<Box3D> props{{0.5, 0.5, 0.5, 1, 1, 1, 0}};
    RoiWeights w{random_weights(rng, 5, 3, 4), random_weights(rng, 7, 4, 2)};
    const RoiFeature f = roiconv_pool(x, props, RoiConfig{}, w);

    const int center = offset_index({0, 0, 0}, 5);
    const Matrix q1 = (x.feats * w.block1.block(center) + w.block1.bias).cwiseMax(0.0);
    Matrix out = w.block2.bias;
    for (int d = 0; d < 343; ++d) out += q1 * w.block2.block(d);
    out = out.cwiseMax(0.0);
    ASSERT_EQ(f.feats.rows(), 1);
    EXPECT_LE((f.feats - out).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(f.hollow[0], 0);
}

TEST(RoiPool, ShippedConfig) {
    const RoiConfig c;
    EXPECT_EQ(c.grid1, (std::array<int, 3>{7, 7, 7}));
    EXPECT_EQ(c.kernel1, 5);
    EXPECT_EQ(c.grid2, (std::array<int, 3>{1, 1, 1}));
    EXPECT_EQ(c.kernel2, 7);
}

TEST(Selection, IdenticalKeptAndOracle) {
    const Box3D g{0, 0, 0, 1, 1, 1, 0};
    const std::vector<Box3D> props{{5, 5, 5, 1, 1, 1, 0}, g};
    const Selection s = select_training_proposals(props, std::vector<Box3D>{g});
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s.proposal[0], 1);
    EXPECT_DOUBLE_EQ(s.iou[0], 1.0);
    EXPECT_TRUE(oracle::suite_selection(8, 5).passed);
}

TEST(Selection, CapAndThreshold) {
    Rng rng(9);
    const Box3D g{0, 0, 0, 1, 1, 1, 0};
    std::vector<Box3D> props;
    for (int i = 0; i < 400; ++i) {
        props.push_back({rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0, 1, 1, 1, rng.uniform(-0.3, 0.3)});
    }
    const Selection s = select_training_proposals(props, std::vector<Box3D>{g});
    EXPECT_EQ(s.size(), 128u);
    for (size_t i = 0; i < s.size(); ++i) {
        EXPECT_GT(s.iou[i], 0.3);
        if (i > 0) EXPECT_GE(s.iou[i - 1], s.iou[i]);
    }
}

TEST(Refine, ResidualTargets) {
    const Box3D p{0, 0, 0, 1, 1, 1, 0};
    const Residual same = encode_residual(p, p);
    EXPECT_EQ(same, (Residual{0, 0, 0, 0, 0, 0, 0, 1}));
    const Box3D shifted{std::sqrt(3.0), 0, 0, 1, 1, 1, 0};
    EXPECT_DOUBLE_EQ(encode_residual(shifted, p)[0], 1.0);
}

TEST(Refine, HeadHandEvaluation) {
    RoiFeature roi;
    roi.feats.resize(1, 2);
    roi.feats << 1.0, -1.0;
    roi.hollow = {0};
    RefineParams params{Dense(2, 2), Dense(2, 8)};
    params.fc1.weight << 1, 0, 0, 1;  // hidden = relu(1, -1) = (1, 0)
    params.fc2.weight.setZero();
    params.fc2.weight(0, 0) = 0.5;
    params.fc2.bias(0, 7) = 1.0;
    const std::vector<Box3D> props{{1, 2, 3, 2, 2, 2, 0.1}};
    const Refinement r = refine_head(roi, props, params);
    EXPECT_DOUBLE_EQ(r.residual(0, 0), 0.5);
    EXPECT_NEAR(r.boxes[0].cx, 1 + 0.5 * std::sqrt(12.0), 1e-12);
    EXPECT_NEAR(r.boxes[0].w, 2.0, 1e-12);
    EXPECT_NEAR(r.boxes[0].theta, 0.1, 1e-12);
    EXPECT_THROW(refine_head(roi, std::vector<Box3D>{}, params), std::invalid_argument);
}

TEST(Refine, DecodeRoundTrip) {
    Rng rng(10);
    for (int i = 0; i < 100; ++i) {
        const Box3D g = random_box(rng);
        const Box3D p = random_box(rng);
        const Residual t = encode_residual(g, p);
        Matrix row(1, 8);
        for (int k = 0; k < 8; ++k) row(0, k) = t[k];
        const Box3D d = decode_refinement(row, std::vector<Box3D>{p})[0];
        EXPECT_NEAR(d.cx, g.cx, 1e-6);
        EXPECT_NEAR(d.h, g.h, 1e-6);
        EXPECT_NEAR(std::abs(wrap_angle(d.theta - g.theta)), 0.0, 1e-6);
    }
}
