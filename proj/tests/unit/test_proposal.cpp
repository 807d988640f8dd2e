// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "sparsedet3d/oracle.hpp"
#include "sparsedet3d/proposal.hpp"

using namespace sparsedet3d;

namespace {

Box3D random_box(Rng& rng, double spread) {
    return {rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-spread, spread),
            rng.uniform(0.2, 1.0),        rng.uniform(0.2, 1.0),        rng.uniform(0.2, 1.0),
            rng.uniform(-std::numbers::pi, std::numbers::pi)};
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1, 1);
    return m;
}

Dense random_dense(Rng& rng, Eigen::Index in, Eigen::Index out) {
    Dense d(in, out);
    d.weight = random_matrix(rng, in, out);
    d.bias = random_matrix(rng, 1, out);
    return d;
}

SparseTensor<double> random_tensor(Rng& rng, size_t n, Eigen::Index c) {
    SparseTensor<double> t;
    t.stride = 2;
    t.voxel_size = {0.02, 0.02, 0.02};
    std::set<Coord3> seen;
    while (t.coords.size() < n) {
        const Coord3 q{2 * static_cast<int32_t>(rng.below(10)), 2 * static_cast<int32_t>(rng.below(10)),
                       2 * static_cast<int32_t>(rng.below(10))};
        if (seen.insert(q).second) t.coords.push_back(q);
    }
    t.feats = random_matrix(rng, static_cast<Eigen::Index>(n), c);
    return t;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

ClassSizeTable sizes3() {
    ClassSizeTable s;
    s.dims = {{0.25, 0.25, 0.25}, {0.45, 0.2, 0.12}, {0.12, 0.12, 0.3}};
    return s;
}

}  // namespace

TEST(Vote, ZeroParametersVoteAtCenters) {
    Rng rng(1);
    const auto t = random_tensor(rng, 20, 4);
    VoteParams p{Dense(4, 8), Dense(8, 7)};
    const VoteOutput v = vote_forward(t, p);
    for (size_t i = 0; i < t.size(); ++i) {
        const Vec3 c = t.center(i);
        for (int a = 0; a < 3; ++a) EXPECT_EQ(v.votes.positions(static_cast<Eigen::Index>(i), a), c[a]);
    }
    EXPECT_EQ(v.dx.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(v.df.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(v.votes.features, t.feats);
}

TEST(Vote, HandEvaluatedSingleVoxel) {
    SparseTensor<double> t;
    t.coords = {{0, 0, 0}};
    t.voxel_size = {1, 1, 1};
    t.feats.resize(1, 1);
    t.feats << 2.0;
    VoteParams p{Dense(1, 2), Dense(2, 4)};
    p.fc1.weight << 1.0, -1.0;
    p.fc1.bias << 0.5, 0.5;  // hidden = relu(2.5, -1.5) = (2.5, 0)
    p.fc2.weight << 1, 2, 3, 4, 9, 9, 9, 9;
    p.fc2.bias << 0.1, 0.2, 0.3, 0.4;
    const VoteOutput v = vote_forward(t, p);
    EXPECT_DOUBLE_EQ(v.dx(0, 0), 2.6);
    EXPECT_DOUBLE_EQ(v.dx(0, 1), 5.2);
    EXPECT_DOUBLE_EQ(v.dx(0, 2), 7.8);
    EXPECT_DOUBLE_EQ(v.df(0, 0), 10.4);
    EXPECT_DOUBLE_EQ(v.votes.positions(0, 0), 0.5 + 2.6);
    EXPECT_DOUBLE_EQ(v.votes.features(0, 0), 12.4);
}

TEST(Vote, ShapeMismatch) {
    Rng rng(2);
    const auto t = random_tensor(rng, 5, 4);
    VoteParams p{Dense(3, 8), Dense(8, 7)};
    EXPECT_THROW(vote_forward(t, p), std::invalid_argument);
    VoteParams q{Dense(4, 8), Dense(8, 6)};
    EXPECT_THROW(vote_forward(t, q), std::invalid_argument);
}

TEST(Semantic, ZeroLogitsGiveHalf) {
    Rng rng(3);
    const auto t = random_tensor(rng, 10, 4);
    const Matrix s = semantic_forward(t, Dense(4, 3));
    EXPECT_EQ(s.rows(), 10);
    EXPECT_EQ(s.cols(), 3);
    EXPECT_TRUE((s.array() == 0.5).all());
}

TEST(Semantic, MatchesHandProductAndIsMonotone) {
    Rng rng(4);
    const auto t = random_tensor(rng, 10, 4);
    Dense d = random_dense(rng, 4, 3);
    const Matrix s = semantic_forward(t, d);
    for (Eigen::Index i = 0; i < 10; ++i) {
        for (Eigen::Index j = 0; j < 3; ++j) {
            double z = d.bias(0, j);
            for (Eigen::Index k = 0; k < 4; ++k) z += t.feats(i, k) * d.weight(k, j);
            EXPECT_NEAR(s(i, j), sigmoid(z), 1e-14);
        }
    }
    double prev = 0.0;
    for (double b : {0.0, 2.0, 5.0, 10.0, 20.0}) {
        d.bias(0, 1) = b;
        const double v = semantic_forward(t, d)(0, 1);
        EXPECT_GE(v, prev);
        prev = v;
    }
    EXPECT_GT(prev, 0.999);
    EXPECT_THROW(semantic_forward(t, Dense(5, 3)), std::invalid_argument);
}

TEST(Assign, SingleAndNested) {
    const std::vector<GtBox> gt{{{0, 0, 0, 2, 2, 2, 0}, 0}, {{0, 0, 0, 1, 1, 1, 0.3}, 2}, {{5, 5, 5, 1, 1, 1, 0}, 1}};
    const std::vector<Vec3> pts{{0.9, 0.9, 0}, {0.1, 0.1, 0.1}, {5, 5, 5}, {10, 10, 10}};
    const VoxelTargets t = assign_targets(pts, gt);
    EXPECT_EQ(t.class_id, (std::vector<int>{0, 2, 1, -1}));
    EXPECT_EQ(t.box_id, (std::vector<int>{0, 1, 2, -1}));
    EXPECT_DOUBLE_EQ(t.center_offset[0][0], -0.9);
    EXPECT_DOUBLE_EQ(t.center_offset[1][2], -0.1);
}

TEST(Assign, MatchesBruteForceAndArgmin) {
    Rng rng(5);
    std::vector<GtBox> gt;
    std::vector<Box3D> boxes;
    for (int b = 0; b < 12; ++b) {
        gt.push_back({random_box(rng, 1.0), static_cast<int>(rng.below(3))});
        boxes.push_back(gt.back().box);
    }
    std::vector<Vec3> pts(3000);
    for (Vec3& p : pts) p = {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)};
    const VoxelTargets t = assign_targets(pts, gt);
    EXPECT_EQ(t.box_id, oracle::brute_assign(pts, boxes));
    for (size_t i = 0; i < pts.size(); ++i) {
        if (t.box_id[i] < 0) continue;
        for (const Box3D& b : boxes) {
            if (contains(b, pts[i])) EXPECT_LE(volume(boxes[t.box_id[i]]), volume(b));
        }
    }
}

TEST(Tau, Schedule) {
    EXPECT_DOUBLE_EQ(tau_schedule(0, DatasetPreset::scannet), 0.15);
    EXPECT_NEAR(tau_schedule(10, DatasetPreset::scannet), 0.13, 1e-15);
    EXPECT_NEAR(tau_schedule(9, DatasetPreset::scannet), 0.15, 1e-15);
    EXPECT_NEAR(tau_schedule(4, DatasetPreset::sunrgbd), 0.13, 1e-15);
    EXPECT_DOUBLE_EQ(tau_schedule(1000, DatasetPreset::scannet), 0.05);
    EXPECT_DOUBLE_EQ(tau_schedule(1000, DatasetPreset::sunrgbd), 0.05);
    EXPECT_THROW(parse_dataset_preset("kitti"), std::invalid_argument);
    EXPECT_THROW(tau_schedule(-1, DatasetPreset::scannet), std::invalid_argument);
    double prev = 1.0;
    for (int e = 0; e < 100; ++e) {
        const double v = tau_schedule(e, DatasetPreset::scannet);
        EXPECT_LE(v, prev);
        prev = v;
    }
}

TEST(Grouping, AllBelowTauIsEmpty) {
    Rng rng(6);
    PositionMatrix votes(50, 3);
    for (Eigen::Index i = 0; i < votes.size(); ++i) votes.data()[i] = rng.uniform(-1, 1);
    const Matrix scores = Matrix::Constant(50, 3, 0.15);
    const auto groups = slice_and_revoxelize(votes, scores, 0.15, 0.15, sizes3(), 9);
    ASSERT_EQ(groups.size(), 3u);
    for (const ClassGroup& g : groups) {
        EXPECT_EQ(g.size(), 0u);
        EXPECT_TRUE(g.members.empty());
    }
}

TEST(Grouping, SlicesCellsAndMultiMembership) {
    Rng rng(7);
    const Eigen::Index n = 300;
    PositionMatrix votes(n, 3);
    for (Eigen::Index i = 0; i < votes.size(); ++i) votes.data()[i] = rng.uniform(-1, 1);
    Matrix scores(n, 3);
    for (Eigen::Index i = 0; i < scores.size(); ++i) scores.data()[i] = rng.uniform();
    const double tau = 0.6;
    const double alpha = 0.15;
    const ClassSizeTable sizes = sizes3();
    const auto groups = slice_and_revoxelize(votes, scores, tau, alpha, sizes, 9);
    size_t total = 0;
    size_t any = 0;
    bool multi = false;
    for (Eigen::Index i = 0; i < n; ++i) {
        int hits = 0;
        for (int j = 0; j < 3; ++j) hits += scores(i, j) > tau;
        any += hits > 0;
        multi = multi || hits > 1;
    }
    for (size_t j = 0; j < 3; ++j) {
        const ClassGroup& g = groups[j];
        std::vector<int32_t> expect;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (scores(i, static_cast<Eigen::Index>(j)) > tau) expect.push_back(static_cast<int32_t>(i));
        }
        EXPECT_EQ(g.members, expect);
        EXPECT_EQ(g.cell[0], alpha * sizes.dims[j].w);
        EXPECT_EQ(g.cell[1], alpha * sizes.dims[j].l);
        EXPECT_EQ(g.cell[2], alpha * sizes.dims[j].h);
        EXPECT_EQ(g.kmap->kernel_size, 9);
        total += g.members.size();
    }
    EXPECT_GE(total, any);
    EXPECT_EQ(total == any, !multi);
}

TEST(Grouping, ClassAwareGroupShapes) {
    Rng rng(8);
    PointCloud votes;
    votes.positions.resize(80, 3);
    for (Eigen::Index i = 0; i < votes.positions.size(); ++i) votes.positions.data()[i] = rng.uniform(0, 0.5);
    votes.features = random_matrix(rng, 80, 4);
    Matrix scores(80, 3);
    for (Eigen::Index i = 0; i < scores.size(); ++i) scores.data()[i] = rng.uniform();
    GroupingWeights w;
    for (int j = 0; j < 3; ++j) {
        ConvWeights<double> cw(3, 4, 6, true);
        cw.kernel = random_matrix(rng, cw.kernel.rows(), 6);
        cw.bias = random_matrix(rng, 1, 6);
        w.per_class.push_back(cw);
    }
    const auto out = class_aware_group(votes, scores, 0.5, 0.15, sizes3(), 3, w);
    ASSERT_EQ(out.size(), 3u);
    for (size_t j = 0; j < 3; ++j) {
        EXPECT_EQ(out[j].channels(), 6);
        EXPECT_EQ(out[j].voxel_size, sizes3().cell(j, 0.15));
        EXPECT_GE(out[j].feats.minCoeff(), 0.0);
    }
    w.per_class.pop_back();
    EXPECT_THROW(class_aware_group(votes, scores, 0.5, 0.15, sizes3(), 3, w), std::invalid_argument);
}

TEST(Grouping, OracleSuite) {
    const auto r = oracle::suite_grouping(9, 10);
    EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Head, ZeroRegressionDecodesToPrior) {
    Rng rng(10);
    const ClassSizeTable sizes = sizes3();
    std::vector<SparseTensor<double>> tensors(3);
    for (size_t j = 0; j < 3; ++j) {
        tensors[j] = random_tensor(rng, 4, 5);
        tensors[j].stride = 1;
        tensors[j].voxel_size = sizes.cell(j, 0.15);
    }
    HeadParams p{Dense(5, 3), Dense(5, 8), Dense(5, 1)};
    p.reg.bias(0, 7) = 1.0;  // (sin, cos) = (0, 1)
    const auto props = proposal_head(tensors, p, sizes);
    ASSERT_EQ(props.size(), 12u);
    for (size_t r = 0; r < props.size(); ++r) {
        const size_t j = r / 4;
        const Proposal& q = props[r];
        const Vec3 c = tensors[j].center(r % 4);
        EXPECT_EQ(q.class_id, static_cast<int>(j));
        EXPECT_DOUBLE_EQ(q.box.cx, c[0]);
        EXPECT_DOUBLE_EQ(q.box.cy, c[1]);
        EXPECT_DOUBLE_EQ(q.box.cz, c[2]);
        EXPECT_DOUBLE_EQ(q.box.w, sizes.dims[j].w);
        EXPECT_DOUBLE_EQ(q.box.l, sizes.dims[j].l);
        EXPECT_DOUBLE_EQ(q.box.h, sizes.dims[j].h);
        EXPECT_DOUBLE_EQ(q.box.theta, 0.0);
        EXPECT_DOUBLE_EQ(q.score, 0.25);
    }
}

TEST(Head, StageOneRoundTrip) {
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        const Box3D g = random_box(rng, 1.0);
        const Vec3 c{g.cx + rng.uniform(-0.1, 0.1), g.cy, g.cz};
        const Vec3 cell{0.0375, 0.03, 0.018};
        const Vec3 prior{0.25, 0.2, 0.12};
        const Box3D d = decode_stage_one(encode_stage_one(g, c, cell, prior), c, cell, prior);
        EXPECT_NEAR(d.cx, g.cx, 1e-6);
        EXPECT_NEAR(d.l, g.l, 1e-6);
        EXPECT_NEAR(std::abs(wrap_angle(d.theta - g.theta)), 0.0, 1e-6);
    }
}

TEST(Nms, Examples) {
    const Box3D b{0, 0, 0, 1, 1, 1, 0};
    EXPECT_EQ(filter_nms({{b, 0.5, 0, 1}}, 0.01, 0.5).size(), 1u);
    const auto two = filter_nms({{b, 0.8, 0, 1}, {b, 0.9, 1, 1}}, 0.01, 0.5);
    ASSERT_EQ(two.size(), 1u);
    EXPECT_EQ(two[0].score, 0.9);
    EXPECT_TRUE(filter_nms({{b, 0.005, 0, 1}}, 0.01, 0.5).empty());
    EXPECT_THROW(filter_nms({}, 0.01, 1.5), std::invalid_argument);
}

TEST(Nms, MatchesBruteForceAndInvariants) {
    Rng rng(12);
    std::vector<Proposal> props;
    std::vector<Box3D> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 200; ++i) {
        Proposal p{random_box(rng, 1.0), rng.uniform(), static_cast<int>(rng.below(3)), 1.0};
        props.push_back(p);
        boxes.push_back(p.box);
        scores.push_back(p.score);
    }
    const auto kept = filter_nms(props, 0.01, 0.5);
    const auto ref = oracle::brute_nms(boxes, scores, 0.01, 0.5);
    ASSERT_EQ(kept.size(), ref.size());
    for (size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(kept[i].score, scores[ref[i]]);
    for (size_t i = 0; i < kept.size(); ++i) {
        if (i > 0) EXPECT_GE(kept[i - 1].score, kept[i].score);
        for (size_t j = i + 1; j < kept.size(); ++j) EXPECT_LE(iou3d(kept[i].box, kept[j].box), 0.5);
    }
}
