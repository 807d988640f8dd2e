// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <set>

#include <gtest/gtest.h>

#include "sparsedet3d/backbone.hpp"
#include "sparsedet3d/random.hpp"

using namespace sparsedet3d;

namespace {

SparseTensor<double> random_input(Rng& rng, int n, int extent, int channels) {
    std::set<Coord3> seen;
    SparseTensor<double> x;
    while (static_cast<int>(seen.size()) < n) {
        const Coord3 c{static_cast<int32_t>(rng.below(static_cast<uint64_t>(extent))),
                       static_cast<int32_t>(rng.below(static_cast<uint64_t>(extent))),
                       static_cast<int32_t>(rng.below(static_cast<uint64_t>(extent)))};
        if (seen.insert(c).second) x.coords.push_back(c);
    }
    x.feats.resize(n, channels);
    for (Eigen::Index i = 0; i < x.feats.size(); ++i) x.feats.data()[i] = rng.uniform(-1, 1);
    return x;
}

struct Net {
    nn::ParameterStore store;
    std::unique_ptr<Backbone> backbone;

    explicit Net(uint64_t seed, BackboneConfig cfg = {}) {
        backbone = std::make_unique<Backbone>(cfg, store);
        Rng rng(seed);
        backbone->init(rng);
    }
};

}  // namespace

TEST(Backbone, ShapesAndStride) {
    Net net(1);
    Rng rng(2);
    const SparseTensor<double> x = random_input(rng, 300, 24, 3);
    const SparseTensor<double> y = net.backbone->forward(x);
    EXPECT_EQ(y.channels(), 64);
    EXPECT_EQ(y.stride, 2);
    ASSERT_GT(y.size(), 0u);
    std::set<Coord3> quantized;
    for (const Coord3& c : x.coords) quantized.insert({floor_div(c.x, 2) * 2, floor_div(c.y, 2) * 2, floor_div(c.z, 2) * 2});
    for (const Coord3& c : y.coords) EXPECT_TRUE(quantized.count(c));
    EXPECT_TRUE(y.feats.allFinite());
}

TEST(Backbone, EmptyInput) {
    Net net(1);
    SparseTensor<double> x;
    x.feats.resize(0, 3);
    const SparseTensor<double> y = net.backbone->forward(x);
    EXPECT_EQ(y.size(), 0u);
    EXPECT_EQ(y.channels(), 64);
}

TEST(Backbone, Deterministic) {
    Net a(3), b(3);
    Rng rng(4);
    const SparseTensor<double> x = random_input(rng, 200, 20, 3);
    const SparseTensor<double> ya = a.backbone->forward(x);
    const SparseTensor<double> yb = b.backbone->forward(x);
    EXPECT_EQ(ya.coords, yb.coords);
    EXPECT_EQ((ya.feats - yb.feats).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backbone, EquivariantUnderCoarsestStrideShift) {
    Net net(5);
    Rng rng(6);
    const SparseTensor<double> x = random_input(rng, 250, 20, 3);
    SparseTensor<double> shifted = x;
    const Coord3 t{16, -32, 48};
    for (Coord3& c : shifted.coords) c = {c.x + t.x, c.y + t.y, c.z + t.z};
    const SparseTensor<double> y = net.backbone->forward(x);
    const SparseTensor<double> ys = net.backbone->forward(shifted);
    ASSERT_EQ(y.size(), ys.size());
    const CoordIndex index(ys.coords);
    for (size_t i = 0; i < y.size(); ++i) {
        const Coord3& c = y.coords[i];
        const int32_t r = index.find({c.x + t.x, c.y + t.y, c.z + t.z});
        ASSERT_GE(r, 0);
        EXPECT_LE((y.feats.row(static_cast<Eigen::Index>(i)) - ys.feats.row(r)).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Backbone, ConfigValidation) {
    BackboneConfig c;
    c.fusion_points = {0};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.fusion_points = {2, 1};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.highres_stride = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.out_channels = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_EQ(BackboneConfig{}.stage_stride(3), 16);
}

TEST(Fuse, ZeroParametersLeaveBranchesUnchanged) {
    nn::ParameterStore store;
    const FuseParams p = create_fuse_params(store, "f", 4, 6, 4);
    EXPECT_EQ(p.high_to_low.size(), 2u);
    Rng rng(7);
    SparseTensor<double> high = random_input(rng, 40, 12, 4);
    for (Coord3& c : high.coords) c = {c.x * 2, c.y * 2, c.z * 2};
    high.stride = 2;
    SparseTensor<double> low;
    std::set<Coord3> parents;
    for (const Coord3& c : high.coords) parents.insert({floor_div(c.x, 8) * 8, floor_div(c.y, 8) * 8, floor_div(c.z, 8) * 8});
    low.coords.assign(parents.begin(), parents.end());
    low.stride = 8;
    low.feats = FeatureMatrix<double>::Random(static_cast<Eigen::Index>(low.coords.size()), 6);
    const auto [nh, nl] = bilateral_fuse(high, low, p);
    EXPECT_EQ(nh.coords, high.coords);
    EXPECT_EQ(nl.coords, low.coords);
    EXPECT_LE((nh.feats - high.feats).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_LE((nl.feats - low.feats).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Fuse, EmptyHighBranchAddsNothingToLow) {
    nn::ParameterStore store;
    const FuseParams p = create_fuse_params(store, "f", 4, 6, 2);
    Rng rng(8);
    for (nn::Parameter* q : store.all()) {
        if (q->name.ends_with(".kernel")) nn::init_he(*q, q->value.rows(), rng);
    }
    SparseTensor<double> high;
    high.stride = 2;
    high.feats.resize(0, 4);
    SparseTensor<double> low;
    low.coords = {{0, 0, 0}, {4, 0, 0}};
    low.stride = 4;
    low.feats = FeatureMatrix<double>::Random(2, 6);
    const auto [nh, nl] = bilateral_fuse(high, low, p);
    EXPECT_EQ(nh.size(), 0u);
    EXPECT_LE((nl.feats - low.feats).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Fuse, RejectsBadStrides) {
    nn::ParameterStore store;
    EXPECT_THROW(create_fuse_params(store, "f", 4, 6, 3), std::invalid_argument);
    const FuseParams p = create_fuse_params(store, "g", 4, 6, 2);
    SparseTensor<double> high, low;
    high.stride = 2;
    high.feats.resize(0, 4);
    low.stride = 8;
    low.feats.resize(0, 6);
    EXPECT_THROW(bilateral_fuse(high, low, p), std::invalid_argument);
    low.stride = 2;
    EXPECT_THROW(bilateral_fuse(high, low, p), std::invalid_argument);
}
