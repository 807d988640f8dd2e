// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <set>

#include <gtest/gtest.h>

#include "sparsedet3d/oracle.hpp"
#include "sparsedet3d/parallel.hpp"
#include "sparsedet3d/sparse_tensor.hpp"

using namespace sparsedet3d;

namespace {

std::vector<Coord3> random_coords(Rng& rng, size_t n, int extent) {
    std::set<Coord3> seen;
    std::vector<Coord3> out;
    while (out.size() < n) {
        const Coord3 c{static_cast<int32_t>(rng.below(extent)), static_cast<int32_t>(rng.below(extent)),
                       static_cast<int32_t>(rng.below(extent))};
        if (seen.insert(c).second) out.push_back(c);
    }
    return out;
}

template <class T>
FeatureMatrix<T> random_feats(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    FeatureMatrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-1, 1));
    return m;
}

ConvWeights<double> random_weights(Rng& rng, int k, int c_in, int c_out, bool bias) {
    ConvWeights<double> w(k, c_in, c_out, bias);
    w.kernel = random_feats<double>(rng, w.kernel.rows(), w.kernel.cols());
    if (bias) w.bias = random_feats<double>(rng, 1, c_out);
    return w;
}

}  // namespace

TEST(CoordIndex, FindsInsertedAndRejectsMissing) {
    Rng rng(1);
    const auto coords = random_coords(rng, 500, 64);
    CoordIndex idx(coords);
    EXPECT_EQ(idx.size(), coords.size());
    for (size_t i = 0; i < coords.size(); ++i) EXPECT_EQ(idx.find(coords[i]), static_cast<int32_t>(i));
    EXPECT_EQ(idx.find({-1, -1, -1}), -1);
    EXPECT_EQ(idx.find({1000, 0, 0}), -1);
}

TEST(CoordIndex, NegativeAndWideCoordinates) {
    // Components differing only above bit 21 share a packed key but stay distinct.
    const std::vector<Coord3> coords{{-5, 3, -7}, {1 << 21, 0, 0}, {0, 0, 0}, {-(1 << 22), 4, 4}};
    CoordIndex idx(coords);
    for (size_t i = 0; i < coords.size(); ++i) EXPECT_EQ(idx.find(coords[i]), static_cast<int32_t>(i));
}

TEST(CoordIndex, DuplicateRejected) {
    const std::vector<Coord3> coords{{0, 0, 0}, {1, 0, 0}, {0, 0, 0}};
    EXPECT_THROW(require_unique(coords, "test"), std::invalid_argument);
}

TEST(KernelOffsets, LexicographicZFastest) {
    const auto off = kernel_offsets(3);
    ASSERT_EQ(off.size(), 27u);
    EXPECT_EQ(off[0], (Coord3{-1, -1, -1}));
    EXPECT_EQ(off[1], (Coord3{-1, -1, 0}));
    EXPECT_EQ(off[3], (Coord3{-1, 0, -1}));
    EXPECT_EQ(off[9], (Coord3{0, -1, -1}));
    EXPECT_EQ(off[13], (Coord3{0, 0, 0}));
    EXPECT_TRUE(std::is_sorted(off.begin(), off.end()));
    for (size_t d = 0; d < off.size(); ++d) EXPECT_EQ(offset_index(off[d], 3), static_cast<int>(d));
    EXPECT_EQ(offset_index({2, 0, 0}, 3), -1);
}

TEST(KernelMap, IdentityNeighborhood) {
    const std::vector<Coord3> c{{0, 0, 0}};
    const KernelMap km = build_kernel_map(c, c, 1);
    ASSERT_EQ(km.triples.size(), 1u);
    EXPECT_EQ(km.triples[0], (KernelMap::Triple{0, 0, 0}));
}

TEST(KernelMap, OffsetsRecoverDisplacements) {
    const std::vector<Coord3> in{{0, 0, 0}, {1, 0, 0}};
    const std::vector<Coord3> out{{0, 0, 0}};
    const KernelMap km = build_kernel_map(in, out, 3);
    ASSERT_EQ(km.triples.size(), 2u);
    const auto off = kernel_offsets(3);
    std::set<Coord3> disp;
    for (const auto& t : km.triples) disp.insert(in[t.in_idx] - out[t.out_idx]);
    EXPECT_EQ(disp, (std::set<Coord3>{{0, 0, 0}, {1, 0, 0}}));
    for (const auto& t : km.triples) EXPECT_EQ(off[t.offset_idx], in[t.in_idx] - out[t.out_idx]);
}

TEST(KernelMap, RandomMatchesBruteForce) {
    Rng rng(2);
    for (int rep = 0; rep < 10; ++rep) {
        const auto in = random_coords(rng, 50, 8);
        const auto out = random_coords(rng, 50, 8);
        for (int dil : {1, 2}) {
            const KernelMap km = build_kernel_map(in, out, 5, dil);
            const auto ref = oracle::brute_kernel_map(in, out, 5, dil);
            EXPECT_EQ(km.triples, ref);
            EXPECT_EQ(km.triples.size(), ref.size());
        }
    }
}

TEST(KernelMap, RejectsBadInput) {
    const std::vector<Coord3> c{{0, 0, 0}};
    const std::vector<Coord3> dup{{0, 0, 0}, {0, 0, 0}};
    EXPECT_THROW(build_kernel_map(c, c, 2), std::invalid_argument);
    EXPECT_THROW(build_kernel_map(dup, c, 3), std::invalid_argument);
    EXPECT_THROW(build_kernel_map(c, dup, 3), std::invalid_argument);
}

TEST(KernelMap, NoDuplicatesAndValidIndices) {
    Rng rng(3);
    const auto in = random_coords(rng, 120, 10);
    const auto out = random_coords(rng, 80, 10);
    const KernelMap km = build_kernel_map(in, out, 3);
    std::set<KernelMap::Triple> uniq(km.triples.begin(), km.triples.end());
    EXPECT_EQ(uniq.size(), km.triples.size());
    for (const auto& t : km.triples) {
        EXPECT_GE(t.offset_idx, 0);
        EXPECT_LT(t.offset_idx, 27);
        EXPECT_LT(t.in_idx, static_cast<int32_t>(in.size()));
        EXPECT_LT(t.out_idx, static_cast<int32_t>(out.size()));
    }
}

TEST(KernelMap, DeterministicAcrossWorkerCounts) {
    Rng rng(4);
    const auto in = random_coords(rng, 400, 12);
    setenv("SPARSEDET3D_THREADS", "1", 1);
    const KernelMap a = build_kernel_map(in, in, 3);
    setenv("SPARSEDET3D_THREADS", "4", 1);
    const KernelMap b = build_kernel_map(in, in, 3);
    unsetenv("SPARSEDET3D_THREADS");
    EXPECT_EQ(a.triples, b.triples);
}

TEST(KernelMap, DropEmptyOutputs) {
    const std::vector<Coord3> in{{0, 0, 0}};
    const std::vector<Coord3> out{{10, 10, 10}, {0, 0, 1}, {20, 0, 0}};
    KernelMap km = build_kernel_map(in, out, 3);
    const auto kept = drop_empty_outputs(km);
    EXPECT_EQ(kept, (std::vector<int32_t>{1}));
    ASSERT_EQ(km.triples.size(), 1u);
    EXPECT_EQ(km.triples[0].out_idx, 0);
    EXPECT_EQ(km.n_out, 1);
}

TEST(SparseConv, IdentityKernel) {
    SparseTensor<double> x;
    x.coords = {{3, 4, 5}};
    x.feats.resize(1, 4);
    x.feats << 1, -2, 3.5, 0.25;
    ConvWeights<double> w(1, 4, 4, false);
    w.kernel.setIdentity();
    const auto y = sparse_conv_forward(x, w, x.coords, 1);
    ASSERT_EQ(y.size(), 1u);
    EXPECT_EQ(y.feats, x.feats);
}

TEST(SparseConv, DropEmptyRemovesIsolatedQuery) {
    Rng rng(5);
    SparseTensor<double> x;
    x.coords = {{0, 0, 0}, {1, 0, 0}};
    x.feats = random_feats<double>(rng, 2, 3);
    const auto w = random_weights(rng, 3, 3, 2, true);
    const std::vector<Coord3> q{{0, 0, 0}, {9, 9, 9}};
    ConvOptions drop;
    drop.drop_empty = true;
    const auto dropped = sparse_conv_forward(x, w, q, 3, drop);
    ASSERT_EQ(dropped.size(), 1u);
    EXPECT_EQ(dropped.coords[0], (Coord3{0, 0, 0}));
    const auto kept = sparse_conv_forward(x, w, q, 3);
    ASSERT_EQ(kept.size(), 2u);
    EXPECT_EQ(kept.feats.row(1), w.bias);
}

TEST(SparseConv, MatchesDenseOracle) {
    Rng rng(6);
    SparseTensor<double> x;
    for (int a = 0; a < 8; ++a)
        for (int b = 0; b < 8; ++b)
            for (int c = 0; c < 8; ++c)
                if (rng.uniform() < 0.3) x.coords.push_back({a, b, c});
    x.feats = random_feats<double>(rng, static_cast<Eigen::Index>(x.size()), 4);
    const auto w = random_weights(rng, 3, 4, 5, true);
    const auto y = sparse_conv_forward(x, w, x.coords, 3);
    const auto ref = oracle::dense_conv<double>(x.coords, x.feats, x.coords, w.kernel, w.bias, 3, 1);
    const double err = oracle::rel_err(std::span<const double>(y.feats.data(), y.feats.size()),
                                       std::span<const double>(ref.data(), ref.size()));
    EXPECT_LE(err, 1e-6);
}

TEST(SparseConv, ChannelMismatchAndNonFinite) {
    SparseTensor<double> x;
    x.coords = {{0, 0, 0}};
    x.feats = FeatureMatrix<double>::Ones(1, 3);
    ConvWeights<double> w(1, 2, 2, false);
    w.kernel.setOnes();
    EXPECT_THROW(sparse_conv_forward(x, w, x.coords, 1), std::invalid_argument);
    ConvWeights<double> bad(1, 3, 2, false);
    bad.kernel.setOnes();
    bad.kernel(0, 0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(sparse_conv_forward(x, bad, x.coords, 1), std::invalid_argument);
}

TEST(SparseConv, Linearity) {
    Rng rng(7);
    SparseTensor<double> x, y;
    x.coords = y.coords = random_coords(rng, 60, 6);
    x.feats = random_feats<double>(rng, 60, 3);
    y.feats = random_feats<double>(rng, 60, 3);
    const auto w = random_weights(rng, 3, 3, 4, false);
    const double a = rng.uniform(-2, 2);
    const double b = rng.uniform(-2, 2);
    SparseTensor<double> z = x;
    z.feats = a * x.feats + b * y.feats;
    const auto fz = sparse_conv_forward(z, w, x.coords, 3).feats;
    const FeatureMatrix<double> lin =
        a * sparse_conv_forward(x, w, x.coords, 3).feats + b * sparse_conv_forward(y, w, x.coords, 3).feats;
    EXPECT_LE((fz - lin).cwiseAbs().maxCoeff() / lin.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SparseConv, TranslationEquivariance) {
    Rng rng(8);
    SparseTensor<double> x;
    x.coords = random_coords(rng, 80, 8);
    x.feats = random_feats<double>(rng, 80, 3);
    const auto w = random_weights(rng, 3, 3, 3, true);
    SparseTensor<double> s = x;
    const Coord3 shift{-37, 101, 5};
    for (Coord3& c : s.coords) c = c + shift;
    const auto a = sparse_conv_forward(x, w, x.coords, 3);
    const auto b = sparse_conv_forward(s, w, s.coords, 3);
    EXPECT_LE((a.feats - b.feats).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SparseConvBackward, ZeroAndIdentity) {
    Rng rng(9);
    SparseTensor<double> x;
    x.coords = random_coords(rng, 20, 5);
    x.feats = random_feats<double>(rng, 20, 3);
    const auto w = random_weights(rng, 3, 3, 2, true);
    const auto res = sparse_conv_forward_plan(x, w, x.coords, 1);
    const auto g0 = sparse_conv_backward(x, w, res.kmap, FeatureMatrix<double>(FeatureMatrix<double>::Zero(20, 2)));
    EXPECT_EQ(g0.grad_input.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(g0.grad_weights.kernel.cwiseAbs().maxCoeff(), 0.0);

    ConvWeights<double> id(1, 3, 3, false);
    id.kernel.setIdentity();
    const auto r1 = sparse_conv_forward_plan(x, id, x.coords, 1);
    const FeatureMatrix<double> go = random_feats<double>(rng, 20, 3);
    const auto g1 = sparse_conv_backward(x, id, r1.kmap, go);
    EXPECT_EQ(g1.grad_input, go);
}

TEST(SparseConvBackward, FiniteDifferences) {
    Rng rng(10);
    SparseTensor<double> x;
    x.coords = random_coords(rng, 30, 5);
    x.feats = random_feats<double>(rng, 30, 2);
    auto w = random_weights(rng, 3, 2, 2, true);
    const auto res = sparse_conv_forward_plan(x, w, x.coords, 1);
    const auto g = sparse_conv_backward(x, w, res.kmap, FeatureMatrix<double>(FeatureMatrix<double>::Ones(30, 2)));

    auto loss_in = [&](const std::vector<double>& v) {
        SparseTensor<double> xx = x;
        std::copy(v.begin(), v.end(), xx.feats.data());
        return sparse_conv_forward(xx, w, x.coords, 3).feats.sum();
    };
    std::vector<double> v(x.feats.data(), x.feats.data() + x.feats.size());
    const auto fd_in = oracle::central_diff(loss_in, v, 1e-6);
    EXPECT_LE(oracle::rel_err(std::span<const double>(g.grad_input.data(), g.grad_input.size()), fd_in), 1e-5);

    auto loss_w = [&](const std::vector<double>& k) {
        auto ww = w;
        std::copy(k.begin(), k.end(), ww.kernel.data());
        return sparse_conv_forward(x, ww, x.coords, 3).feats.sum();
    };
    std::vector<double> k(w.kernel.data(), w.kernel.data() + w.kernel.size());
    const auto fd_w = oracle::central_diff(loss_w, k, 1e-6);
    EXPECT_LE(oracle::rel_err(std::span<const double>(g.grad_weights.kernel.data(), g.grad_weights.kernel.size()),
                              fd_w),
              1e-5);
}

TEST(Downsample, Examples) {
    EXPECT_EQ(strided_downsample_coords(std::vector<Coord3>{{0, 0, 0}}, 2), (std::vector<Coord3>{{0, 0, 0}}));
    EXPECT_EQ(strided_downsample_coords(std::vector<Coord3>{{0, 0, 0}, {1, 0, 0}}, 2),
              (std::vector<Coord3>{{0, 0, 0}}));
    EXPECT_EQ(strided_downsample_coords(std::vector<Coord3>{{-1, 3, 0}}, 2), (std::vector<Coord3>{{-2, 2, 0}}));
}

TEST(Downsample, MatchesSetOracle) {
    Rng rng(11);
    for (int rep = 0; rep < 10; ++rep) {
        auto coords = random_coords(rng, 100, 20);
        for (Coord3& c : coords) c = c - Coord3{10, 10, 10};
        for (int f : {2, 4, 8}) {
            auto got = strided_downsample_coords(coords, f);
            std::sort(got.begin(), got.end());
            EXPECT_EQ(got, oracle::brute_downsample(coords, f));
        }
    }
}

TEST(Upsample, CopyAndZero) {
    SparseTensor<double> low;
    low.stride = 2;
    low.coords = {{0, 0, 0}};
    low.feats.resize(1, 2);
    low.feats << 3, 4;
    const std::vector<Coord3> t{{0, 0, 0}, {1, 1, 1}, {2, 0, 0}};
    const auto up = upsample_interpolate(low, t, 1);
    EXPECT_EQ(up.feats.row(0), low.feats.row(0));
    EXPECT_EQ(up.feats.row(1), low.feats.row(0));
    EXPECT_EQ(up.feats.row(2).cwiseAbs().sum(), 0.0);
    EXPECT_THROW(upsample_interpolate(low, t, 3), std::invalid_argument);
}

TEST(Upsample, MatchesParentOracle) {
    Rng rng(12);
    auto coords = random_coords(rng, 150, 16);
    SparseTensor<double> low;
    low.stride = 4;
    for (const Coord3& c : oracle::brute_downsample(coords, 4)) {
        if (rng.uniform() < 0.6) low.coords.push_back(c);
    }
    low.feats = random_feats<double>(rng, static_cast<Eigen::Index>(low.size()), 2);
    std::vector<int32_t> parents;
    const auto up = upsample_interpolate(low, coords, 1, &parents);
    EXPECT_EQ(parents, oracle::brute_parent(low.coords, 4, coords));
}

TEST(SparseTensor, ValidateInvariants) {
    SparseTensor<double> x;
    x.coords = {{0, 0, 0}, {2, 0, 0}};
    x.stride = 2;
    x.feats = FeatureMatrix<double>::Zero(2, 1);
    EXPECT_NO_THROW(x.validate());
    x.coords[1] = {1, 0, 0};
    EXPECT_THROW(x.validate(), std::invalid_argument);
    x.coords[1] = {0, 0, 0};
    EXPECT_THROW(x.validate(), std::invalid_argument);
    x.coords[1] = {2, 0, 0};
    x.feats = FeatureMatrix<double>::Zero(3, 1);
    EXPECT_THROW(x.validate(), std::invalid_argument);
}

TEST(Oracles, KernelMapSuite) { EXPECT_TRUE(oracle::suite_kernel_map(13, 20).passed); }
TEST(Oracles, DenseSuiteF32) { EXPECT_TRUE(oracle::suite_sparse_vs_dense(oracle::Precision::f32, 14, 9, 1e-4).passed); }
