// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>

#include "sparsedet3d/oracle.hpp"

namespace sparsedet3d::oracle {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) { return std::chrono::duration<double, std::milli>(Clock::now() - t0).count(); }

template <class T>
BenchRow bench_one(Rng& rng, int grid, double occupancy, int k, int channels) {
    BenchRow row;
    row.grid = grid;
    row.occupancy = occupancy;
    row.kernel = k;
    row.channels = channels;

    SparseTensor<T> x;
    for (int a = 0; a < grid; ++a) {
        for (int b = 0; b < grid; ++b) {
            for (int c = 0; c < grid; ++c) {
                if (occupancy >= 1.0 || rng.uniform() < occupancy) x.coords.push_back({a, b, c});
            }
        }
    }
    if (x.coords.empty()) x.coords.push_back({0, 0, 0});
    const auto n = static_cast<Eigen::Index>(x.coords.size());
    x.feats.resize(n, channels);
    for (Eigen::Index i = 0; i < x.feats.size(); ++i) x.feats.data()[i] = static_cast<T>(rng.uniform(-1, 1));
    ConvWeights<T> w(k, channels, channels, true);
    for (Eigen::Index i = 0; i < w.kernel.size(); ++i) w.kernel.data()[i] = static_cast<T>(rng.uniform(-1, 1));
    for (Eigen::Index i = 0; i < w.bias.size(); ++i) w.bias.data()[i] = static_cast<T>(rng.uniform(-1, 1));
    row.voxels = x.coords.size();

    // Best of three runs for the timed parts.
    row.kmap_ms = 1e300;
    row.conv_ms = 1e300;
    for (int rep = 0; rep < 3; ++rep) {
        auto t0 = Clock::now();
        const KernelMap km = build_kernel_map(x.coords, x.coords, k);
        row.kmap_ms = std::min(row.kmap_ms, ms_since(t0));
        row.triples = km.triples.size();
        t0 = Clock::now();
        FeatureMatrix<T> out(n, channels);
        out.rowwise() = w.bias;
        apply_kernel_map(km, x.feats, w, out);
        row.conv_ms = std::min(row.conv_ms, ms_since(t0));
    }
    const SparseTensor<T> y = sparse_conv_forward(x, w, x.coords, k);
    row.gflops = 2.0 * static_cast<double>(row.triples) * channels * channels / (row.conv_ms * 1e6);

    const auto t0 = Clock::now();
    const FeatureMatrix<double> ref = dense_conv<double>(x.coords, x.feats.template cast<double>(), x.coords,
                                                         w.kernel.template cast<double>(),
                                                         w.bias.template cast<double>(), k, 1);
    row.dense_ms = ms_since(t0);
    const FeatureMatrix<double> got = y.feats.template cast<double>();
    row.max_rel_err = rel_err(std::span<const double>(got.data(), static_cast<size_t>(got.size())),
                              std::span<const double>(ref.data(), static_cast<size_t>(ref.size())));
    row.matches_dense = row.max_rel_err <= (std::is_same_v<T, float> ? 1e-4 : 1e-6);
    return row;
}

}  // namespace

std::vector<BenchRow> run_bench(Precision p, int grid, const std::vector<double>& occupancies,
                                const std::vector<int>& kernels, int channels, uint64_t seed) {
    Rng rng(seed);
    std::vector<BenchRow> rows;
    for (double occ : occupancies) {
        for (int k : kernels) {
            rows.push_back(p == Precision::f32 ? bench_one<float>(rng, grid, occ, k, channels)
                                               : bench_one<double>(rng, grid, occ, k, channels));
        }
    }
    return rows;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
    os << "grid,occupancy,kernel,channels,voxels,triples,kmap_ms,conv_ms,dense_ms,gflops,max_rel_err,matches_dense\n";
    for (const BenchRow& r : rows) {
        os << r.grid << ',' << r.occupancy << ',' << r.kernel << ',' << r.channels << ',' << r.voxels << ','
           << r.triples << ',' << r.kmap_ms << ',' << r.conv_ms << ',' << r.dense_ms << ',' << r.gflops << ','
           << r.max_rel_err << ',' << (r.matches_dense ? 1 : 0) << '\n';
    }
}

}  // namespace sparsedet3d::oracle
