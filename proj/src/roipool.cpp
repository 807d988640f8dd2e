// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/roipool.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace sparsedet3d {
namespace {

void require_resolution(const std::array<int, 3>& res) {
    for (int g : res) {
        if (g < 1) throw std::invalid_argument("sample_roi_grid: resolution components must be >= 1");
    }
}

}  // namespace

Vec3 roi_grid_point(const Box3D& box, const std::array<int, 3>& res, int i, int j, int k) {
    const Vec3 q{((2.0 * i + 1.0) / (2.0 * res[0]) - 0.5) * box.w, ((2.0 * j + 1.0) / (2.0 * res[1]) - 0.5) * box.l,
                 ((2.0 * k + 1.0) / (2.0 * res[2]) - 0.5) * box.h};
    return from_canonical(q, box);
}

GridSample sample_roi_grid(std::span<const Box3D> proposals, const std::array<int, 3>& resolution,
                           const Vec3& voxel_size, int stride) {
    require_resolution(resolution);
    if (stride < 1) throw std::invalid_argument("sample_roi_grid: stride must be positive");
    for (double s : voxel_size) {
        if (!(s > 0.0)) throw std::invalid_argument("sample_roi_grid: voxel size must be positive");
    }
    GridSample g;
    g.stride = stride;
    g.voxel_size = voxel_size;
    CoordIndex index;
    for (size_t m = 0; m < proposals.size(); ++m) {
        const Box3D& b = proposals[m];
        for (int i = 0; i < resolution[0]; ++i) {
            for (int j = 0; j < resolution[1]; ++j) {
                for (int k = 0; k < resolution[2]; ++k) {
                    const Vec3 p = roi_grid_point(b, resolution, i, j, k);
                    Coord3 c{};
                    for (int a = 0; a < 3; ++a) {
                        const auto cell = static_cast<int32_t>(std::floor(p[a] / voxel_size[a]));
                        (&c.x)[a] = floor_div(cell, stride) * stride;
                    }
                    const auto [row, inserted] = index.insert(c, static_cast<int32_t>(g.points.size()));
                    if (inserted) {
                        g.points.push_back(c);
                        g.owners.emplace_back();
                    }
                    g.owners[static_cast<size_t>(row)].push_back({static_cast<int32_t>(m), p});
                }
            }
        }
    }
    return g;
}

std::vector<Vec3> canonical_transform(std::span<const Vec3> points, const Box3D& box) {
    std::vector<Vec3> out;
    out.reserve(points.size());
    for (const Vec3& p : points) out.push_back(to_canonical(p, box));
    return out;
}

void RoiConfig::validate() const {
    require_resolution(grid1);
    require_resolution(grid2);
    if (grid2 != std::array<int, 3>{1, 1, 1}) {
        throw std::invalid_argument("RoiConfig: the last pooling block must use a 1x1x1 grid");
    }
    for (int k : {kernel1, kernel2}) {
        if (k < 1 || k % 2 == 0) throw std::invalid_argument("RoiConfig: kernel sizes must be odd and positive");
    }
}

RoiPlan plan_roi_pooling(std::span<const Coord3> coords, int stride, const Vec3& voxel_size,
                         std::span<const Box3D> proposals, const RoiConfig& cfg) {
    cfg.validate();
    RoiPlan plan;
    plan.grid = sample_roi_grid(proposals, cfg.grid1, voxel_size, stride);

    auto k1 = std::make_shared<KernelMap>(build_kernel_map(coords, plan.grid.points, cfg.kernel1, stride));
    plan.kept = drop_empty_outputs(*k1);
    plan.block1 = k1;

    auto k2 = std::make_shared<KernelMap>();
    k2->kernel_size = cfg.kernel2;
    k2->n_offsets = cfg.kernel2 * cfg.kernel2 * cfg.kernel2;
    k2->n_in = static_cast<int64_t>(plan.kept.size());
    k2->n_out = static_cast<int64_t>(proposals.size());
    const int r = cfg.kernel2 / 2;
    plan.hollow.assign(proposals.size(), 1);
    for (size_t row = 0; row < plan.kept.size(); ++row) {
        for (const GridOwner& o : plan.grid.owners[static_cast<size_t>(plan.kept[row])]) {
            const Box3D& b = proposals[static_cast<size_t>(o.proposal)];
            const Vec3 q = to_canonical(o.position, b);
            const std::array<double, 3> dims{b.w, b.l, b.h};
            int cell[3];
            for (int a = 0; a < 3; ++a) {
                const double u = q[a] / (dims[a] / cfg.kernel2);
                cell[a] = std::clamp(static_cast<int>(std::floor(u + 0.5)), -r, r);
            }
            const int d = offset_index({cell[0], cell[1], cell[2]}, cfg.kernel2);
            k2->triples.push_back({static_cast<int32_t>(row), o.proposal, d});
            plan.hollow[static_cast<size_t>(o.proposal)] = 0;
        }
    }
    // Two grid points of one proposal can share both a voxel and a cell.
    std::sort(k2->triples.begin(), k2->triples.end());
    k2->triples.erase(std::unique(k2->triples.begin(), k2->triples.end()), k2->triples.end());
    k2->finalize();
    plan.block2 = k2;
    return plan;
}

ConvResult<double> sparse_abstraction(const SparseTensor<double>& input, std::span<const Box3D> proposals,
                                      const std::array<int, 3>& resolution, const ConvWeights<double>& weights,
                                      GridSample* grid) {
    GridSample g = sample_roi_grid(proposals, resolution, input.voxel_size, input.stride);
    ConvOptions opts;
    opts.drop_empty = true;
    ConvResult<double> res = sparse_conv_forward_plan(input, weights, g.points, input.stride, opts);
    if (grid) *grid = std::move(g);
    return res;
}

RoiFeature roiconv_pool(const SparseTensor<double>& backbone, std::span<const Box3D> proposals,
                        const RoiConfig& cfg, const RoiWeights& weights) {
    if (proposals.empty()) throw std::invalid_argument("roiconv_pool: no proposals");
    weights.block1.validate();
    weights.block2.validate();
    if (weights.block1.kernel_size != cfg.kernel1 || weights.block2.kernel_size != cfg.kernel2) {
        throw std::invalid_argument("roiconv_pool: weight kernel sizes disagree with config");
    }
    if (backbone.channels() != weights.block1.in_channels ||
        weights.block1.out_channels != weights.block2.in_channels) {
        throw std::invalid_argument("roiconv_pool: channel mismatch");
    }
    const RoiPlan plan = plan_roi_pooling(backbone.coords, backbone.stride, backbone.voxel_size, proposals, cfg);

    Matrix q1 = Matrix::Zero(static_cast<Eigen::Index>(plan.kept.size()), weights.block1.out_channels);
    if (weights.block1.has_bias()) q1.rowwise() += weights.block1.bias;
    contract_kernel_map(*plan.block1, backbone.feats, weights.block1.kernel, q1);
    q1 = q1.cwiseMax(0.0);

    RoiFeature out;
    out.hollow = plan.hollow;
    out.feats = Matrix::Zero(static_cast<Eigen::Index>(proposals.size()), weights.block2.out_channels);
    if (weights.block2.has_bias()) out.feats.rowwise() += weights.block2.bias;
    contract_kernel_map(*plan.block2, q1, weights.block2.kernel, out.feats);
    out.feats = out.feats.cwiseMax(0.0);
    for (size_t m = 0; m < proposals.size(); ++m) {
        if (plan.hollow[m]) out.feats.row(static_cast<Eigen::Index>(m)).setZero();
    }
    return out;
}

std::vector<Box3D> decode_refinement(const Matrix& residual, std::span<const Box3D> proposals) {
    if (residual.rows() != static_cast<Eigen::Index>(proposals.size()) || residual.cols() != 8) {
        throw std::invalid_argument("refine_head: residual shape mismatch");
    }
    std::vector<Box3D> out;
    out.reserve(proposals.size());
    for (size_t m = 0; m < proposals.size(); ++m) {
        Residual r;
        for (int q = 0; q < 8; ++q) r[q] = residual(static_cast<Eigen::Index>(m), q);
        for (int q = 3; q < 6; ++q) r[q] = std::clamp(r[q], -kMaxLogScale, kMaxLogScale);
        out.push_back(decode_residual(r, proposals[m]));
    }
    return out;
}

Refinement refine_head(const RoiFeature& roi, std::span<const Box3D> proposals, const RefineParams& params) {
    if (roi.feats.rows() != static_cast<Eigen::Index>(proposals.size())) {
        throw std::invalid_argument("refine_head: need one feature row per proposal");
    }
    Refinement out;
    out.residual = params.fc2.apply(params.fc1.apply(roi.feats).cwiseMax(0.0));
    out.boxes = decode_refinement(out.residual, proposals);
    return out;
}

Selection select_training_proposals(std::span<const Box3D> proposals, std::span<const Box3D> gt, double iou_min,
                                    size_t cap) {
    struct Cand {
        int32_t p;
        int32_t g;
        double iou;
    };
    std::vector<Cand> cands;
    for (size_t p = 0; p < proposals.size(); ++p) {
        int32_t best_g = -1;
        double best = 0.0;
        for (size_t g = 0; g < gt.size(); ++g) {
            const double v = iou3d(proposals[p], gt[g]);
            if (v > best) {
                best = v;
                best_g = static_cast<int32_t>(g);
            }
        }
        if (best_g >= 0 && best > iou_min) cands.push_back({static_cast<int32_t>(p), best_g, best});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.iou > b.iou; });
    if (cands.size() > cap) cands.resize(cap);
    Selection s;
    for (const Cand& c : cands) {
        s.proposal.push_back(c.p);
        s.gt.push_back(c.g);
        s.iou.push_back(c.iou);
    }
    return s;
}

}  // namespace sparsedet3d
