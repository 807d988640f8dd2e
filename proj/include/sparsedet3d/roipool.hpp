// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <memory>
#include <span>
#include <vector>

#include "sparsedet3d/geometry.hpp"
#include "sparsedet3d/losses.hpp"
#include "sparsedet3d/proposal.hpp"
#include "sparsedet3d/sparse_tensor.hpp"

namespace sparsedet3d {

struct GridOwner {
    int32_t proposal = 0;
    Vec3 position{};  // metric grid point before quantization
};

/// Grid points of all proposals, quantized and merged.
struct GridSample {
    std::vector<Coord3> points;
    std::vector<std::vector<GridOwner>> owners;
    int stride = 1;
    Vec3 voxel_size{1.0, 1.0, 1.0};

    size_t size() const { return points.size(); }
};

/// Metric grid point (i, j, k) of `box` under the cell-center convention.
Vec3 roi_grid_point(const Box3D& box, const std::array<int, 3>& res, int i, int j, int k);

/// G_x * G_y * G_z points per proposal at fractions (2i+1)/(2G) of each box
/// axis, floor-quantized to the stride lattice; repeated points are merged
/// and their owner lists concatenated in proposal order.
GridSample sample_roi_grid(std::span<const Box3D> proposals, const std::array<int, 3>& resolution,
                           const Vec3& voxel_size, int stride = 1);

/// Subtracts the box center and rotates by -theta about z.
std::vector<Vec3> canonical_transform(std::span<const Vec3> points, const Box3D& box);

struct RoiConfig {
    std::array<int, 3> grid1{7, 7, 7};
    int kernel1 = 5;
    std::array<int, 3> grid2{1, 1, 1};
    int kernel2 = 7;

    void validate() const;
};

/// Gather-scatter plans of the two pooling blocks.
///
/// Block 1 convolves the backbone voxels onto the merged grid points
/// (rows without neighbors dropped). Block 2 maps every surviving grid
/// point to each owning proposal: the owner's grid position, expressed in
/// the proposal's canonical frame, selects the kernel cell on a lattice of
/// dims / kernel2, so one output row per proposal is produced.
struct RoiPlan {
    GridSample grid;
    std::shared_ptr<const KernelMap> block1;  // backbone rows -> kept grid rows
    std::vector<int32_t> kept;                // kept grid row -> grid point
    std::shared_ptr<const KernelMap> block2;  // kept grid rows -> proposals
    std::vector<char> hollow;                 // per proposal

    size_t proposals() const { return hollow.size(); }
};

RoiPlan plan_roi_pooling(std::span<const Coord3> coords, int stride, const Vec3& voxel_size,
                         std::span<const Box3D> proposals, const RoiConfig& cfg);

/// One Eq.-6 block: sample, convolve centered on each point with shared
/// weights, drop points without neighbors. `grid` receives the sample.
ConvResult<double> sparse_abstraction(const SparseTensor<double>& input, std::span<const Box3D> proposals,
                                      const std::array<int, 3>& resolution, const ConvWeights<double>& weights,
                                      GridSample* grid = nullptr);

struct RoiWeights {
    ConvWeights<double> block1;  // kernel1, C -> C1
    ConvWeights<double> block2;  // kernel2, C1 -> C2
};

struct RoiFeature {
    Matrix feats;              // one row per proposal
    std::vector<char> hollow;  // zero row, no pooled voxels
};

/// Two-block pooling with ReLU after each block.
RoiFeature roiconv_pool(const SparseTensor<double>& backbone, std::span<const Box3D> proposals,
                        const RoiConfig& cfg, const RoiWeights& weights);

/// Two-layer perceptron C -> hidden -> 8 predicting the residual t.
struct RefineParams {
    Dense fc1;
    Dense fc2;
};

struct Refinement {
    Matrix residual;          // one row of t per proposal
    std::vector<Box3D> boxes;  // decoded boxes
};

/// Boxes from predicted residual rows; log scales are clamped to
/// kMaxLogScale before decoding.
std::vector<Box3D> decode_refinement(const Matrix& residual, std::span<const Box3D> proposals);

Refinement refine_head(const RoiFeature& roi, std::span<const Box3D> proposals, const RefineParams& params);

/// Proposals whose best IoU against any ground-truth box exceeds iou_min,
/// best first (ties by index), at most `cap` of them.
struct Selection {
    std::vector<int32_t> proposal;
    std::vector<int32_t> gt;
    std::vector<double> iou;

    size_t size() const { return proposal.size(); }
};

Selection select_training_proposals(std::span<const Box3D> proposals, std::span<const Box3D> gt,
                                    double iou_min = 0.3, size_t cap = 128);

}  // namespace sparsedet3d
