// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sparsedet3d/geometry.hpp"
#include "sparsedet3d/losses.hpp"
#include "sparsedet3d/voxelizer.hpp"

namespace sparsedet3d {

struct GtBox {
    Box3D box;
    int class_id = 0;
};

/// Per-voxel supervision. class_id is -1 for background; center_offset is
/// meaningful only for foreground voxels.
struct VoxelTargets {
    std::vector<int> class_id;
    std::vector<Vec3> center_offset;
    std::vector<int> box_id;

    size_t size() const { return class_id.size(); }
};

/// Minimum-volume containing box per point (ties go to the lower index).
VoxelTargets assign_targets(std::span<const Vec3> centers, std::span<const GtBox> gt);

template <class T>
VoxelTargets assign_targets(const SparseTensor<T>& voxels, std::span<const GtBox> gt) {
    std::vector<Vec3> centers(voxels.size());
    for (size_t i = 0; i < voxels.size(); ++i) centers[i] = voxels.center(i);
    return assign_targets(centers, gt);
}

enum class DatasetPreset { scannet, sunrgbd };

DatasetPreset parse_dataset_preset(const std::string& name);
std::string to_string(DatasetPreset p);

/// Grouping threshold: 0.15 lowered by 0.02 every 10 (scannet) or 4
/// (sunrgbd) epochs, never below 0.05.
double tau_schedule(int epoch, DatasetPreset preset);

struct TauSchedule {
    double initial = 0.15;
    double step = 0.02;
    int interval_epochs = 10;
    double floor = 0.05;

    static TauSchedule preset(DatasetPreset p);
    double at(int epoch) const;
};

/// Votes of one class slice re-voxelized on that class's grid, together
/// with the submanifold kernel map used for aggregation.
struct ClassGroup {
    int class_id = 0;
    std::vector<int32_t> members;       // vote indices with s^j > tau
    std::vector<int32_t> member_voxel;  // per member, row in `coords`
    std::vector<Coord3> coords;         // class-grid cells, first appearance order
    Vec3 cell{};                        // alpha * d_j
    std::shared_ptr<const KernelMap> kmap;

    size_t size() const { return coords.size(); }
    /// Metric center of class-grid cell `i`.
    Vec3 center(size_t i) const;
};

/// Slices votes per class by s^j > tau and quantizes each slice at
/// alpha * d_j. Empty slices produce empty groups.
std::vector<ClassGroup> slice_and_revoxelize(const PositionMatrix& votes, const Matrix& scores, double tau,
                                             double alpha, const ClassSizeTable& sizes, int kernel_size);

/// Per-class aggregation convolutions (k^3 * C) x C' plus bias.
struct GroupingWeights {
    std::vector<ConvWeights<double>> per_class;
};

/// Slice, re-voxelize (feature average) and aggregate with the
/// class-specific submanifold convolution followed by ReLU.
std::vector<SparseTensor<double>> class_aware_group(const PointCloud& votes, const Matrix& scores, double tau,
                                                    double alpha, const ClassSizeTable& sizes, int kernel_size,
                                                    const GroupingWeights& weights);

/// Fully connected layer x W + b applied row-wise.
struct Dense {
    Matrix weight;  // C_in x C_out
    Matrix bias;    // 1 x C_out

    Dense() = default;
    Dense(Eigen::Index in, Eigen::Index out) : weight(Matrix::Zero(in, out)), bias(Matrix::Zero(1, out)) {}
    Matrix apply(const Matrix& x) const;
};

/// Single-hidden-layer vote perceptron: C -> hidden -> 3 + C.
struct VoteParams {
    Dense fc1;
    Dense fc2;
};

struct VoteOutput {
    Matrix dx;         // N x 3 metric shift
    Matrix df;         // N x C feature shift
    PointCloud votes;  // voxel center + dx, feature + df
};

/// Votes of every voxel of `feats` (metric centers from its stride and
/// voxel size).
VoteOutput vote_forward(const SparseTensor<double>& feats, const VoteParams& params);

/// Element-wise sigmoid of one linear layer: N x num_classes scores.
Matrix semantic_forward(const SparseTensor<double>& feats, const Dense& params);

struct Proposal {
    Box3D box;
    double score = 0.0;
    int class_id = 0;
    double centerness = 0.0;
};

/// Log-scale regression outputs are clamped to this magnitude before decoding.
inline constexpr double kMaxLogScale = 4.0;

/// Where one head row came from: its class tensor, cell center, grid cell
/// and class prior d_j.
struct HeadRow {
    int class_id = 0;
    Vec3 center{};
    Vec3 cell{};
    Vec3 prior{};
};

/// Decodes head outputs: box from the stage-I code, score =
/// sigmoid(cls[class]) * sigmoid(centerness).
std::vector<Proposal> decode_proposals(const Matrix& cls_logits, const Matrix& reg, const Matrix& cntr_logits,
                                       std::span<const HeadRow> rows);

/// Shared 1^3 heads over all class tensors.
struct HeadParams {
    Dense cls;   // C -> num_classes
    Dense reg;   // C -> 8
    Dense cntr;  // C -> 1
};

/// Runs the heads on every voxel of every class tensor (tensor j is class
/// j; its voxel_size is the class cell) and decodes one proposal per voxel.
std::vector<Proposal> proposal_head(const std::vector<SparseTensor<double>>& class_tensors, const HeadParams& params,
                                    const ClassSizeTable& sizes);

/// Drops scores below score_min, keeps the best max_candidates (0 = all)
/// and runs greedy class-agnostic suppression under rotated IoU. The result
/// is sorted by descending score; ties keep input order.
std::vector<Proposal> filter_nms(std::vector<Proposal> proposals, double score_min, double iou_thresh,
                                 size_t max_candidates = 0);

}  // namespace sparsedet3d
