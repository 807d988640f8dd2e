// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "sparsedet3d/sparse_tensor.hpp"

namespace sparsedet3d {

using PositionMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// N points in meters with an optional N x F feature block (F may be 0).
struct PointCloud {
    PositionMatrix positions;
    FeatureMatrix<double> features;

    size_t size() const { return static_cast<size_t>(positions.rows()); }
    void validate() const;
};

/// Per-class average box extents (w, l, h) in meters.
struct ClassSize {
    double w = 1.0;
    double l = 1.0;
    double h = 1.0;
};

struct ClassSizeTable {
    std::vector<ClassSize> dims;

    size_t size() const { return dims.size(); }
    void validate() const;
    /// Metric grid cell used for class j at scale alpha: alpha * (w, l, h).
    Vec3 cell(size_t j, double alpha) const;
};

/// Point-to-cell assignment produced by floor quantization.
struct Quantization {
    std::vector<Coord3> coords;          // unique, in order of first appearance
    std::vector<int32_t> point_to_voxel;  // per point
    std::vector<int32_t> counts;          // members per voxel
};

Quantization quantize(const PositionMatrix& positions, const Vec3& voxel_size);

/// Average-pools point features into floor(p / voxel_size) cells. A cloud
/// without feature channels gets a single constant 1 channel per voxel.
SparseTensor<double> voxelize_avg(const PointCloud& cloud, const Vec3& voxel_size);

/// Re-voxelizes votes on the grid alpha * d_j of class `class_id`.
SparseTensor<double> class_revoxelize(const PointCloud& votes, size_t class_id, const ClassSizeTable& sizes,
                                      double alpha);

}  // namespace sparsedet3d
