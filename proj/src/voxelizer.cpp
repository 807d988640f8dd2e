// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/voxelizer.hpp"

#include <cmath>
#include <string>

namespace sparsedet3d {

void PointCloud::validate() const {
    if (!positions.allFinite()) throw std::invalid_argument("PointCloud: non-finite coordinates");
    if (features.size() > 0 && features.rows() != positions.rows()) {
        throw std::invalid_argument("PointCloud: feature rows do not match point count");
    }
}

void ClassSizeTable::validate() const {
    for (size_t j = 0; j < dims.size(); ++j) {
        const ClassSize& d = dims[j];
        if (!(d.w > 0.0 && d.l > 0.0 && d.h > 0.0) || !std::isfinite(d.w * d.l * d.h)) {
            throw std::invalid_argument("ClassSizeTable: class " + std::to_string(j) + " has a non-positive extent");
        }
    }
}

Vec3 ClassSizeTable::cell(size_t j, double alpha) const {
    if (j >= dims.size()) throw std::out_of_range("ClassSizeTable: class id " + std::to_string(j) + " out of range");
    return {alpha * dims[j].w, alpha * dims[j].l, alpha * dims[j].h};
}

Quantization quantize(const PositionMatrix& positions, const Vec3& voxel_size) {
    for (double s : voxel_size) {
        if (!(s > 0.0)) throw std::invalid_argument("voxelize: voxel size must be positive");
    }
    Quantization q;
    q.point_to_voxel.resize(static_cast<size_t>(positions.rows()));
    CoordIndex index;
    for (Eigen::Index i = 0; i < positions.rows(); ++i) {
        const Coord3 c{static_cast<int32_t>(std::floor(positions(i, 0) / voxel_size[0])),
                       static_cast<int32_t>(std::floor(positions(i, 1) / voxel_size[1])),
                       static_cast<int32_t>(std::floor(positions(i, 2) / voxel_size[2]))};
        const auto [row, inserted] = index.insert(c, static_cast<int32_t>(q.coords.size()));
        if (inserted) {
            q.coords.push_back(c);
            q.counts.push_back(0);
        }
        q.point_to_voxel[static_cast<size_t>(i)] = row;
        ++q.counts[static_cast<size_t>(row)];
    }
    return q;
}

SparseTensor<double> voxelize_avg(const PointCloud& cloud, const Vec3& voxel_size) {
    cloud.validate();
    const Quantization q = quantize(cloud.positions, voxel_size);
    const bool has_features = cloud.features.cols() > 0;
    const Eigen::Index channels = has_features ? cloud.features.cols() : 1;

    SparseTensor<double> out;
    out.voxel_size = voxel_size;
    out.stride = 1;
    out.coords = q.coords;
    out.feats = FeatureMatrix<double>::Zero(static_cast<Eigen::Index>(q.coords.size()), channels);
    if (!has_features) {
        out.feats.setOnes();
        return out;
    }
    for (Eigen::Index i = 0; i < cloud.features.rows(); ++i) {
        out.feats.row(q.point_to_voxel[static_cast<size_t>(i)]) += cloud.features.row(i);
    }
    for (Eigen::Index r = 0; r < out.feats.rows(); ++r) out.feats.row(r) /= static_cast<double>(q.counts[r]);
    return out;
}

SparseTensor<double> class_revoxelize(const PointCloud& votes, size_t class_id, const ClassSizeTable& sizes,
                                      double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("class_revoxelize: alpha must be positive");
    sizes.validate();
    return voxelize_avg(votes, sizes.cell(class_id, alpha));
}

}  // namespace sparsedet3d
