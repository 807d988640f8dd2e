// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "sparsedet3d/coord.hpp"

namespace sparsedet3d {

/// Row-major dense feature matrix; one row per voxel.
template <class T>
using FeatureMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Vec3 = std::array<double, 3>;

/// Unique voxel coordinates plus their features.
///
/// Coordinates are in unit cells of `voxel_size` meters and are multiples of
/// `stride`; a voxel at `c` covers [c, c + stride) cells on each axis.
template <class T>
struct SparseTensor {
    std::vector<Coord3> coords;
    FeatureMatrix<T> feats;
    int stride = 1;
    Vec3 voxel_size{1.0, 1.0, 1.0};

    size_t size() const { return coords.size(); }
    Eigen::Index channels() const { return feats.cols(); }

    /// Metric center of row `i`.
    Vec3 center(size_t i) const {
        const Coord3& c = coords[i];
        const double h = 0.5 * stride;
        return {(c.x + h) * voxel_size[0], (c.y + h) * voxel_size[1], (c.z + h) * voxel_size[2]};
    }

    /// Checks the structural invariants; throws std::invalid_argument.
    void validate() const;
};

extern template struct SparseTensor<float>;
extern template struct SparseTensor<double>;

/// Enumerates the k^3 kernel offsets in lexicographic order with z fastest.
std::vector<Coord3> kernel_offsets(int kernel_size);

/// Index of `offset` in kernel_offsets(kernel_size), or -1 if outside.
int offset_index(const Coord3& offset, int kernel_size);

/// Gather-scatter plan for one sparse convolution.
///
/// Triples are grouped by offset index; within an offset bucket they are
/// ordered by output row then input row. `bucket_begin[d]` .. `bucket_begin[d+1]`
/// delimits the triples of offset `d`.
struct KernelMap {
    struct Triple {
        int32_t in_idx;
        int32_t out_idx;
        int32_t offset_idx;
        friend bool operator==(const Triple&, const Triple&) = default;
        friend auto operator<=>(const Triple&, const Triple&) = default;
    };

    std::vector<Triple> triples;
    std::vector<int64_t> bucket_begin;
    int kernel_size = 1;
    int n_offsets = 1;
    int64_t n_in = 0;
    int64_t n_out = 0;

    /// Rebuilds `bucket_begin` after `triples` was filled in arbitrary order.
    void finalize();
};

/// in[i] is linked to out[o] through offset d iff in[i] = out[o] + dilation * offset(d).
KernelMap build_kernel_map(std::span<const Coord3> in_coords, std::span<const Coord3> out_coords,
                           int kernel_size, int dilation = 1);

/// Removes output rows that no triple reaches, renumbering the rest in
/// order; returns the original index of every kept row.
std::vector<int32_t> drop_empty_outputs(KernelMap& kmap);

/// Kernel (k^3, C_in, C_out) stored as a (k^3 * C_in) x C_out matrix, offset
/// blocks stacked vertically; optional bias of width C_out.
template <class T>
struct ConvWeights {
    FeatureMatrix<T> kernel;
    Eigen::Matrix<T, 1, Eigen::Dynamic> bias;  // empty when disabled
    int kernel_size = 1;
    Eigen::Index in_channels = 0;
    Eigen::Index out_channels = 0;

    ConvWeights() = default;
    ConvWeights(int k, Eigen::Index c_in, Eigen::Index c_out, bool with_bias);

    int n_offsets() const { return kernel_size * kernel_size * kernel_size; }
    bool has_bias() const { return bias.size() > 0; }
    auto block(int d) { return kernel.middleRows(d * in_channels, in_channels); }
    auto block(int d) const { return kernel.middleRows(d * in_channels, in_channels); }

    /// Throws if shapes disagree or any entry is non-finite.
    void validate() const;
};

struct ConvOptions {
    /// Drop output rows that no triple reaches instead of keeping them as bias-only rows.
    bool drop_empty = false;
    /// Extra dilation on top of the input stride.
    int dilation = 1;
};

/// Result of a forward pass together with the plan needed for backward.
template <class T>
struct ConvResult {
    SparseTensor<T> output;
    KernelMap kmap;                // out_idx refers to rows of `output`
    std::vector<int32_t> kept;     // output row -> index into requested out_coords
};

/// out[o] += kernel[d]^T in[i] for every triple; `kernel` is (k^3 * C_in) x C_out
/// and `out` must already be sized.
template <class T>
void contract_kernel_map(const KernelMap& kmap, const FeatureMatrix<T>& in, const FeatureMatrix<T>& kernel,
                         FeatureMatrix<T>& out);

/// Accumulates the gradients of contract_kernel_map into whichever of
/// `grad_in` / `grad_kernel` is non-null (both must already be sized).
template <class T>
void contract_kernel_map_backward(const KernelMap& kmap, const FeatureMatrix<T>& in,
                                  const FeatureMatrix<T>& kernel, const FeatureMatrix<T>& grad_out,
                                  FeatureMatrix<T>* grad_in, FeatureMatrix<T>* grad_kernel);

/// Raw contraction out[o] += kernel[d]^T in[i] over kmap; `out` must be sized.
template <class T>
void apply_kernel_map(const KernelMap& kmap, const FeatureMatrix<T>& in, const ConvWeights<T>& w,
                      FeatureMatrix<T>& out);

/// Generalized sparse convolution; neighbors are searched at
/// input.stride * opts.dilation spacing.
template <class T>
ConvResult<T> sparse_conv_forward_plan(const SparseTensor<T>& input, const ConvWeights<T>& weights,
                                       std::span<const Coord3> out_coords, int out_stride,
                                       const ConvOptions& opts = {});

template <class T>
SparseTensor<T> sparse_conv_forward(const SparseTensor<T>& input, const ConvWeights<T>& weights,
                                    std::span<const Coord3> out_coords, int kernel_size,
                                    const ConvOptions& opts = {});

template <class T>
struct ConvGrads {
    FeatureMatrix<T> grad_input;
    ConvWeights<T> grad_weights;
};

/// Exact gradients of the contraction recorded in `kmap`.
template <class T>
ConvGrads<T> sparse_conv_backward(const FeatureMatrix<T>& input_feats, const ConvWeights<T>& weights,
                                  const KernelMap& kmap, const FeatureMatrix<T>& grad_out);

template <class T>
ConvGrads<T> sparse_conv_backward(const SparseTensor<T>& input, const ConvWeights<T>& weights,
                                  const KernelMap& kmap, const FeatureMatrix<T>& grad_out) {
    return sparse_conv_backward(input.feats, weights, kmap, grad_out);
}

/// Unique floor(c / factor) * factor, in order of first appearance.
std::vector<Coord3> strided_downsample_coords(std::span<const Coord3> coords, int factor);

/// Each target receives the feature of its enclosing coarse cell, or zeros.
/// `parent_rows`, if given, receives the low row per target (-1 when empty).
template <class T>
SparseTensor<T> upsample_interpolate(const SparseTensor<T>& low, std::span<const Coord3> target_coords,
                                     int target_stride, std::vector<int32_t>* parent_rows = nullptr);

}  // namespace sparsedet3d
