// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <string>

#include "sparsedet3d/parallel.hpp"
#include "sparsedet3d/sparse_tensor.hpp"

namespace sparsedet3d {

namespace {

void require_odd_kernel(int kernel_size) {
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw std::invalid_argument("kernel_size must be odd and positive, got " +
                                    std::to_string(kernel_size));
    }
}

bool multiple_of(const Coord3& c, int s) { return c.x % s == 0 && c.y % s == 0 && c.z % s == 0; }

}  // namespace

template <class T>
void SparseTensor<T>::validate() const {
    if (stride < 1) throw std::invalid_argument("SparseTensor: stride must be positive");
    for (double s : voxel_size) {
        if (!(s > 0.0)) throw std::invalid_argument("SparseTensor: voxel size must be positive");
    }
    if (static_cast<size_t>(feats.rows()) != coords.size()) {
        throw std::invalid_argument("SparseTensor: feature rows (" + std::to_string(feats.rows()) +
                                    ") != coordinate count (" + std::to_string(coords.size()) + ")");
    }
    if (feats.cols() < 1) throw std::invalid_argument("SparseTensor: need at least one channel");
    for (const Coord3& c : coords) {
        if (!multiple_of(c, stride)) throw std::invalid_argument("SparseTensor: coordinate not a multiple of stride");
    }
    require_unique(coords, "SparseTensor");
}

template struct SparseTensor<float>;
template struct SparseTensor<double>;

std::vector<Coord3> kernel_offsets(int kernel_size) {
    require_odd_kernel(kernel_size);
    const int r = (kernel_size - 1) / 2;
    std::vector<Coord3> out;
    out.reserve(static_cast<size_t>(kernel_size) * kernel_size * kernel_size);
    for (int dx = -r; dx <= r; ++dx)
        for (int dy = -r; dy <= r; ++dy)
            for (int dz = -r; dz <= r; ++dz) out.push_back({dx, dy, dz});
    return out;
}

int offset_index(const Coord3& o, int kernel_size) {
    const int r = (kernel_size - 1) / 2;
    if (std::abs(o.x) > r || std::abs(o.y) > r || std::abs(o.z) > r) return -1;
    return ((o.x + r) * kernel_size + (o.y + r)) * kernel_size + (o.z + r);
}

void KernelMap::finalize() {
    std::sort(triples.begin(), triples.end(), [](const Triple& a, const Triple& b) {
        if (a.offset_idx != b.offset_idx) return a.offset_idx < b.offset_idx;
        if (a.out_idx != b.out_idx) return a.out_idx < b.out_idx;
        return a.in_idx < b.in_idx;
    });
    bucket_begin.assign(static_cast<size_t>(n_offsets) + 1, 0);
    for (const Triple& t : triples) ++bucket_begin[static_cast<size_t>(t.offset_idx) + 1];
    for (int d = 0; d < n_offsets; ++d) bucket_begin[d + 1] += bucket_begin[d];
}

KernelMap build_kernel_map(std::span<const Coord3> in_coords, std::span<const Coord3> out_coords,
                           int kernel_size, int dilation) {
    require_odd_kernel(kernel_size);
    if (dilation < 1) throw std::invalid_argument("dilation must be positive");
    require_unique(in_coords, "build_kernel_map input");
    require_unique(out_coords, "build_kernel_map output");

    KernelMap km;
    km.kernel_size = kernel_size;
    km.n_offsets = kernel_size * kernel_size * kernel_size;
    km.n_in = static_cast<int64_t>(in_coords.size());
    km.n_out = static_cast<int64_t>(out_coords.size());

    const CoordIndex index(in_coords);
    std::vector<Coord3> offsets = kernel_offsets(kernel_size);
    for (Coord3& o : offsets) o = o * dilation;

    // Per-chunk buckets keep the merge deterministic.
    const size_t chunks = std::max<size_t>(1, chunk_count(out_coords.size()));
    std::vector<std::vector<std::vector<KernelMap::Triple>>> local(
        chunks, std::vector<std::vector<KernelMap::Triple>>(offsets.size()));
    parallel_chunks(out_coords.size(), [&](size_t b, size_t e, size_t chunk) {
        auto& buckets = local[chunk];
        for (size_t o = b; o < e; ++o) {
            for (size_t d = 0; d < offsets.size(); ++d) {
                const int32_t i = index.find(out_coords[o] + offsets[d]);
                if (i >= 0) {
                    buckets[d].push_back({i, static_cast<int32_t>(o), static_cast<int32_t>(d)});
                }
            }
        }
    });

    km.bucket_begin.assign(offsets.size() + 1, 0);
    for (size_t d = 0; d < offsets.size(); ++d) {
        size_t count = 0;
        for (const auto& c : local) count += c[d].size();
        km.bucket_begin[d + 1] = km.bucket_begin[d] + static_cast<int64_t>(count);
    }
    km.triples.reserve(static_cast<size_t>(km.bucket_begin.back()));
    for (size_t d = 0; d < offsets.size(); ++d) {
        for (const auto& c : local) km.triples.insert(km.triples.end(), c[d].begin(), c[d].end());
    }
    return km;
}

template <class T>
ConvWeights<T>::ConvWeights(int k, Eigen::Index c_in, Eigen::Index c_out, bool with_bias)
    : kernel(FeatureMatrix<T>::Zero(static_cast<Eigen::Index>(k) * k * k * c_in, c_out)),
      kernel_size(k),
      in_channels(c_in),
      out_channels(c_out) {
    require_odd_kernel(k);
    if (with_bias) bias = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(c_out);
}

template <class T>
void ConvWeights<T>::validate() const {
    require_odd_kernel(kernel_size);
    if (kernel.rows() != static_cast<Eigen::Index>(n_offsets()) * in_channels || kernel.cols() != out_channels) {
        throw std::invalid_argument("ConvWeights: kernel shape does not match (k^3*C_in, C_out)");
    }
    if (has_bias() && bias.size() != out_channels) throw std::invalid_argument("ConvWeights: bias width mismatch");
    if (!kernel.allFinite() || (has_bias() && !bias.allFinite())) {
        throw std::invalid_argument("ConvWeights: non-finite weights");
    }
}

template struct ConvWeights<float>;
template struct ConvWeights<double>;

template <class T>
void contract_kernel_map(const KernelMap& kmap, const FeatureMatrix<T>& in, const FeatureMatrix<T>& kernel,
                         FeatureMatrix<T>& out) {
    const Eigen::Index c_in = in.cols();
    FeatureMatrix<T> gathered;
    FeatureMatrix<T> product;
    for (int d = 0; d < kmap.n_offsets; ++d) {
        const int64_t b = kmap.bucket_begin[d];
        const int64_t e = kmap.bucket_begin[d + 1];
        if (b == e) continue;
        const Eigen::Index n = static_cast<Eigen::Index>(e - b);
        gathered.resize(n, c_in);
        for (Eigen::Index r = 0; r < n; ++r) gathered.row(r) = in.row(kmap.triples[b + r].in_idx);
        product.noalias() = gathered * kernel.middleRows(d * c_in, c_in);
        for (Eigen::Index r = 0; r < n; ++r) out.row(kmap.triples[b + r].out_idx) += product.row(r);
    }
}

template <class T>
void contract_kernel_map_backward(const KernelMap& kmap, const FeatureMatrix<T>& in,
                                  const FeatureMatrix<T>& kernel, const FeatureMatrix<T>& grad_out,
                                  FeatureMatrix<T>* grad_in, FeatureMatrix<T>* grad_kernel) {
    const Eigen::Index c_in = in.cols();
    FeatureMatrix<T> xg;
    FeatureMatrix<T> gg;
    FeatureMatrix<T> gi;
    for (int d = 0; d < kmap.n_offsets; ++d) {
        const int64_t b = kmap.bucket_begin[d];
        const int64_t e = kmap.bucket_begin[d + 1];
        if (b == e) continue;
        const Eigen::Index n = static_cast<Eigen::Index>(e - b);
        gg.resize(n, grad_out.cols());
        for (Eigen::Index r = 0; r < n; ++r) gg.row(r) = grad_out.row(kmap.triples[b + r].out_idx);
        if (grad_in) {
            gi.noalias() = gg * kernel.middleRows(d * c_in, c_in).transpose();
            for (Eigen::Index r = 0; r < n; ++r) grad_in->row(kmap.triples[b + r].in_idx) += gi.row(r);
        }
        if (grad_kernel) {
            xg.resize(n, c_in);
            for (Eigen::Index r = 0; r < n; ++r) xg.row(r) = in.row(kmap.triples[b + r].in_idx);
            grad_kernel->middleRows(d * c_in, c_in).noalias() += xg.transpose() * gg;
        }
    }
}

template <class T>
void apply_kernel_map(const KernelMap& kmap, const FeatureMatrix<T>& in, const ConvWeights<T>& w,
                      FeatureMatrix<T>& out) {
    contract_kernel_map(kmap, in, w.kernel, out);
}

std::vector<int32_t> drop_empty_outputs(KernelMap& kmap) {
    std::vector<int32_t> remap(static_cast<size_t>(kmap.n_out), -1);
    std::vector<char> reached(static_cast<size_t>(kmap.n_out), 0);
    for (const auto& t : kmap.triples) reached[t.out_idx] = 1;
    std::vector<int32_t> kept;
    for (size_t o = 0; o < reached.size(); ++o) {
        if (reached[o]) {
            remap[o] = static_cast<int32_t>(kept.size());
            kept.push_back(static_cast<int32_t>(o));
        }
    }
    for (auto& t : kmap.triples) t.out_idx = remap[t.out_idx];
    kmap.n_out = static_cast<int64_t>(kept.size());
    return kept;
}

template <class T>
ConvResult<T> sparse_conv_forward_plan(const SparseTensor<T>& input, const ConvWeights<T>& weights,
                                       std::span<const Coord3> out_coords, int out_stride,
                                       const ConvOptions& opts) {
    weights.validate();
    if (input.channels() != weights.in_channels) {
        throw std::invalid_argument("sparse_conv_forward: input has " + std::to_string(input.channels()) +
                                    " channels, weights expect " + std::to_string(weights.in_channels));
    }
    if (opts.dilation < 1) throw std::invalid_argument("sparse_conv_forward: dilation must be positive");

    ConvResult<T> res;
    res.kmap = build_kernel_map(input.coords, out_coords, weights.kernel_size, input.stride * opts.dilation);

    if (opts.drop_empty) {
        res.kept = drop_empty_outputs(res.kmap);
    } else {
        res.kept.resize(out_coords.size());
        for (size_t o = 0; o < out_coords.size(); ++o) res.kept[o] = static_cast<int32_t>(o);
    }

    SparseTensor<T>& out = res.output;
    out.stride = out_stride;
    out.voxel_size = input.voxel_size;
    out.coords.reserve(res.kept.size());
    for (int32_t o : res.kept) out.coords.push_back(out_coords[o]);
    const Eigen::Index rows = static_cast<Eigen::Index>(res.kept.size());
    out.feats = FeatureMatrix<T>::Zero(rows, weights.out_channels);
    if (weights.has_bias()) out.feats.rowwise() += weights.bias;
    apply_kernel_map(res.kmap, input.feats, weights, out.feats);
    return res;
}

template <class T>
SparseTensor<T> sparse_conv_forward(const SparseTensor<T>& input, const ConvWeights<T>& weights,
                                    std::span<const Coord3> out_coords, int kernel_size,
                                    const ConvOptions& opts) {
    if (kernel_size != weights.kernel_size) {
        throw std::invalid_argument("sparse_conv_forward: kernel_size disagrees with weights");
    }
    return sparse_conv_forward_plan(input, weights, out_coords, input.stride, opts).output;
}

template <class T>
ConvGrads<T> sparse_conv_backward(const FeatureMatrix<T>& input_feats, const ConvWeights<T>& weights,
                                  const KernelMap& kmap, const FeatureMatrix<T>& grad_out) {
    if (input_feats.rows() != kmap.n_in || grad_out.rows() != kmap.n_out) {
        throw std::invalid_argument("sparse_conv_backward: row counts disagree with kernel map");
    }
    if (input_feats.cols() != weights.in_channels || grad_out.cols() != weights.out_channels) {
        throw std::invalid_argument("sparse_conv_backward: channel counts disagree with weights");
    }
    if (kmap.n_offsets != weights.n_offsets()) {
        throw std::invalid_argument("sparse_conv_backward: kernel map built for another kernel size");
    }
    ConvGrads<T> g;
    g.grad_input = FeatureMatrix<T>::Zero(input_feats.rows(), input_feats.cols());
    g.grad_weights = ConvWeights<T>(weights.kernel_size, weights.in_channels, weights.out_channels,
                                    weights.has_bias());
    if (weights.has_bias() && grad_out.rows() > 0) g.grad_weights.bias = grad_out.colwise().sum();

    contract_kernel_map_backward(kmap, input_feats, weights.kernel, grad_out, &g.grad_input,
                                 &g.grad_weights.kernel);
    return g;
}

std::vector<Coord3> strided_downsample_coords(std::span<const Coord3> coords, int factor) {
    if (factor < 2) throw std::invalid_argument("strided_downsample_coords: factor must be >= 2");
    std::vector<Coord3> out;
    CoordIndex seen;
    for (const Coord3& c : coords) {
        const Coord3 p{floor_div(c.x, factor) * factor, floor_div(c.y, factor) * factor,
                       floor_div(c.z, factor) * factor};
        if (seen.insert(p, static_cast<int32_t>(out.size())).second) out.push_back(p);
    }
    return out;
}

template <class T>
SparseTensor<T> upsample_interpolate(const SparseTensor<T>& low, std::span<const Coord3> target_coords,
                                     int target_stride, std::vector<int32_t>* parent_rows) {
    if (target_stride < 1 || low.stride % target_stride != 0) {
        throw std::invalid_argument("upsample_interpolate: low stride " + std::to_string(low.stride) +
                                    " is not a multiple of target stride " + std::to_string(target_stride));
    }
    const CoordIndex index(low.coords);
    SparseTensor<T> out;
    out.coords.assign(target_coords.begin(), target_coords.end());
    out.stride = target_stride;
    out.voxel_size = low.voxel_size;
    out.feats = FeatureMatrix<T>::Zero(static_cast<Eigen::Index>(target_coords.size()), low.channels());
    if (parent_rows) parent_rows->assign(target_coords.size(), -1);
    const int s = low.stride;
    for (size_t i = 0; i < target_coords.size(); ++i) {
        const Coord3& c = target_coords[i];
        const Coord3 p{floor_div(c.x, s) * s, floor_div(c.y, s) * s, floor_div(c.z, s) * s};
        const int32_t r = index.find(p);
        if (r >= 0) {
            out.feats.row(static_cast<Eigen::Index>(i)) = low.feats.row(r);
            if (parent_rows) (*parent_rows)[i] = r;
        }
    }
    return out;
}

#define SPARSEDET3D_INSTANTIATE(T)                                                                        \
    template void contract_kernel_map<T>(const KernelMap&, const FeatureMatrix<T>&, const FeatureMatrix<T>&, \
                                         FeatureMatrix<T>&);                                              \
    template void contract_kernel_map_backward<T>(const KernelMap&, const FeatureMatrix<T>&,              \
                                                  const FeatureMatrix<T>&, const FeatureMatrix<T>&,       \
                                                  FeatureMatrix<T>*, FeatureMatrix<T>*);                  \
    template void apply_kernel_map<T>(const KernelMap&, const FeatureMatrix<T>&, const ConvWeights<T>&, \
                                      FeatureMatrix<T>&);                                                 \
    template ConvResult<T> sparse_conv_forward_plan<T>(const SparseTensor<T>&, const ConvWeights<T>&,     \
                                                       std::span<const Coord3>, int, const ConvOptions&); \
    template SparseTensor<T> sparse_conv_forward<T>(const SparseTensor<T>&, const ConvWeights<T>&,        \
                                                    std::span<const Coord3>, int, const ConvOptions&);    \
    template ConvGrads<T> sparse_conv_backward<T>(const FeatureMatrix<T>&, const ConvWeights<T>&,         \
                                                  const KernelMap&, const FeatureMatrix<T>&);             \
    template SparseTensor<T> upsample_interpolate<T>(const SparseTensor<T>&, std::span<const Coord3>, int, \
                                                     std::vector<int32_t>*);

SPARSEDET3D_INSTANTIATE(float)
SPARSEDET3D_INSTANTIATE(double)

#undef SPARSEDET3D_INSTANTIATE

}  // namespace sparsedet3d
