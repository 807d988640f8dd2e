// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <tuple>
#include <memory>
#include <string>
#include <vector>

#include "sparsedet3d/nn.hpp"
#include "sparsedet3d/sparse_tensor.hpp"

namespace sparsedet3d {

struct BackboneConfig {
    int in_channels = 3;
    int stem_channels = 16;
    std::vector<int> stage_channels{16, 32, 64, 128};  // stage s runs at stride 2^(s+1)
    int blocks_per_stage = 2;
    int highres_channels = 32;
    int highres_stride = 2;
    std::vector<int> fusion_points{1, 2, 3};
    int out_channels = 64;
    nn::NormMode norm = nn::NormMode::batch;

    int stage_stride(size_t s) const { return 2 << s; }
    /// Stage whose stride equals highres_stride (the high branch forks there).
    size_t highres_stage() const;
    void validate() const;
};

/// Features flowing through the network: coordinates at one stride plus a
/// tape variable holding the feature rows.
struct Branch {
    std::vector<Coord3> coords;
    int stride = 1;
    nn::Var feats = nullptr;
};

/// Kernel maps keyed by (input stride, output stride, kernel size), shared
/// by every layer that convolves between the same coordinate sets.
class KernelMapCache {
public:
    std::shared_ptr<const KernelMap> get(const std::vector<Coord3>& in, int in_stride, const std::vector<Coord3>& out,
                                         int out_stride, int kernel_size);

private:
    std::map<std::tuple<int, int, int, size_t, size_t>, std::shared_ptr<const KernelMap>> maps_;
};

/// conv (no bias) -> norm parameters registered under `prefix`.
struct ConvNorm {
    nn::Parameter* kernel = nullptr;
    nn::NormParams norm;
    int kernel_size = 1;

    static ConvNorm create(nn::ParameterStore& store, const std::string& prefix, int k, int c_in, int c_out);
    void init(Rng& rng) const;
};

struct FuseParams {
    std::vector<ConvNorm> high_to_low;  // stride-2 chain, last one onto the low coordinates
    ConvNorm low_to_high;               // 1x1 channel compression after interpolation
};

/// Two-way exchange between the high-resolution and a low-resolution
/// branch; both results are computed from the inputs.
std::pair<Branch, Branch> bilateral_fuse(nn::Tape& t, const Branch& high, const Branch& low, const FuseParams& p,
                                         nn::NormMode mode, KernelMapCache& cache);

/// Plain-tensor wrapper (inference mode normalization).
std::pair<SparseTensor<double>, SparseTensor<double>> bilateral_fuse(const SparseTensor<double>& high,
                                                                     const SparseTensor<double>& low,
                                                                     const FuseParams& p,
                                                                     nn::NormMode mode = nn::NormMode::batch);

FuseParams create_fuse_params(nn::ParameterStore& store, const std::string& prefix, int high_channels,
                              int low_channels, int stride_ratio);

class Backbone {
public:
    Backbone(const BackboneConfig& cfg, nn::ParameterStore& store, const std::string& prefix = "backbone");

    void init(Rng& rng) const;
    const BackboneConfig& config() const { return cfg_; }

    /// Input at stride 1; returns the high branch at highres_stride.
    Branch forward(nn::Tape& t, const std::vector<Coord3>& coords, nn::Var feats) const;

    /// Plain-tensor forward using the tape's recording mode.
    SparseTensor<double> forward(const SparseTensor<double>& input, bool training = false) const;

private:
    // Pre-activation: x + conv_b(relu(norm_b(conv_a(relu(norm_a(x)))))).
    struct Block {
        nn::NormParams norm_a;
        nn::Parameter* conv_a = nullptr;
        nn::NormParams norm_b;
        nn::Parameter* conv_b = nullptr;
    };
    struct Stage {
        ConvNorm down;
        std::vector<Block> blocks;
    };

    Branch conv_norm(nn::Tape& t, const Branch& x, const ConvNorm& c, const std::vector<Coord3>& out_coords,
                     int out_stride, bool relu, KernelMapCache& cache) const;
    Branch residual(nn::Tape& t, const Branch& x, const Block& blk, KernelMapCache& cache) const;
    Block make_block(nn::ParameterStore& store, const std::string& prefix, int channels);

    BackboneConfig cfg_;
    ConvNorm stem_;
    std::vector<Stage> stages_;
    ConvNorm high_init_;
    std::vector<FuseParams> fuse_;        // per fusion point
    std::vector<Block> high_blocks_;      // per fusion point
    ConvNorm out_;
};

}  // namespace sparsedet3d
