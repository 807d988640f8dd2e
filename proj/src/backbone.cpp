// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/backbone.hpp"

#include <algorithm>
#include <stdexcept>

namespace sparsedet3d {

using nn::Mat;
using nn::Tape;
using nn::Var;

namespace {

nn::NormParams make_norm(nn::ParameterStore& store, const std::string& prefix, int channels) {
    nn::NormParams p;
    p.gamma = &store.add(prefix + ".gamma", 1, channels);
    p.gamma->value.setOnes();
    p.gamma->decay = false;
    p.beta = &store.add(prefix + ".beta", 1, channels);
    p.beta->decay = false;
    p.running_mean = &store.add(prefix + ".running_mean", 1, channels, false);
    p.running_var = &store.add(prefix + ".running_var", 1, channels, false);
    p.running_var->value.setOnes();
    return p;
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

size_t BackboneConfig::highres_stage() const {
    for (size_t s = 0; s < stage_channels.size(); ++s) {
        if (stage_stride(s) == highres_stride) return s;
    }
    throw std::invalid_argument("BackboneConfig: no stage runs at highres_stride " + std::to_string(highres_stride));
}

void BackboneConfig::validate() const {
    if (in_channels < 1 || stem_channels < 1 || highres_channels < 1) {
        throw std::invalid_argument("BackboneConfig: channel counts must be positive");
    }
    if (out_channels < 1) throw std::invalid_argument("BackboneConfig: out_channels must be >= 1");
    if (stage_channels.empty()) throw std::invalid_argument("BackboneConfig: need at least one stage");
    for (int c : stage_channels) {
        if (c < 1) throw std::invalid_argument("BackboneConfig: stage channels must be positive");
    }
    if (blocks_per_stage < 0) throw std::invalid_argument("BackboneConfig: negative block count");
    if (!is_power_of_two(highres_stride) || highres_stride < 2) {
        throw std::invalid_argument("BackboneConfig: highres_stride must be a power of two >= 2");
    }
    const size_t hs = highres_stage();
    int prev = -1;
    for (int f : fusion_points) {
        if (f < 0 || static_cast<size_t>(f) >= stage_channels.size()) {
            throw std::invalid_argument("BackboneConfig: fusion point " + std::to_string(f) + " is not a stage");
        }
        if (static_cast<size_t>(f) <= hs) {
            throw std::invalid_argument("BackboneConfig: fusion point " + std::to_string(f) +
                                        " must be coarser than the high-resolution branch");
        }
        if (f <= prev) throw std::invalid_argument("BackboneConfig: fusion points must be increasing");
        prev = f;
    }
}

std::shared_ptr<const KernelMap> KernelMapCache::get(const std::vector<Coord3>& in, int in_stride,
                                                     const std::vector<Coord3>& out, int out_stride,
                                                     int kernel_size) {
    const auto key = std::make_tuple(in_stride, out_stride, kernel_size, in.size(), out.size());
    auto it = maps_.find(key);
    if (it != maps_.end()) return it->second;
    auto km = std::make_shared<const KernelMap>(build_kernel_map(in, out, kernel_size, in_stride));
    maps_.emplace(key, km);
    return km;
}

ConvNorm ConvNorm::create(nn::ParameterStore& store, const std::string& prefix, int k, int c_in, int c_out) {
    ConvNorm c;
    c.kernel_size = k;
    c.kernel = &store.add(prefix + ".kernel", static_cast<Eigen::Index>(k) * k * k * c_in, c_out);
    c.norm = make_norm(store, prefix + ".norm", c_out);
    return c;
}

void ConvNorm::init(Rng& rng) const { nn::init_he(*kernel, kernel->value.rows(), rng); }

namespace {

Var apply_conv_norm(Tape& t, Var x, const ConvNorm& c, std::shared_ptr<const KernelMap> km, nn::NormMode mode,
                    bool relu) {
    Var y = nn::sparse_conv(t, x, t.param(*c.kernel), nullptr, std::move(km));
    y = nn::normalize(t, y, c.norm, mode);
    return relu ? nn::relu(t, y) : y;
}

// Row of the enclosing coarse cell for every target, or -1.
std::vector<int32_t> parent_rows(const std::vector<Coord3>& low, int low_stride, const std::vector<Coord3>& targets) {
    const CoordIndex index(low);
    std::vector<int32_t> rows(targets.size(), -1);
    for (size_t i = 0; i < targets.size(); ++i) {
        const Coord3& c = targets[i];
        rows[i] = index.find({floor_div(c.x, low_stride) * low_stride, floor_div(c.y, low_stride) * low_stride,
                              floor_div(c.z, low_stride) * low_stride});
    }
    return rows;
}

}  // namespace

FuseParams create_fuse_params(nn::ParameterStore& store, const std::string& prefix, int high_channels,
                              int low_channels, int stride_ratio) {
    if (stride_ratio < 2 || !is_power_of_two(stride_ratio)) {
        throw std::invalid_argument("bilateral_fuse: stride ratio must be a power of two >= 2");
    }
    FuseParams p;
    int steps = 0;
    for (int r = stride_ratio; r > 1; r >>= 1) ++steps;
    for (int i = 0; i < steps; ++i) {
        const int c_out = i + 1 == steps ? low_channels : high_channels;
        p.high_to_low.push_back(
            ConvNorm::create(store, prefix + ".high_to_low" + std::to_string(i), 3, high_channels, c_out));
    }
    p.low_to_high = ConvNorm::create(store, prefix + ".low_to_high", 1, low_channels, high_channels);
    return p;
}

std::pair<Branch, Branch> bilateral_fuse(Tape& t, const Branch& high, const Branch& low, const FuseParams& p,
                                         nn::NormMode mode, KernelMapCache& cache) {
    if (high.stride < 1 || low.stride % high.stride != 0 || low.stride == high.stride) {
        throw std::invalid_argument("bilateral_fuse: low stride " + std::to_string(low.stride) +
                                    " is not a proper multiple of high stride " + std::to_string(high.stride));
    }
    const int ratio = low.stride / high.stride;
    int steps = 0;
    for (int r = ratio; r > 1; r >>= 1) ++steps;
    if ((1 << steps) != ratio || static_cast<int>(p.high_to_low.size()) != steps) {
        throw std::invalid_argument("bilateral_fuse: parameters built for another stride ratio");
    }

    // High to low: chain of stride-2 convolutions ending on the low coordinates.
    Branch cur = high;
    for (int i = 0; i < steps; ++i) {
        const bool last = i + 1 == steps;
        const int next_stride = cur.stride * 2;
        std::vector<Coord3> next = last ? low.coords : strided_downsample_coords(cur.coords, 2);
        auto km = cache.get(cur.coords, cur.stride, next, next_stride, 3);
        Var y = apply_conv_norm(t, cur.feats, p.high_to_low[static_cast<size_t>(i)], km, mode, !last);
        cur = Branch{std::move(next), next_stride, y};
    }
    Branch new_low{low.coords, low.stride, nn::add(t, low.feats, cur.feats)};

    // Low to high: nearest-parent interpolation then channel compression.
    Var up = nn::gather_rows(t, low.feats, parent_rows(low.coords, low.stride, high.coords));
    auto km1 = cache.get(high.coords, high.stride, high.coords, high.stride, 1);
    Var compressed = apply_conv_norm(t, up, p.low_to_high, km1, mode, false);
    Branch new_high{high.coords, high.stride, nn::add(t, high.feats, compressed)};
    return {std::move(new_high), std::move(new_low)};
}

std::pair<SparseTensor<double>, SparseTensor<double>> bilateral_fuse(const SparseTensor<double>& high,
                                                                     const SparseTensor<double>& low,
                                                                     const FuseParams& p, nn::NormMode mode) {
    Tape t(false);
    KernelMapCache cache;
    const Branch h{high.coords, high.stride, t.constant(high.feats)};
    const Branch l{low.coords, low.stride, t.constant(low.feats)};
    auto [nh, nl] = bilateral_fuse(t, h, l, p, mode, cache);
    SparseTensor<double> oh{nh.coords, nh.feats->val(), nh.stride, high.voxel_size};
    SparseTensor<double> ol{nl.coords, nl.feats->val(), nl.stride, low.voxel_size};
    return {std::move(oh), std::move(ol)};
}

Backbone::Block Backbone::make_block(nn::ParameterStore& store, const std::string& prefix, int channels) {
    Block b;
    b.norm_a = make_norm(store, prefix + ".norm_a", channels);
    b.conv_a = &store.add(prefix + ".conv_a.kernel", 27 * channels, channels);
    b.norm_b = make_norm(store, prefix + ".norm_b", channels);
    b.conv_b = &store.add(prefix + ".conv_b.kernel", 27 * channels, channels);
    return b;
}

Backbone::Backbone(const BackboneConfig& cfg, nn::ParameterStore& store, const std::string& prefix) : cfg_(cfg) {
    cfg_.validate();
    stem_ = ConvNorm::create(store, prefix + ".stem", 3, cfg_.in_channels, cfg_.stem_channels);
    int c_prev = cfg_.stem_channels;
    for (size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
        const int c = cfg_.stage_channels[s];
        const std::string sp = prefix + ".stage" + std::to_string(s);
        Stage st;
        st.down = ConvNorm::create(store, sp + ".down", 3, c_prev, c);
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            st.blocks.push_back(make_block(store, sp + ".block" + std::to_string(b), c));
        }
        stages_.push_back(std::move(st));
        c_prev = c;
    }
    const size_t hs = cfg_.highres_stage();
    high_init_ = ConvNorm::create(store, prefix + ".high.init", 1, cfg_.stage_channels[hs], cfg_.highres_channels);
    for (int f : cfg_.fusion_points) {
        const std::string fp = prefix + ".fuse" + std::to_string(f);
        high_blocks_.push_back(make_block(store, prefix + ".high.block" + std::to_string(f), cfg_.highres_channels));
        fuse_.push_back(create_fuse_params(store, fp, cfg_.highres_channels, cfg_.stage_channels[static_cast<size_t>(f)],
                                           cfg_.stage_stride(static_cast<size_t>(f)) / cfg_.highres_stride));
    }
    out_ = ConvNorm::create(store, prefix + ".out", 1, cfg_.highres_channels, cfg_.out_channels);
}

void Backbone::init(Rng& rng) const {
    stem_.init(rng);
    for (const Stage& st : stages_) {
        st.down.init(rng);
        for (const Block& b : st.blocks) {
            nn::init_he(*b.conv_a, b.conv_a->value.rows(), rng);
            // Residual branches start near zero so every block begins close to identity.
            nn::init_he(*b.conv_b, b.conv_b->value.rows(), rng);
            b.conv_b->value *= 0.1;
        }
    }
    high_init_.init(rng);
    for (size_t i = 0; i < fuse_.size(); ++i) {
        const Block& b = high_blocks_[i];
        nn::init_he(*b.conv_a, b.conv_a->value.rows(), rng);
        nn::init_he(*b.conv_b, b.conv_b->value.rows(), rng);
        b.conv_b->value *= 0.1;
        for (const ConvNorm& c : fuse_[i].high_to_low) c.init(rng);
        fuse_[i].low_to_high.init(rng);
    }
    out_.init(rng);
}

Branch Backbone::conv_norm(Tape& t, const Branch& x, const ConvNorm& c, const std::vector<Coord3>& out_coords,
                           int out_stride, bool relu, KernelMapCache& cache) const {
    auto km = cache.get(x.coords, x.stride, out_coords, out_stride, c.kernel_size);
    return Branch{out_coords, out_stride, apply_conv_norm(t, x.feats, c, km, cfg_.norm, relu)};
}

Branch Backbone::residual(Tape& t, const Branch& x, const Block& blk, KernelMapCache& cache) const {
    auto km = cache.get(x.coords, x.stride, x.coords, x.stride, 3);
    Var h = nn::relu(t, nn::normalize(t, x.feats, blk.norm_a, cfg_.norm));
    h = nn::sparse_conv(t, h, t.param(*blk.conv_a), nullptr, km);
    h = nn::relu(t, nn::normalize(t, h, blk.norm_b, cfg_.norm));
    h = nn::sparse_conv(t, h, t.param(*blk.conv_b), nullptr, km);
    return Branch{x.coords, x.stride, nn::add(t, x.feats, h)};
}

Branch Backbone::forward(Tape& t, const std::vector<Coord3>& coords, Var feats) const {
    if (feats->cols() != cfg_.in_channels) {
        throw std::invalid_argument("backbone: input has " + std::to_string(feats->cols()) + " channels, expected " +
                                    std::to_string(cfg_.in_channels));
    }
    if (static_cast<size_t>(feats->rows()) != coords.size()) {
        throw std::invalid_argument("backbone: feature rows disagree with coordinates");
    }
    KernelMapCache cache;
    Branch x{coords, 1, feats};
    if (coords.empty()) {
        return Branch{{}, cfg_.highres_stride, t.constant(Mat::Zero(0, cfg_.out_channels))};
    }
    x = conv_norm(t, x, stem_, x.coords, 1, true, cache);

    const size_t hs = cfg_.highres_stage();
    Branch high;
    size_t next_fuse = 0;
    for (size_t s = 0; s < stages_.size(); ++s) {
        const Stage& st = stages_[s];
        std::vector<Coord3> down = strided_downsample_coords(x.coords, 2);
        x = conv_norm(t, x, st.down, down, x.stride * 2, true, cache);
        for (const Block& b : st.blocks) x = residual(t, x, b, cache);
        if (s == hs) high = conv_norm(t, x, high_init_, x.coords, x.stride, true, cache);
        if (next_fuse < fuse_.size() && cfg_.fusion_points[next_fuse] == static_cast<int>(s)) {
            high = residual(t, high, high_blocks_[next_fuse], cache);
            auto [nh, nl] = bilateral_fuse(t, high, x, fuse_[next_fuse], cfg_.norm, cache);
            high = std::move(nh);
            x = std::move(nl);
            ++next_fuse;
        }
    }
    return conv_norm(t, high, out_, high.coords, high.stride, true, cache);
}

SparseTensor<double> Backbone::forward(const SparseTensor<double>& input, bool training) const {
    if (input.stride != 1) throw std::invalid_argument("backbone: input stride must be 1");
    Tape t(training);
    const Branch out = forward(t, input.coords, t.constant(input.feats));
    return SparseTensor<double>{out.coords, out.feats->val(), out.stride, input.voxel_size};
}

}  // namespace sparsedet3d
