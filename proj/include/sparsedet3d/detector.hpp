// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sparsedet3d/backbone.hpp"
#include "sparsedet3d/config.hpp"
#include "sparsedet3d/nn.hpp"
#include "sparsedet3d/proposal.hpp"
#include "sparsedet3d/roipool.hpp"
#include "sparsedet3d/voxelizer.hpp"

namespace sparsedet3d {

struct SceneRecord {
    std::string scene_id;
    PointCloud cloud;
    std::vector<GtBox> gt;

    void validate(int num_classes) const;
};

struct Detection {
    Box3D box;
    int class_id = 0;
    double score = 0.0;
};

/// Per-class mean (w, l, h) of the ground-truth boxes; classes without
/// boxes get `fallback`.
ClassSizeTable estimate_class_sizes(const std::vector<SceneRecord>& scenes, int num_classes,
                                    ClassSize fallback = {0.2, 0.2, 0.2});

/// Channel widths of a network preset.
struct NetworkShape {
    BackboneConfig backbone;
    int vote_hidden = 64;
    int group_channels = 64;
    int roi_channels1 = 32;
    int roi_channels2 = 64;
    int refine_hidden = 64;

    static NetworkShape preset(const RunConfig& cfg);
};

/// Everything one forward pass produced; fields past `proposals` are only
/// filled when the RoI stage ran.
struct ForwardResult {
    size_t input_voxels = 0;
    size_t backbone_voxels = 0;
    std::vector<ClassGroup> groups;
    std::vector<Proposal> proposals;  // after score filter and NMS
    Selection selection;              // training only
    std::vector<char> hollow;
    std::vector<Detection> detections;
    LossReport report;
    nn::Var total = nullptr;  // recorded scalar loss when training
};

/// Two-stage detector. All learnable state lives in params(); the class
/// size table is stored there too (as a buffer) so checkpoints carry it.
class Detector {
public:
    Detector(const RunConfig& cfg, const ClassSizeTable& sizes);

    Detector(const Detector&) = delete;
    Detector& operator=(const Detector&) = delete;

    void init(uint64_t seed);

    const RunConfig& config() const { return cfg_; }
    const NetworkShape& shape() const { return shape_; }
    nn::ParameterStore& params() { return store_; }
    const nn::ParameterStore& params() const { return store_; }
    ClassSizeTable class_sizes() const;

    /// Full pass. With `gt` the losses are computed (and recorded on `t` if
    /// it records); the RoI stage then runs on the selected training
    /// proposals. Without `gt` the RoI stage refines every proposal.
    ForwardResult forward(nn::Tape& t, const PointCloud& cloud, const std::vector<GtBox>* gt, double tau) const;

    /// Inference at the schedule floor. Errors name the failing stage.
    std::vector<Detection> infer(const PointCloud& cloud) const;

private:
    struct Linear {
        nn::Parameter* w = nullptr;
        nn::Parameter* b = nullptr;
    };
    struct Conv {
        nn::Parameter* kernel = nullptr;
        nn::Parameter* bias = nullptr;
    };
    Linear make_linear(const std::string& name, int in, int out);
    Conv make_conv(const std::string& name, int k, int in, int out);
    nn::Var apply(nn::Tape& t, nn::Var x, const Linear& l) const;

    RunConfig cfg_;
    NetworkShape shape_;
    nn::ParameterStore store_;
    std::unique_ptr<Backbone> backbone_;
    nn::Parameter* class_sizes_ = nullptr;
    Linear vote1_, vote2_, semantic_;
    std::vector<Conv> group_;
    Linear head_cls_, head_reg_, head_cntr_;
    Conv roi1_, roi2_;
    Linear refine1_, refine2_;
};

}  // namespace sparsedet3d
