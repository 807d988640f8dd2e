// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "sparsedet3d/losses.hpp"
#include "sparsedet3d/proposal.hpp"
#include "sparsedet3d/roipool.hpp"

namespace sparsedet3d {

/// Every tunable of a run. Text form is one "key = value" per line; '#'
/// starts a comment.
struct RunConfig {
    uint64_t seed = 0;
    std::string network = "toy";
    int num_classes = 3;
    int in_channels = 3;

    double voxel_size = 0.02;
    double highres_voxel_size = 0.04;
    double alpha = 0.15;

    std::string dataset_preset = "scannet";
    double tau_initial = 0.15;
    double tau_step = 0.02;
    int tau_interval_epochs = 10;
    double tau_min = 0.05;

    int grouping_kernel = 9;
    std::array<int, 3> roi_grid1{7, 7, 7};
    int roi_kernel1 = 5;
    std::array<int, 3> roi_grid2{1, 1, 1};
    int roi_kernel2 = 7;

    double nms_iou = 0.5;
    double score_min = 0.01;
    int nms_pre = 1000;
    int train_proposals = 128;
    double train_proposal_iou = 0.3;

    LossWeights loss;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;

    std::string norm = "batch";
    double lr = 0.001;
    double weight_decay = 0.0001;
    double grad_clip = 10.0;
    int batch = 2;
    int steps = 500;

    /// Throws std::invalid_argument describing the first bad field.
    void validate() const;

    int highres_stride() const;
    TauSchedule tau() const;
    RoiConfig roi() const;

    /// Canonical text form, keys in declaration order.
    std::string dump() const;

    /// Applies "key = value" lines over the defaults. Unknown keys and
    /// malformed values throw with the line number. A dataset_preset line
    /// also sets tau_interval_epochs unless that key is given explicitly.
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);

    /// Single assignment; throws on unknown key or bad value.
    void set(const std::string& key, const std::string& value);
};

/// Shortest round-trip fixed-notation rendering used by dump().
std::string format_number(double v);

}  // namespace sparsedet3d
