// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "sparsedet3d/detector.hpp"

namespace sparsedet3d {

/// Adam with decoupled weight decay (applied only to parameters flagged
/// `decay`).
class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step(const std::vector<nn::Parameter*>& params);
    int steps() const { return t_; }

private:
    struct Moments {
        nn::Mat m;
        nn::Mat v;
    };
    double lr_, wd_, b1_, b2_, eps_;
    int t_ = 0;
    std::unordered_map<const nn::Parameter*, Moments> state_;
};

/// Global L2 norm of all gradients.
double grad_norm(const std::vector<nn::Parameter*>& params);

/// Scales gradients so the global norm is at most max_norm; returns the
/// norm before clipping.
double clip_grad_norm(const std::vector<nn::Parameter*>& params, double max_norm);

struct TrainStep {
    int step = 0;
    int epoch = 0;
    double tau = 0.0;
    LossReport report;  // batch mean
    double grad_norm = 0.0;     // before clipping
    double clipped_norm = 0.0;  // after clipping
};

/// Epoch reached after `step` steps: floor(step * batch / n_scenes).
int epoch_of_step(int step, int batch, size_t n_scenes);

/// Runs cfg.steps optimizer steps over mini-batches drawn from a seeded
/// per-epoch shuffle. Throws (naming the term) on a non-finite loss.
std::vector<TrainStep> run_toy_train(Detector& model, const std::vector<SceneRecord>& scenes, const RunConfig& cfg,
                                     const std::function<void(const TrainStep&)>& on_step = {});

}  // namespace sparsedet3d
