// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "sparsedet3d/detector.hpp"

namespace sparsedet3d {

struct ScenePredictions {
    std::string scene_id;
    std::vector<Detection> detections;
};

struct EvalResult {
    std::vector<double> thresholds;
    std::vector<std::vector<double>> ap;  // [threshold][class]; NaN for classes without ground truth
    std::vector<double> map;              // per threshold, mean over classes with ground truth
    std::vector<double> recall;           // per threshold, share of gt boxes hit by a same-class detection
};

/// Average precision with the all-point precision envelope. Detections are
/// ranked by score (ties by scene, then input order); each is a true
/// positive iff its highest-IoU same-class ground truth reaches the
/// threshold and was not matched before (duplicates are false positives).
/// `predictions[s]` and `gt[s]` describe the same scene.
EvalResult eval_map(const std::vector<std::vector<Detection>>& predictions, const std::vector<std::vector<GtBox>>& gt,
                    int num_classes, const std::vector<double>& thresholds);

/// Area under the monotone envelope of (recall, precision) points.
double envelope_ap(const std::vector<double>& recall, const std::vector<double>& precision);

/// One JSON object per line: {scene_id, class, score, cx, cy, cz, w, l, h, theta}.
void write_predictions(const std::string& path, const std::vector<ScenePredictions>& preds);
std::vector<ScenePredictions> read_predictions(const std::string& path);

}  // namespace sparsedet3d
