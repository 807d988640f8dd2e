// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "sparsedet3d/detector.hpp"

namespace sparsedet3d {

/// Desk-scale scene recipe: a square floor patch with a few yawed boxes
/// resting on it, points sampled on their visible faces, and uniform
/// clutter. Features are per-class base colors with Gaussian noise.
struct SynthSpec {
    std::vector<ClassSize> mean_size{{0.25, 0.25, 0.25}, {0.45, 0.2, 0.12}, {0.12, 0.12, 0.3}};
    std::vector<std::array<double, 3>> color{{0.8, 0.2, 0.2}, {0.2, 0.7, 0.2}, {0.2, 0.3, 0.8}};
    double size_jitter = 0.15;      // dims = mean * U(1 - j, 1 + j)
    int min_boxes = 3;
    int max_boxes = 5;
    double extent = 1.2;            // floor patch side (m)
    double clutter_height = 0.4;    // clutter fills [0, extent]^2 x [0, clutter_height]
    double surface_density = 1200;  // points per m^2 of visible face
    double clutter_fraction = 0.15; // share of clutter points in the cloud
    double color_noise = 0.05;
    double min_gap = 0.03;          // clearance between boxes
    int max_attempts = 200;         // placement retries per box

    int num_classes() const { return static_cast<int>(mean_size.size()); }
    void validate() const;
};

/// Deterministic given the seed. Throws std::runtime_error when a box
/// cannot be placed without overlap within max_attempts.
std::vector<SceneRecord> synth_scenes(int n, uint64_t seed, const SynthSpec& spec = {});

}  // namespace sparsedet3d
