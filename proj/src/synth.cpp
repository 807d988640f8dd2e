// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/synth.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "sparsedet3d/random.hpp"

namespace sparsedet3d {
namespace {

struct Point {
    Vec3 p;
    std::array<double, 3> rgb;
};

bool overlaps(const Box3D& a, const Box3D& b, double gap) {
    Box3D ga = a;
    ga.w += gap;
    ga.l += gap;
    return intersection_volume(ga, b) > 0.0;
}

// Faces except the bottom one, sampled just inside the surface.
void sample_surface(const Box3D& box, const std::array<double, 3>& color, const SynthSpec& spec, Rng& rng,
                    std::vector<Point>& out) {
    const double hw = 0.5 * box.w * 0.999;
    const double hl = 0.5 * box.l * 0.999;
    const double hh = 0.5 * box.h * 0.999;
    // Face areas: top, +-x, +-y.
    const std::array<double, 5> area{box.w * box.l, box.l * box.h, box.l * box.h, box.w * box.h, box.w * box.h};
    double total = 0.0;
    for (double a : area) total += a;
    const auto n = static_cast<int>(std::lround(total * spec.surface_density));
    for (int i = 0; i < n; ++i) {
        double r = rng.uniform() * total;
        int face = 0;
        while (face < 4 && r >= area[static_cast<size_t>(face)]) r -= area[static_cast<size_t>(face++)];
        const double u = rng.uniform(-1.0, 1.0);
        const double v = rng.uniform(-1.0, 1.0);
        Vec3 q{};
        switch (face) {
            case 0: q = {u * hw, v * hl, hh}; break;
            case 1: q = {hw, u * hl, v * hh}; break;
            case 2: q = {-hw, u * hl, v * hh}; break;
            case 3: q = {u * hw, hl, v * hh}; break;
            default: q = {u * hw, -hl, v * hh}; break;
        }
        Point pt;
        pt.p = from_canonical(q, box);
        for (int c = 0; c < 3; ++c) pt.rgb[c] = color[c] + spec.color_noise * rng.normal();
        out.push_back(pt);
    }
}

}  // namespace

void SynthSpec::validate() const {
    if (mean_size.empty()) throw std::invalid_argument("SynthSpec: need at least one class");
    if (color.size() != mean_size.size()) throw std::invalid_argument("SynthSpec: one color per class required");
    for (const ClassSize& d : mean_size) {
        if (!(d.w > 0 && d.l > 0 && d.h > 0)) throw std::invalid_argument("SynthSpec: class sizes must be positive");
    }
    if (!(size_jitter >= 0.0 && size_jitter < 1.0)) throw std::invalid_argument("SynthSpec: size_jitter in [0, 1)");
    if (min_boxes < 0 || max_boxes < min_boxes) throw std::invalid_argument("SynthSpec: bad box count range");
    if (!(extent > 0.0) || !(clutter_height > 0.0)) throw std::invalid_argument("SynthSpec: extents must be positive");
    if (!(surface_density > 0.0)) throw std::invalid_argument("SynthSpec: surface_density must be positive");
    if (!(clutter_fraction >= 0.0 && clutter_fraction < 1.0)) {
        throw std::invalid_argument("SynthSpec: clutter_fraction in [0, 1)");
    }
    if (max_attempts < 1) throw std::invalid_argument("SynthSpec: max_attempts must be >= 1");
}

constexpr int kMaxLayouts = 50;

std::vector<SceneRecord> synth_scenes(int n, uint64_t seed, const SynthSpec& spec) {
    if (n < 1) throw std::invalid_argument("synth_scenes: need n >= 1");
    spec.validate();
    Rng rng(seed);
    std::vector<SceneRecord> scenes;
    for (int s = 0; s < n; ++s) {
        SceneRecord scene;
        char id[32];
        std::snprintf(id, sizeof(id), "scene_%04d", s);
        scene.scene_id = id;
        const int count = spec.min_boxes + static_cast<int>(rng.below(static_cast<uint64_t>(spec.max_boxes - spec.min_boxes + 1)));
        std::vector<Point> points;
        // A box that finds no free spot restarts the layout of the whole scene.
        int layout = 0;
        for (int b = 0; b < count; ++b) {
            const int cls = static_cast<int>(rng.below(static_cast<uint64_t>(spec.num_classes())));
            const ClassSize& m = spec.mean_size[static_cast<size_t>(cls)];
            const double j = spec.size_jitter;
            Box3D box;
            box.w = m.w * rng.uniform(1.0 - j, 1.0 + j);
            box.l = m.l * rng.uniform(1.0 - j, 1.0 + j);
            box.h = m.h * rng.uniform(1.0 - j, 1.0 + j);
            box.cz = 0.5 * box.h;
            const double reach = 0.5 * std::hypot(box.w, box.l);
            if (2.0 * reach >= spec.extent) throw std::runtime_error("synth_scenes: box larger than the floor patch");
            bool placed = false;
            for (int attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
                box.cx = rng.uniform(reach, spec.extent - reach);
                box.cy = rng.uniform(reach, spec.extent - reach);
                box.theta = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
                placed = true;
                for (const GtBox& o : scene.gt) {
                    if (overlaps(box, o.box, spec.min_gap)) {
                        placed = false;
                        break;
                    }
                }
            }
            if (!placed) {
                if (++layout == kMaxLayouts) {
                    throw std::runtime_error("synth_scenes: could not place box " + std::to_string(b) + " of " +
                                             scene.scene_id + " without overlap");
                }
                scene.gt.clear();
                points.clear();
                b = -1;
                continue;
            }
            scene.gt.push_back({box, cls});
            sample_surface(box, spec.color[static_cast<size_t>(cls)], spec, rng, points);
        }
        const double f = spec.clutter_fraction;
        const auto clutter = static_cast<size_t>(std::lround(static_cast<double>(points.size()) * f / (1.0 - f)));
        for (size_t i = 0; i < clutter; ++i) {
            Point pt;
            pt.p = {rng.uniform(0.0, spec.extent), rng.uniform(0.0, spec.extent), rng.uniform(0.0, spec.clutter_height)};
            const double g = rng.uniform(0.3, 0.7);
            for (int c = 0; c < 3; ++c) pt.rgb[c] = g + spec.color_noise * rng.normal();
            points.push_back(pt);
        }
        scene.cloud.positions.resize(static_cast<Eigen::Index>(points.size()), 3);
        scene.cloud.features.resize(static_cast<Eigen::Index>(points.size()), 3);
        for (size_t i = 0; i < points.size(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            scene.cloud.positions.row(r) << points[i].p[0], points[i].p[1], points[i].p[2];
            scene.cloud.features.row(r) << points[i].rgb[0], points[i].rgb[1], points[i].rgb[2];
        }
        scenes.push_back(std::move(scene));
    }
    return scenes;
}

}  // namespace sparsedet3d
