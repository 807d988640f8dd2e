// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "sparsedet3d/dual.hpp"
#include "sparsedet3d/sparse_tensor.hpp"

namespace sparsedet3d {

/// Oriented box: center, extents along the box's own x (w), y (l) and z (h)
/// axes, and yaw about +z. Generic over the scalar so the same code serves
/// plain evaluation and forward-mode differentiation.
template <class T>
struct BoxT {
    T cx{}, cy{}, cz{};
    T w{}, l{}, h{};
    T theta{};
};

using Box3D = BoxT<double>;

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
    double r = std::remainder(a, 2.0 * std::numbers::pi);
    if (r <= -std::numbers::pi) r += 2.0 * std::numbers::pi;
    return r;
}

/// Throws std::invalid_argument unless extents are positive and finite.
void validate_box(const Box3D& b);

inline double volume(const Box3D& b) { return b.w * b.l * b.h; }

/// Corner i has sign bits (x: bit 2, y: bit 1, z: bit 0), negative first,
/// i.e. (-w/2,-l/2,-h/2), (-w/2,-l/2,+h/2), (-w/2,+l/2,-h/2), ... rotated by
/// theta and translated to the center.
std::array<Vec3, 8> corners(const Box3D& b);

/// Point in the box frame: subtract the center, rotate by -theta about z.
Vec3 to_canonical(const Vec3& p, const Box3D& b);

/// Inverse of to_canonical.
Vec3 from_canonical(const Vec3& q, const Box3D& b);

/// Closed containment test in the box frame.
bool contains(const Box3D& b, const Vec3& p);

namespace detail {

template <class T>
struct P2 {
    T x, y;
};

template <class T>
std::array<P2<T>, 4> footprint(const BoxT<T>& b) {
    using std::cos;
    using std::sin;
    const T c = cos(b.theta);
    const T s = sin(b.theta);
    const T hw = b.w * 0.5;
    const T hl = b.l * 0.5;
    const std::array<std::array<double, 2>, 4> sign{{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}};
    std::array<P2<T>, 4> out;
    for (int i = 0; i < 4; ++i) {
        const T lx = hw * sign[i][0];
        const T ly = hl * sign[i][1];
        out[i] = {b.cx + c * lx - s * ly, b.cy + s * lx + c * ly};
    }
    return out;
}

/// Area of the intersection of two convex counter-clockwise quads, by
/// clipping `a` against each edge of `b`.
template <class T>
T clipped_area(const std::array<P2<T>, 4>& a, const std::array<P2<T>, 4>& b) {
    constexpr double inside_eps = 1e-12;
    std::vector<P2<T>> poly(a.begin(), a.end());
    std::vector<P2<T>> next;
    for (int e = 0; e < 4 && !poly.empty(); ++e) {
        const P2<T>& e0 = b[e];
        const P2<T>& e1 = b[(e + 1) % 4];
        const T ex = e1.x - e0.x;
        const T ey = e1.y - e0.y;
        auto side = [&](const P2<T>& p) { return ex * (p.y - e0.y) - ey * (p.x - e0.x); };
        next.clear();
        for (size_t i = 0; i < poly.size(); ++i) {
            const P2<T>& p = poly[i];
            const P2<T>& q = poly[(i + 1) % poly.size()];
            const T sp = side(p);
            const T sq = side(q);
            const bool pin = value_of(sp) >= -inside_eps;
            const bool qin = value_of(sq) >= -inside_eps;
            if (pin) next.push_back(p);
            if (pin != qin) {
                const T t = sp / (sp - sq);
                next.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
            }
        }
        poly.swap(next);
    }
    if (poly.size() < 3) return T(0.0);
    T twice{0.0};
    for (size_t i = 0; i < poly.size(); ++i) {
        const P2<T>& p = poly[i];
        const P2<T>& q = poly[(i + 1) % poly.size()];
        twice += p.x * q.y - q.x * p.y;
    }
    T area = twice * 0.5;
    if (value_of(area) < 0.0) area = -area;
    return area;
}

}  // namespace detail

/// Intersection volume of two oriented boxes.
template <class T>
T intersection_volume(const BoxT<T>& a, const BoxT<T>& b) {
    constexpr double area_eps = 1e-12;
    const T top = std::min(a.cz + a.h * 0.5, b.cz + b.h * 0.5);
    const T bottom = std::max(a.cz - a.h * 0.5, b.cz - b.h * 0.5);
    if (!(value_of(top) > value_of(bottom))) return T(0.0);
    const T area = detail::clipped_area(detail::footprint(a), detail::footprint(b));
    if (value_of(area) < area_eps) return T(0.0);
    return area * (top - bottom);
}

/// Rotated 3D IoU: vertical overlap times planar polygon intersection over
/// the union volume.
template <class T>
T iou3d(const BoxT<T>& a, const BoxT<T>& b) {
    const T inter = intersection_volume(a, b);
    if (!(value_of(inter) > 0.0)) return T(0.0);
    const T uni = a.w * a.l * a.h + b.w * b.l * b.h - inter;
    return inter / uni;
}

double iou3d(const Box3D& a, const Box3D& b);

/// IoU and its gradient with respect to (cx, cy, cz, w, l, h, theta) of `a`.
struct IouGrad {
    double iou = 0.0;
    std::array<double, 7> grad{};
};
IouGrad iou3d_grad(const Box3D& a, const Box3D& b);

template <class T>
BoxT<T> lift_box(const Box3D& b) {
    return {T(b.cx), T(b.cy), T(b.cz), T(b.w), T(b.l), T(b.h), T(b.theta)};
}

}  // namespace sparsedet3d
