// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/geometry.hpp"

#include <stdexcept>

namespace sparsedet3d {

void validate_box(const Box3D& b) {
    const double v[] = {b.cx, b.cy, b.cz, b.w, b.l, b.h, b.theta};
    for (double x : v) {
        if (!std::isfinite(x)) throw std::invalid_argument("Box3D: non-finite parameter");
    }
    if (!(b.w > 0.0 && b.l > 0.0 && b.h > 0.0)) throw std::invalid_argument("Box3D: extents must be positive");
}

std::array<Vec3, 8> corners(const Box3D& b) {
    std::array<Vec3, 8> out;
    for (int i = 0; i < 8; ++i) {
        const Vec3 local{(i & 4 ? 0.5 : -0.5) * b.w, (i & 2 ? 0.5 : -0.5) * b.l, (i & 1 ? 0.5 : -0.5) * b.h};
        out[i] = from_canonical(local, b);
    }
    return out;
}

Vec3 to_canonical(const Vec3& p, const Box3D& b) {
    const double c = std::cos(b.theta);
    const double s = std::sin(b.theta);
    const double dx = p[0] - b.cx;
    const double dy = p[1] - b.cy;
    return {c * dx + s * dy, -s * dx + c * dy, p[2] - b.cz};
}

Vec3 from_canonical(const Vec3& q, const Box3D& b) {
    const double c = std::cos(b.theta);
    const double s = std::sin(b.theta);
    return {b.cx + c * q[0] - s * q[1], b.cy + s * q[0] + c * q[1], b.cz + q[2]};
}

bool contains(const Box3D& b, const Vec3& p) {
    const Vec3 q = to_canonical(p, b);
    return std::abs(q[0]) <= 0.5 * b.w && std::abs(q[1]) <= 0.5 * b.l && std::abs(q[2]) <= 0.5 * b.h;
}

double iou3d(const Box3D& a, const Box3D& b) { return iou3d<double>(a, b); }

IouGrad iou3d_grad(const Box3D& a, const Box3D& b) {
    using D = Dual<7>;
    BoxT<D> da{D::variable(a.cx, 0), D::variable(a.cy, 1), D::variable(a.cz, 2), D::variable(a.w, 3),
               D::variable(a.l, 4),  D::variable(a.h, 5),  D::variable(a.theta, 6)};
    const D r = iou3d(da, lift_box<D>(b));
    IouGrad g;
    g.iou = r.v;
    g.grad = r.d;
    return g;
}

}  // namespace sparsedet3d
