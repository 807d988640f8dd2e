// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "sparsedet3d/geometry.hpp"
#include "sparsedet3d/oracle.hpp"

namespace sparsedet3d::oracle {

const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

std::vector<KernelMap::Triple> brute_kernel_map(std::span<const Coord3> in, std::span<const Coord3> out,
                                                int kernel_size, int dilation) {
    const int r = (kernel_size - 1) / 2;
    std::vector<KernelMap::Triple> triples;
    for (size_t o = 0; o < out.size(); ++o) {
        for (size_t i = 0; i < in.size(); ++i) {
            const int64_t dx = int64_t{in[i].x} - out[o].x;
            const int64_t dy = int64_t{in[i].y} - out[o].y;
            const int64_t dz = int64_t{in[i].z} - out[o].z;
            if (dx % dilation != 0 || dy % dilation != 0 || dz % dilation != 0) continue;
            const int64_t ox = dx / dilation;
            const int64_t oy = dy / dilation;
            const int64_t oz = dz / dilation;
            if (std::abs(ox) > r || std::abs(oy) > r || std::abs(oz) > r) continue;
            const int64_t d = ((ox + r) * kernel_size + (oy + r)) * kernel_size + (oz + r);
            triples.push_back({static_cast<int32_t>(i), static_cast<int32_t>(o), static_cast<int32_t>(d)});
        }
    }
    std::sort(triples.begin(), triples.end(), [](const KernelMap::Triple& a, const KernelMap::Triple& b) {
        return std::tie(a.offset_idx, a.out_idx, a.in_idx) < std::tie(b.offset_idx, b.out_idx, b.in_idx);
    });
    return triples;
}

template <class T>
FeatureMatrix<T> dense_conv(std::span<const Coord3> in, const FeatureMatrix<T>& feats, std::span<const Coord3> out,
                            const FeatureMatrix<T>& kernel, const Eigen::Matrix<T, 1, Eigen::Dynamic>& bias,
                            int kernel_size, int step) {
    const Eigen::Index cin = feats.cols();
    const Eigen::Index cout = kernel.cols();
    FeatureMatrix<T> result = FeatureMatrix<T>::Zero(static_cast<Eigen::Index>(out.size()), cout);
    if (bias.size() > 0) result.rowwise() += bias;
    if (in.empty() || out.empty()) return result;

    // Volume spanning the inputs; taps outside it read zeros.
    Coord3 lo = in[0];
    Coord3 hi = in[0];
    for (const Coord3& c : in) {
        lo = {std::min(lo.x, c.x), std::min(lo.y, c.y), std::min(lo.z, c.z)};
        hi = {std::max(hi.x, c.x), std::max(hi.y, c.y), std::max(hi.z, c.z)};
    }
    const int64_t nx = hi.x - lo.x + 1;
    const int64_t ny = hi.y - lo.y + 1;
    const int64_t nz = hi.z - lo.z + 1;
    std::vector<T> volume(static_cast<size_t>(nx * ny * nz * cin), T(0));
    auto cell = [&](int64_t x, int64_t y, int64_t z) { return ((x * ny + y) * nz + z) * cin; };
    for (size_t i = 0; i < in.size(); ++i) {
        const int64_t base = cell(in[i].x - lo.x, in[i].y - lo.y, in[i].z - lo.z);
        for (Eigen::Index c = 0; c < cin; ++c) volume[static_cast<size_t>(base + c)] += feats(static_cast<Eigen::Index>(i), c);
    }

    const int r = (kernel_size - 1) / 2;
    for (size_t o = 0; o < out.size(); ++o) {
        int64_t d = 0;
        for (int a = -r; a <= r; ++a) {
            for (int b = -r; b <= r; ++b) {
                for (int e = -r; e <= r; ++e, ++d) {
                    const int64_t x = int64_t{out[o].x} + int64_t{a} * step - lo.x;
                    const int64_t y = int64_t{out[o].y} + int64_t{b} * step - lo.y;
                    const int64_t z = int64_t{out[o].z} + int64_t{e} * step - lo.z;
                    if (x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz) continue;
                    const int64_t base = cell(x, y, z);
                    for (Eigen::Index ci = 0; ci < cin; ++ci) {
                        const T v = volume[static_cast<size_t>(base + ci)];
                        for (Eigen::Index co = 0; co < cout; ++co) {
                            result(static_cast<Eigen::Index>(o), co) += kernel(d * cin + ci, co) * v;
                        }
                    }
                }
            }
        }
    }
    return result;
}

template FeatureMatrix<float> dense_conv<float>(std::span<const Coord3>, const FeatureMatrix<float>&,
                                                std::span<const Coord3>, const FeatureMatrix<float>&,
                                                const Eigen::Matrix<float, 1, Eigen::Dynamic>&, int, int);
template FeatureMatrix<double> dense_conv<double>(std::span<const Coord3>, const FeatureMatrix<double>&,
                                                  std::span<const Coord3>, const FeatureMatrix<double>&,
                                                  const Eigen::Matrix<double, 1, Eigen::Dynamic>&, int, int);

namespace {

int64_t floor_to(int64_t v, int64_t f) {
    int64_t q = v / f;
    if (v % f != 0 && v < 0) --q;
    return q * f;
}

}  // namespace

std::vector<Coord3> brute_downsample(std::span<const Coord3> coords, int factor) {
    std::set<Coord3> s;
    for (const Coord3& c : coords) {
        s.insert({static_cast<int32_t>(floor_to(c.x, factor)), static_cast<int32_t>(floor_to(c.y, factor)),
                  static_cast<int32_t>(floor_to(c.z, factor))});
    }
    return {s.begin(), s.end()};
}

std::vector<int32_t> brute_parent(std::span<const Coord3> low, int low_stride, std::span<const Coord3> targets) {
    std::vector<int32_t> out(targets.size(), -1);
    for (size_t t = 0; t < targets.size(); ++t) {
        const Coord3 p{static_cast<int32_t>(floor_to(targets[t].x, low_stride)),
                       static_cast<int32_t>(floor_to(targets[t].y, low_stride)),
                       static_cast<int32_t>(floor_to(targets[t].z, low_stride))};
        for (size_t i = 0; i < low.size(); ++i) {
            if (low[i] == p) {
                out[t] = static_cast<int32_t>(i);
                break;
            }
        }
    }
    return out;
}

std::map<Coord3, std::pair<int, std::vector<double>>> brute_voxelize(const Eigen::MatrixXd& positions,
                                                                       const Eigen::MatrixXd& features,
                                                                       const Vec3& voxel_size) {
    std::map<Coord3, std::pair<int, std::vector<double>>> cells;
    for (Eigen::Index i = 0; i < positions.rows(); ++i) {
        const Coord3 c{static_cast<int32_t>(std::floor(positions(i, 0) / voxel_size[0])),
                       static_cast<int32_t>(std::floor(positions(i, 1) / voxel_size[1])),
                       static_cast<int32_t>(std::floor(positions(i, 2) / voxel_size[2]))};
        auto& [count, sum] = cells[c];
        if (sum.empty()) sum.assign(static_cast<size_t>(features.cols()), 0.0);
        ++count;
        for (Eigen::Index f = 0; f < features.cols(); ++f) sum[static_cast<size_t>(f)] += features(i, f);
    }
    for (auto& [c, v] : cells) {
        for (double& x : v.second) x /= v.first;
    }
    return cells;
}

std::array<Vec3, 8> box_corners(const Box3D& b) {
    const double r00 = std::cos(b.theta), r01 = -std::sin(b.theta);
    const double r10 = std::sin(b.theta), r11 = std::cos(b.theta);
    std::array<Vec3, 8> out;
    int n = 0;
    for (double sx : {-0.5, 0.5}) {
        for (double sy : {-0.5, 0.5}) {
            for (double sz : {-0.5, 0.5}) {
                const double x = sx * b.w;
                const double y = sy * b.l;
                out[n++] = {b.cx + r00 * x + r01 * y, b.cy + r10 * x + r11 * y, b.cz + sz * b.h};
            }
        }
    }
    return out;
}

bool contains_halfspace(const Box3D& b, const Vec3& p, double eps) {
    const auto c = box_corners(b);
    // Faces as (three corner indices wound so the cross product points
    // outward, using corner bits x:4 y:2 z:1).
    static constexpr int faces[6][3] = {{0, 1, 2}, {4, 6, 5}, {0, 4, 1}, {2, 3, 6}, {0, 2, 4}, {1, 5, 3}};
    const Vec3 center{b.cx, b.cy, b.cz};
    for (const auto& f : faces) {
        const Vec3& a = c[f[0]];
        const Vec3 u{c[f[1]][0] - a[0], c[f[1]][1] - a[1], c[f[1]][2] - a[2]};
        const Vec3 v{c[f[2]][0] - a[0], c[f[2]][1] - a[1], c[f[2]][2] - a[2]};
        Vec3 n{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
        // Orient away from the center regardless of winding.
        const double toward = n[0] * (center[0] - a[0]) + n[1] * (center[1] - a[1]) + n[2] * (center[2] - a[2]);
        if (toward > 0) n = {-n[0], -n[1], -n[2]};
        const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
        const double s = (n[0] * (p[0] - a[0]) + n[1] * (p[1] - a[1]) + n[2] * (p[2] - a[2])) / len;
        if (s > eps) return false;
    }
    return true;
}

double monte_carlo_iou(const Box3D& a, const Box3D& b, int samples, Rng& rng) {
    Vec3 lo{1e300, 1e300, 1e300};
    Vec3 hi{-1e300, -1e300, -1e300};
    for (const Box3D* bx : {&a, &b}) {
        for (const Vec3& c : box_corners(*bx)) {
            for (int k = 0; k < 3; ++k) {
                lo[k] = std::min(lo[k], c[k]);
                hi[k] = std::max(hi[k], c[k]);
            }
        }
    }
    // Inline frame tests; contains_halfspace is too slow for 1e6 samples.
    auto inside = [](const Box3D& bx, double x, double y, double z) {
        const double dx = x - bx.cx;
        const double dy = y - bx.cy;
        const double c = std::cos(bx.theta);
        const double s = std::sin(bx.theta);
        return std::abs(c * dx + s * dy) <= 0.5 * bx.w && std::abs(-s * dx + c * dy) <= 0.5 * bx.l &&
               std::abs(z - bx.cz) <= 0.5 * bx.h;
    };
    int64_t in_a = 0, in_b = 0, both = 0;
    for (int i = 0; i < samples; ++i) {
        const double x = rng.uniform(lo[0], hi[0]);
        const double y = rng.uniform(lo[1], hi[1]);
        const double z = rng.uniform(lo[2], hi[2]);
        const bool ia = inside(a, x, y, z);
        const bool ib = inside(b, x, y, z);
        in_a += ia;
        in_b += ib;
        both += ia && ib;
    }
    const int64_t uni = in_a + in_b - both;
    return uni == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(uni);
}

std::vector<int> brute_assign(std::span<const Vec3> points, std::span<const Box3D> boxes) {
    std::vector<int> out(points.size(), -1);
    for (size_t i = 0; i < points.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (size_t b = 0; b < boxes.size(); ++b) {
            const double v = boxes[b].w * boxes[b].l * boxes[b].h;
            if (v < best && contains_halfspace(boxes[b], points[i])) {
                best = v;
                out[i] = static_cast<int>(b);
            }
        }
    }
    return out;
}

std::vector<size_t> brute_nms(std::span<const Box3D> boxes, std::span<const double> scores, double score_min,
                              double iou_thresh) {
    std::vector<size_t> remaining;
    for (size_t i = 0; i < boxes.size(); ++i) {
        if (scores[i] >= score_min) remaining.push_back(i);
    }
    std::vector<size_t> kept;
    while (!remaining.empty()) {
        size_t best = 0;
        for (size_t k = 1; k < remaining.size(); ++k) {
            if (scores[remaining[k]] > scores[remaining[best]]) best = k;
        }
        const size_t pick = remaining[best];
        kept.push_back(pick);
        std::vector<size_t> rest;
        for (size_t k : remaining) {
            if (k != pick && iou3d(boxes[pick], boxes[k]) <= iou_thresh) rest.push_back(k);
        }
        remaining.swap(rest);
    }
    return kept;
}

std::vector<std::pair<size_t, size_t>> brute_select(std::span<const Box3D> proposals, std::span<const Box3D> gt,
                                                    double iou_min, size_t cap) {
    struct Row {
        size_t p, g;
        double iou;
    };
    std::vector<Row> rows;
    for (size_t p = 0; p < proposals.size(); ++p) {
        double best = -1.0;
        size_t arg = 0;
        for (size_t g = 0; g < gt.size(); ++g) {
            const double v = iou3d(proposals[p], gt[g]);
            if (v > best) {
                best = v;
                arg = g;
            }
        }
        if (best > iou_min) rows.push_back({p, arg, best});
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        return a.iou != b.iou ? a.iou > b.iou : a.p < b.p;
    });
    if (rows.size() > cap) rows.resize(cap);
    std::vector<std::pair<size_t, size_t>> out;
    for (const Row& r : rows) out.emplace_back(r.p, r.g);
    return out;
}

std::vector<double> reference_ap(const std::vector<std::vector<Detection>>& predictions,
                                 const std::vector<std::vector<GtBox>>& gt, int num_classes, double iou_thresh) {
    std::vector<double> out(static_cast<size_t>(num_classes) + 1, std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        struct Item {
            double score;
            size_t scene, order;
            Box3D box;
        };
        std::vector<Item> items;
        int n_gt = 0;
        for (size_t s = 0; s < gt.size(); ++s) {
            for (size_t k = 0; k < predictions[s].size(); ++k) {
                if (predictions[s][k].class_id == c) items.push_back({predictions[s][k].score, s, k, predictions[s][k].box});
            }
            for (const GtBox& g : gt[s]) n_gt += g.class_id == c;
        }
        if (n_gt == 0) continue;
        std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.scene != b.scene) return a.scene < b.scene;
            return a.order < b.order;
        });
        std::set<std::pair<size_t, size_t>> matched;
        std::vector<char> is_tp;
        for (const Item& it : items) {
            double best = -1.0;
            size_t arg = 0;
            for (size_t g = 0; g < gt[it.scene].size(); ++g) {
                if (gt[it.scene][g].class_id != c) continue;
                const double v = iou3d(it.box, gt[it.scene][g].box);
                if (v > best) {
                    best = v;
                    arg = g;
                }
            }
            const bool tp = best >= iou_thresh && matched.insert({it.scene, arg}).second;
            is_tp.push_back(tp);
        }
        // Precision after each rank, then the interpolated value at each
        // true positive is the best precision at that rank or later.
        std::vector<double> prec(is_tp.size());
        int tp = 0;
        for (size_t k = 0; k < is_tp.size(); ++k) {
            tp += is_tp[k];
            prec[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
        }
        double ap = 0.0;
        for (size_t k = 0; k < is_tp.size(); ++k) {
            if (!is_tp[k]) continue;
            double best = 0.0;
            for (size_t m = k; m < prec.size(); ++m) best = std::max(best, prec[m]);
            ap += best / n_gt;
        }
        out[static_cast<size_t>(c)] = ap;
        sum += ap;
        ++counted;
    }
    out.back() = counted > 0 ? sum / counted : 0.0;
    return out;
}

double focal_formula(const Eigen::MatrixXd& probs, std::span<const int> targets, double gamma, double alpha) {
    constexpr double eps = 1e-7;
    double total = 0.0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        for (Eigen::Index j = 0; j < probs.cols(); ++j) {
            const double p = std::min(std::max(probs(i, j), eps), 1.0 - eps);
            const double pt = targets[static_cast<size_t>(i)] == j ? p : 1.0 - p;
            total += -alpha * std::pow(1.0 - pt, gamma) * std::log(pt);
        }
    }
    return probs.rows() == 0 ? 0.0 : total / static_cast<double>(probs.rows());
}

double smooth_l1_formula(std::span<const double> x, double beta) {
    double total = 0.0;
    for (double v : x) total += std::abs(v) < beta ? 0.5 * v * v / beta : std::abs(v) - 0.5 * beta;
    return x.empty() ? 0.0 : total / static_cast<double>(x.size());
}

std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                 double h) {
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double fp = f(x);
        x[i] = keep - h;
        const double fm = f(x);
        x[i] = keep;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

double rel_err(std::span<const double> a, std::span<const double> b, double floor) {
    if (a.size() != b.size()) throw std::invalid_argument("rel_err: size mismatch");
    double diff = 0.0, scale = floor;
    for (size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(a[i] - b[i]));
        scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    }
    return diff / scale;
}

}  // namespace sparsedet3d::oracle
