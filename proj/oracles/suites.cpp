// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "sparsedet3d/eval.hpp"
#include "sparsedet3d/geometry.hpp"
#include "sparsedet3d/losses.hpp"
#include "sparsedet3d/oracle.hpp"
#include "sparsedet3d/proposal.hpp"
#include "sparsedet3d/roipool.hpp"
#include "sparsedet3d/voxelizer.hpp"

namespace sparsedet3d::oracle {
namespace {

using Clock = std::chrono::steady_clock;

class Timer {
public:
    double seconds() const { return std::chrono::duration<double>(Clock::now() - t0_).count(); }

private:
    Clock::time_point t0_ = Clock::now();
};

SuiteResult finish(std::string name, double worst, double tol, int cases, const Timer& timer, bool ok = true,
                   std::string extra = {}) {
    SuiteResult r;
    r.name = std::move(name);
    r.worst = worst;
    r.tol = tol;
    r.cases = cases;
    r.seconds = timer.seconds();
    r.passed = ok && worst <= tol;
    std::ostringstream os;
    os << cases << " cases, worst " << worst << " (tol " << tol << ")";
    if (!extra.empty()) os << ", " << extra;
    r.detail = os.str();
    return r;
}

std::vector<Coord3> random_coords(Rng& rng, size_t n, int extent, int stride = 1) {
    std::set<Coord3> seen;
    std::vector<Coord3> out;
    const int cells = extent / stride;
    const size_t cap = static_cast<size_t>(cells) * cells * cells;
    n = std::min(n, cap);
    while (out.size() < n) {
        const Coord3 c{static_cast<int32_t>(rng.below(cells)) * stride, static_cast<int32_t>(rng.below(cells)) * stride,
                       static_cast<int32_t>(rng.below(cells)) * stride};
        if (seen.insert(c).second) out.push_back(c);
    }
    return out;
}

std::vector<Coord3> occupancy_coords(Rng& rng, int grid, double occupancy) {
    std::vector<Coord3> out;
    for (int x = 0; x < grid; ++x) {
        for (int y = 0; y < grid; ++y) {
            for (int z = 0; z < grid; ++z) {
                if (occupancy >= 1.0 || rng.uniform() < occupancy) out.push_back({x, y, z});
            }
        }
    }
    if (out.empty()) out.push_back({0, 0, 0});
    // Shuffle so the row order is unrelated to the lattice order.
    for (size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
    return out;
}

template <class T>
FeatureMatrix<T> random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    FeatureMatrix<T> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-scale, scale));
    return m;
}

template <class T>
ConvWeights<T> random_weights(Rng& rng, int k, Eigen::Index cin, Eigen::Index cout, bool bias) {
    ConvWeights<T> w(k, cin, cout, bias);
    w.kernel = random_matrix<T>(rng, w.kernel.rows(), w.kernel.cols());
    if (bias) w.bias = random_matrix<T>(rng, 1, cout);
    return w;
}

Box3D random_box(Rng& rng, double extent = 2.0) {
    return {rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(-extent, extent),
            rng.uniform(0.2, 1.5),        rng.uniform(0.2, 1.5),        rng.uniform(0.2, 1.5),
            rng.uniform(-std::numbers::pi, std::numbers::pi)};
}

Box3D jitter_box(Rng& rng, const Box3D& a, double amount) {
    return {a.cx + rng.uniform(-amount, amount) * a.w,
            a.cy + rng.uniform(-amount, amount) * a.l,
            a.cz + rng.uniform(-amount, amount) * a.h,
            a.w * std::exp(rng.uniform(-amount, amount)),
            a.l * std::exp(rng.uniform(-amount, amount)),
            a.h * std::exp(rng.uniform(-amount, amount)),
            wrap_angle(a.theta + rng.uniform(-amount, amount))};
}

double box_diff(const Box3D& a, const Box3D& b) {
    const double d[] = {a.cx - b.cx, a.cy - b.cy, a.cz - b.cz, a.w - b.w, a.l - b.l, a.h - b.h,
                        wrap_angle(a.theta - b.theta)};
    double m = 0.0;
    for (double x : d) m = std::max(m, std::abs(x));
    return m;
}

std::vector<double> flat(const Matrix& m) { return {m.data(), m.data() + m.size()}; }

Matrix unflat(const std::vector<double>& v, Eigen::Index r, Eigen::Index c) {
    return Eigen::Map<const Matrix>(v.data(), r, c);
}

template <class T>
double sparse_vs_dense_case(Rng& rng, int grid, double occupancy, int k, bool submanifold) {
    const std::vector<Coord3> in = occupancy_coords(rng, grid, occupancy);
    const auto cin = static_cast<Eigen::Index>(1 + rng.below(6));
    const auto cout = static_cast<Eigen::Index>(1 + rng.below(6));
    SparseTensor<T> x;
    x.coords = in;
    x.feats = random_matrix<T>(rng, static_cast<Eigen::Index>(in.size()), cin);
    const ConvWeights<T> w = random_weights<T>(rng, k, cin, cout, true);
    std::vector<Coord3> out = in;
    if (!submanifold) {
        // Arbitrary output sites, some of them empty in the input.
        out = random_coords(rng, std::max<size_t>(1, in.size() / 2), grid);
    }
    const SparseTensor<T> y = sparse_conv_forward(x, w, out, k);
    if (y.coords != out) return 1e300;

    const FeatureMatrix<double> ref =
        dense_conv<double>(in, x.feats.template cast<double>(), out, w.kernel.template cast<double>(),
                           w.bias.template cast<double>(), k, 1);
    const FeatureMatrix<double> got = y.feats.template cast<double>();
    return rel_err(flat(got), flat(ref));
}

template <class T>
double conv_gradient_case(Rng& rng) {
    const size_t n = 20 + rng.below(100);
    const std::vector<Coord3> in = random_coords(rng, n, 6);
    const bool strided = rng.uniform() < 0.5;
    const std::vector<Coord3> out = strided ? strided_downsample_coords(in, 2) : in;
    const Eigen::Index cin = 3, cout = 2;
    const int k = 3;
    Rng wr(rng.next());
    const ConvWeights<double> w64 = random_weights<double>(wr, k, cin, cout, true);
    const Matrix feats = random_matrix<double>(rng, static_cast<Eigen::Index>(in.size()), cin);
    const Matrix proj = random_matrix<double>(rng, static_cast<Eigen::Index>(out.size()), cout);

    // Analytic gradients at the requested precision.
    SparseTensor<T> x;
    x.coords = in;
    x.feats = feats.cast<T>();
    ConvWeights<T> w(k, cin, cout, true);
    w.kernel = w64.kernel.cast<T>();
    w.bias = w64.bias.cast<T>();
    const ConvResult<T> fwd = sparse_conv_forward_plan(x, w, out, strided ? 2 : 1);
    const ConvGrads<T> g = sparse_conv_backward(x, w, fwd.kmap, FeatureMatrix<T>(proj.cast<T>()));

    // Finite differences of L = sum(proj .* conv(x)) in f64 through the
    // dense oracle.
    auto loss = [&](const Matrix& f, const Matrix& kern, const Eigen::Matrix<double, 1, Eigen::Dynamic>& b) {
        return (dense_conv<double>(in, f, out, kern, b, k, 1).array() * proj.array()).sum();
    };
    const double h = 1e-6;
    const auto g_in = central_diff([&](const std::vector<double>& v) { return loss(unflat(v, feats.rows(), cin), w64.kernel, w64.bias); },
                                   flat(feats), h);
    const auto g_k = central_diff(
        [&](const std::vector<double>& v) { return loss(feats, unflat(v, w64.kernel.rows(), cout), w64.bias); },
        flat(w64.kernel), h);
    const auto g_b = central_diff(
        [&](const std::vector<double>& v) { return loss(feats, w64.kernel, unflat(v, 1, cout)); },
        std::vector<double>(w64.bias.data(), w64.bias.data() + cout), h);

    const Matrix a_in = g.grad_input.template cast<double>();
    const Matrix a_k = g.grad_weights.kernel.template cast<double>();
    const Matrix a_b = g.grad_weights.bias.template cast<double>();
    return std::max({rel_err(flat(a_in), g_in), rel_err(flat(a_k), g_k), rel_err(flat(a_b), g_b)});
}

}  // namespace

SuiteResult suite_sparse_vs_dense(Precision p, uint64_t seed, int instances, double tol) {
    Timer timer;
    Rng rng(seed);
    const double occ[] = {0.05, 0.3, 1.0};
    const int ks[] = {1, 3, 5};
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        const int grid = 4 + static_cast<int>(rng.below(13));  // up to 16^3
        const double o = occ[i % 3];
        const int k = ks[(i / 3) % 3];
        const bool sub = (i / 9) % 2 == 0;
        const double e = p == Precision::f32 ? sparse_vs_dense_case<float>(rng, grid, o, k, sub)
                                             : sparse_vs_dense_case<double>(rng, grid, o, k, sub);
        worst = std::max(worst, e);
    }
    return finish(std::string("sparse_vs_dense_") + to_string(p), worst, tol, instances, timer);
}

SuiteResult suite_kernel_map(uint64_t seed, int instances) {
    Timer timer;
    Rng rng(seed);
    int mismatches = 0;
    for (int i = 0; i < instances; ++i) {
        const int k = 1 + 2 * static_cast<int>(rng.below(3));
        const int dil = 1 + static_cast<int>(rng.below(2));
        const auto in = random_coords(rng, 50, 8);
        const auto out = rng.uniform() < 0.5 ? in : random_coords(rng, 40, 8);
        const KernelMap km = build_kernel_map(in, out, k, dil);
        const auto ref = brute_kernel_map(in, out, k, dil);
        bool ok = km.triples == ref && km.bucket_begin.size() == static_cast<size_t>(km.n_offsets) + 1 &&
                  km.bucket_begin.back() == static_cast<int64_t>(km.triples.size());
        for (int d = 0; ok && d < km.n_offsets; ++d) {
            for (int64_t t = km.bucket_begin[d]; t < km.bucket_begin[d + 1]; ++t) ok = ok && km.triples[t].offset_idx == d;
        }
        mismatches += !ok;
    }
    return finish("kernel_map_vs_bruteforce", mismatches, 0, instances, timer);
}

SuiteResult suite_conv_gradient(Precision p, uint64_t seed, int instances, double tol) {
    Timer timer;
    Rng rng(seed);
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        worst = std::max(worst, p == Precision::f32 ? conv_gradient_case<float>(rng) : conv_gradient_case<double>(rng));
    }
    return finish(std::string("conv_backward_fd_") + to_string(p), worst, tol, instances, timer);
}

SuiteResult suite_downsample_upsample(uint64_t seed, int instances) {
    Timer timer;
    Rng rng(seed);
    int bad = 0;
    for (int i = 0; i < instances; ++i) {
        auto coords = random_coords(rng, 1 + rng.below(200), 24);
        for (Coord3& c : coords) c = c - Coord3{12, 12, 12};  // include negatives
        const int factor = 2 << rng.below(3);
        auto got = strided_downsample_coords(coords, factor);
        std::sort(got.begin(), got.end());
        bad += got != brute_downsample(coords, factor);

        // Upsample from a random subset of the coarse cells.
        SparseTensor<double> low;
        low.stride = factor;
        for (const Coord3& c : brute_downsample(coords, factor)) {
            if (rng.uniform() < 0.7) low.coords.push_back(c);
        }
        low.feats = random_matrix<double>(rng, static_cast<Eigen::Index>(low.coords.size()), 3);
        std::vector<int32_t> parents;
        const SparseTensor<double> up = upsample_interpolate(low, coords, 1, &parents);
        const auto ref = brute_parent(low.coords, factor, coords);
        bool ok = parents == ref;
        for (size_t t = 0; ok && t < coords.size(); ++t) {
            const auto row = static_cast<Eigen::Index>(t);
            ok = ref[t] < 0 ? up.feats.row(row).isZero(0.0) : up.feats.row(row) == low.feats.row(ref[t]);
        }
        bad += !ok;
    }
    return finish("downsample_upsample_vs_sets", bad, 0, instances, timer);
}

SuiteResult suite_voxelize(uint64_t seed, int instances) {
    Timer timer;
    Rng rng(seed);
    double worst = 0.0;
    int bad = 0;
    for (int i = 0; i < instances; ++i) {
        const auto n = static_cast<Eigen::Index>(1 + rng.below(500));
        PointCloud cloud;
        cloud.positions.resize(n, 3);
        for (Eigen::Index r = 0; r < n; ++r) {
            for (int a = 0; a < 3; ++a) cloud.positions(r, a) = rng.uniform(-1.0, 1.0);
        }
        cloud.features = random_matrix<double>(rng, n, 2);
        const Vec3 vs{rng.uniform(0.02, 0.3), rng.uniform(0.02, 0.3), rng.uniform(0.02, 0.3)};
        const SparseTensor<double> v = voxelize_avg(cloud, vs);
        const auto ref = brute_voxelize(cloud.positions, cloud.features, vs);
        if (v.size() != ref.size()) {
            ++bad;
            continue;
        }
        for (size_t r = 0; r < v.size(); ++r) {
            auto it = ref.find(v.coords[r]);
            if (it == ref.end()) {
                ++bad;
                break;
            }
            for (size_t f = 0; f < it->second.second.size(); ++f) {
                worst = std::max(worst, std::abs(v.feats(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(f)) -
                                                 it->second.second[f]));
            }
        }

        // Two classes whose sizes differ 4x, re-voxelized on their own grids.
        ClassSizeTable sizes;
        const double base = rng.uniform(0.5, 1.5);
        sizes.dims = {{base, base, base}, {4 * base, 4 * base, 4 * base}};
        for (size_t j = 0; j < 2; ++j) {
            const double alpha = 0.15;
            const SparseTensor<double> cv = class_revoxelize(cloud, j, sizes, alpha);
            const Vec3 cell{alpha * sizes.dims[j].w, alpha * sizes.dims[j].l, alpha * sizes.dims[j].h};
            bad += cv.size() != brute_voxelize(cloud.positions, cloud.features, cell).size();
            bad += cv.voxel_size != cell;
        }
    }
    return finish("voxelize_vs_bruteforce", worst, 1e-12, instances, timer, bad == 0,
                  std::to_string(bad) + " structural mismatches");
}

SuiteResult suite_iou_monte_carlo(uint64_t seed, int pairs, int samples, double tol) {
    Timer timer;
    Rng rng(seed);
    double worst = 0.0;
    double worst_sym = 0.0;
    for (int i = 0; i < pairs; ++i) {
        const Box3D a = random_box(rng);
        Box3D b = random_box(rng);
        // Keep most pairs overlapping.
        b.cx = a.cx + rng.uniform(-0.6, 0.6);
        b.cy = a.cy + rng.uniform(-0.6, 0.6);
        b.cz = a.cz + rng.uniform(-0.4, 0.4);
        const double v = iou3d(a, b);
        worst = std::max(worst, std::abs(v - monte_carlo_iou(a, b, samples, rng)));
        worst_sym = std::max(worst_sym, std::abs(v - iou3d(b, a)));
    }
    return finish("iou_vs_monte_carlo", worst, tol, pairs, timer, worst_sym <= 1e-12,
                  "symmetry " + std::to_string(worst_sym));
}

SuiteResult suite_iou_analytic(double tol) {
    Timer timer;
    const double pi = std::numbers::pi;
    struct Case {
        Box3D a, b;
        double expected;
    };
    const std::vector<Case> cases = {
        {{0, 0, 0, 1, 1, 1, 0}, {0, 0, 0, 1, 1, 1, 0}, 1.0},
        {{0, 0, 0, 1, 1, 1, 0}, {0.5, 0, 0, 1, 1, 1, 0}, 1.0 / 3.0},
        {{0, 0, 0, 1, 1, 1, 0}, {0, 0.5, 0, 1, 1, 1, 0}, 1.0 / 3.0},
        {{0, 0, 0, 1, 1, 1, 0}, {0, 0, 0.5, 1, 1, 1, 0}, 1.0 / 3.0},
        {{0, 0, 0, 1, 1, 1, 0}, {0.5, 0.5, 0, 1, 1, 1, 0}, 0.25 / 1.75},
        {{0, 0, 0, 1, 1, 1, 0}, {2, 0, 0, 1, 1, 1, 0}, 0.0},
        {{0, 0, 0, 2, 2, 2, 0}, {0, 0, 0, 1, 1, 1, 0}, 1.0 / 8.0},
        {{0, 0, 0, 2, 1, 1, 0}, {0, 0, 0, 2, 1, 1, pi / 2}, 1.0 / 3.0},
        {{0, 0, 0, 1, 1, 1, 0}, {0, 0, 0, 1, 1, 1, pi / 2}, 1.0},
        {{0, 0, 0, 1, 1, 1, 0}, {0, 0, 0, 1, 1, 1, pi / 4}, (2 * (std::sqrt(2.0) - 1)) / (2 - 2 * (std::sqrt(2.0) - 1))},
        {{1, 2, 3, 1, 2, 3, 0.3}, {1, 2, 3, 1, 2, 3, 0.3}, 1.0},
    };
    double worst = 0.0;
    for (const Case& c : cases) worst = std::max(worst, std::abs(iou3d(c.a, c.b) - c.expected));
    return finish("iou_analytic_cases", worst, tol, static_cast<int>(cases.size()), timer);
}

SuiteResult suite_contains(uint64_t seed, int instances) {
    Timer timer;
    Rng rng(seed);
    int bad = 0;
    int cases = 0;
    for (int i = 0; i < instances; ++i) {
        const Box3D b = random_box(rng);
        for (int k = 0; k < 100; ++k, ++cases) {
            const Vec3 p{b.cx + rng.uniform(-1, 1), b.cy + rng.uniform(-1, 1), b.cz + rng.uniform(-1, 1)};
            bad += contains(b, p) != contains_halfspace(b, p);
        }
        // Face centers of an axis-aligned copy at the origin lie exactly on
        // the closed boundary (rotation or translation would round them).
        const Box3D aligned{0.0, 0.0, 0.0, b.w, b.l, b.h, 0.0};
        for (const Vec3& q : {Vec3{0.5 * b.w, 0, 0}, Vec3{0, -0.5 * b.l, 0}, Vec3{0, 0, 0.5 * b.h}}) {
            ++cases;
            bad += !contains(aligned, q) || !contains_halfspace(aligned, q);
        }
    }
    return finish("contains_vs_halfspace", bad, 0, cases, timer);
}

SuiteResult suite_loss_gradients(uint64_t seed, int instances, double tol) {
    Timer timer;
    Rng rng(seed);
    const double h = 1e-6;
    double worst_focal = 0, worst_bce = 0, worst_l1 = 0, worst_box = 0, worst_rebox = 0;
    int iou_cases = 0;
    for (int i = 0; i < instances; ++i) {
        // Focal (semantic and classification terms).
        {
            const Eigen::Index n = 10, k = 3;
            const Matrix logits = random_matrix<double>(rng, n, k, 3.0);
            std::vector<int> targets(n);
            for (int& t : targets) t = static_cast<int>(rng.below(k + 1)) - 1;
            const double gamma = rng.uniform(0.0, 3.0);
            const double alpha = rng.uniform(0.1, 1.0);
            const LossGrad lg = focal_loss_logits(logits, targets, gamma, alpha);
            const auto fd = central_diff(
                [&](const std::vector<double>& v) {
                    const Matrix l = unflat(v, n, k);
                    return focal_formula((1.0 / (1.0 + (-l.array()).exp())).matrix(), targets, gamma, alpha);
                },
                flat(logits), h);
            worst_focal = std::max(worst_focal, rel_err(flat(lg.grad), fd));
        }
        // Centerness BCE on logits.
        {
            const Eigen::Index n = 12;
            const Matrix logits = random_matrix<double>(rng, n, 1, 4.0);
            Matrix y(n, 1);
            for (Eigen::Index r = 0; r < n; ++r) y(r, 0) = rng.uniform();
            const LossGrad lg = bce_logits(logits, y);
            const auto fd = central_diff(
                [&](const std::vector<double>& v) {
                    double s = 0.0;
                    for (Eigen::Index r = 0; r < n; ++r) {
                        const double p = 1.0 / (1.0 + std::exp(-v[static_cast<size_t>(r)]));
                        s += -(y(r, 0) * std::log(p) + (1 - y(r, 0)) * std::log(1 - p));
                    }
                    return s / static_cast<double>(n);
                },
                flat(logits), h);
            worst_bce = std::max(worst_bce, rel_err(flat(lg.grad), fd));
        }
        // Vote smooth-l1.
        {
            const Eigen::Index n = 10;
            const Matrix pred = random_matrix<double>(rng, n, 3, 2.0);
            const Matrix target = random_matrix<double>(rng, n, 3, 2.0);
            const double beta = rng.uniform(0.1, 1.0);
            const LossGrad lg = smooth_l1_grad(pred, target, beta);
            const auto fd = central_diff(
                [&](const std::vector<double>& v) {
                    std::vector<double> x(v.size());
                    for (size_t q = 0; q < v.size(); ++q) x[q] = v[q] - target.data()[q];
                    return smooth_l1_formula(x, beta);
                },
                flat(pred), h);
            worst_l1 = std::max(worst_l1, rel_err(flat(lg.grad), fd));
        }
        // Stage-I IoU box term, restricted to IoU in [0.1, 0.9].
        {
            const size_t n = 5;
            std::vector<Vec3> centers, cells, priors;
            std::vector<Box3D> gt;
            Matrix reg(static_cast<Eigen::Index>(n), 8);
            while (gt.size() < n) {
                const Box3D g = random_box(rng);
                const Box3D guess = jitter_box(rng, g, 0.3);
                if (const double v = iou3d(guess, g); v < 0.1 || v > 0.9) continue;
                const Vec3 c{g.cx + rng.uniform(-0.1, 0.1), g.cy + rng.uniform(-0.1, 0.1), g.cz};
                const Vec3 cell{0.15 * g.w, 0.15 * g.l, 0.15 * g.h};
                const Vec3 prior{g.w * rng.uniform(0.8, 1.2), g.l * rng.uniform(0.8, 1.2), g.h * rng.uniform(0.8, 1.2)};
                const BoxCode code = encode_stage_one(guess, c, cell, prior);
                for (int q = 0; q < 8; ++q) reg(static_cast<Eigen::Index>(gt.size()), q) = code[q];
                centers.push_back(c);
                cells.push_back(cell);
                priors.push_back(prior);
                gt.push_back(g);
            }
            const LossGrad lg = box_iou_loss(reg, centers, cells, priors, gt);
            const auto fd = central_diff(
                [&](const std::vector<double>& v) {
                    double s = 0.0;
                    for (size_t r = 0; r < n; ++r) {
                        BoxCode code;
                        for (int q = 0; q < 8; ++q) code[q] = v[r * 8 + q];
                        s += 1.0 - iou3d(decode_stage_one(code, centers[r], cells[r], priors[r]), gt[r]);
                    }
                    return s / static_cast<double>(n);
                },
                flat(reg), h);
            worst_box = std::max(worst_box, rel_err(flat(lg.grad), fd));
            iou_cases += static_cast<int>(n);
        }
        // Refinement residual term.
        {
            const size_t n = 5;
            std::vector<Box3D> props, gt;
            Matrix pred(static_cast<Eigen::Index>(n), 8);
            while (gt.size() < n) {
                const Box3D g = random_box(rng);
                const Box3D p = jitter_box(rng, g, 0.3);
                Residual t = encode_residual(g, p);
                for (double& x : t) x += rng.uniform(-0.1, 0.1);
                if (const double v = iou3d(decode_residual(t, p), g); v < 0.1 || v > 0.9) continue;
                for (int q = 0; q < 8; ++q) pred(static_cast<Eigen::Index>(gt.size()), q) = t[q];
                props.push_back(p);
                gt.push_back(g);
            }
            const LossGrad lg = rebox_loss(pred, props, gt);
            const auto fd = central_diff(
                [&](const std::vector<double>& v) {
                    double s = 0.0;
                    for (size_t r = 0; r < n; ++r) {
                        const Residual target = encode_residual(gt[r], props[r]);
                        Residual t;
                        std::vector<double> x(8);
                        for (int q = 0; q < 8; ++q) {
                            t[q] = v[r * 8 + q];
                            x[q] = t[q] - target[q];
                        }
                        s += 8.0 * smooth_l1_formula(x, 1.0) + 1.0 - iou3d(decode_residual(t, props[r]), gt[r]);
                    }
                    return s / static_cast<double>(n);
                },
                flat(pred), h);
            worst_rebox = std::max(worst_rebox, rel_err(flat(lg.grad), fd));
        }
    }
    const double worst = std::max({worst_focal, worst_bce, worst_l1, worst_box, worst_rebox});
    std::ostringstream os;
    os << "focal " << worst_focal << ", cntr " << worst_bce << ", vote " << worst_l1 << ", box " << worst_box
       << " (" << iou_cases << " rows), rebox " << worst_rebox;
    return finish("loss_gradients_fd", worst, tol, instances, timer, true, os.str());
}

SuiteResult suite_loss_formulas(uint64_t seed, int instances, double tol) {
    Timer timer;
    Rng rng(seed);
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(20));
        const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng.below(4));
        Matrix probs(n, k);
        for (Eigen::Index q = 0; q < probs.size(); ++q) probs.data()[q] = rng.uniform();
        std::vector<int> targets(static_cast<size_t>(n));
        for (int& t : targets) t = static_cast<int>(rng.below(k + 1)) - 1;
        const double gamma = rng.uniform(0.0, 3.0);
        const double alpha = rng.uniform(0.1, 1.0);
        const double ref = focal_formula(probs, targets, gamma, alpha);
        worst = std::max(worst, std::abs(focal_loss(probs, targets, gamma, alpha) - ref) / std::max(1.0, ref));

        // gamma = 0, alpha = 1 reduces to binary cross-entropy summed over columns.
        Matrix onehot = Matrix::Zero(n, k);
        for (Eigen::Index r = 0; r < n; ++r) {
            if (targets[static_cast<size_t>(r)] >= 0) onehot(r, targets[static_cast<size_t>(r)]) = 1.0;
        }
        const double bce = binary_cross_entropy(probs, onehot) * static_cast<double>(k);
        worst = std::max(worst, std::abs(focal_loss(probs, targets, 0.0, 1.0) - bce) / std::max(1.0, bce));

        std::vector<double> a(static_cast<size_t>(n)), b(static_cast<size_t>(n)), x(static_cast<size_t>(n));
        for (size_t q = 0; q < a.size(); ++q) {
            a[q] = rng.uniform(-3, 3);
            b[q] = rng.uniform(-3, 3);
            x[q] = a[q] - b[q];
        }
        const double beta = rng.uniform(0.1, 2.0);
        worst = std::max(worst, std::abs(smooth_l1(a, b, beta) - smooth_l1_formula(x, beta)));
    }
    return finish("loss_formulas", worst, tol, instances, timer);
}

SuiteResult suite_grouping(uint64_t seed, int instances) {
    Timer timer;
    Rng rng(seed);
    int bad = 0;
    std::string first_failure;
    auto fail = [&](const std::string& what, int i) {
        if (first_failure.empty()) first_failure = what + " (instance " + std::to_string(i) + ")";
        ++bad;
    };
    size_t triples = 0;
    for (int i = 0; i < instances; ++i) {
        const auto n = static_cast<Eigen::Index>(50 + rng.below(250));
        const Eigen::Index k = 3;
        PositionMatrix votes(n, 3);
        Matrix scores(n, k);
        for (Eigen::Index r = 0; r < n; ++r) {
            for (int a = 0; a < 3; ++a) votes(r, a) = rng.uniform(-1.0, 1.0);
            for (Eigen::Index j = 0; j < k; ++j) scores(r, j) = std::pow(rng.uniform(), 2.0);
        }
        ClassSizeTable sizes;
        for (Eigen::Index j = 0; j < k; ++j) sizes.dims.push_back({rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)});
        const double tau = rng.uniform(0.05, 0.6);
        const double alpha = 0.15;
        const auto groups = slice_and_revoxelize(votes, scores, tau, alpha, sizes, 9);
        if (groups.size() != static_cast<size_t>(k)) {
            fail("group count", i);
            continue;
        }
        for (Eigen::Index j = 0; j < k; ++j) {
            const ClassGroup& g = groups[static_cast<size_t>(j)];
            std::vector<int32_t> expect;
            for (Eigen::Index r = 0; r < n; ++r) {
                if (scores(r, j) > tau) expect.push_back(static_cast<int32_t>(r));
            }
            if (g.members != expect) fail("slice != predicate", i);
            const ClassSize& d = sizes.dims[static_cast<size_t>(j)];
            if (g.cell != Vec3{alpha * d.w, alpha * d.l, alpha * d.h}) fail("cell != alpha * d_j", i);

            // Class-grid cells of the members, by direct floor division.
            std::set<Coord3> cells;
            for (size_t m = 0; m < g.members.size(); ++m) {
                const Coord3 c{static_cast<int32_t>(std::floor(votes(g.members[m], 0) / g.cell[0])),
                               static_cast<int32_t>(std::floor(votes(g.members[m], 1) / g.cell[1])),
                               static_cast<int32_t>(std::floor(votes(g.members[m], 2) / g.cell[2]))};
                cells.insert(c);
                if (g.coords.at(static_cast<size_t>(g.member_voxel[m])) != c) fail("member voxel", i);
            }
            if (cells != std::set<Coord3>(g.coords.begin(), g.coords.end()) || cells.size() != g.coords.size()) {
                fail("class voxels", i);
            }
            // Aggregation neighborhoods equal the brute-force map, and every
            // neighbor voxel holds only in-class votes.
            if (!g.kmap || g.kmap->triples != brute_kernel_map(g.coords, g.coords, 9, 1)) fail("kernel map", i);
            std::vector<char> voxel_ok(g.coords.size(), 1);
            for (size_t m = 0; m < g.members.size(); ++m) {
                if (!(scores(g.members[m], j) > tau)) voxel_ok[static_cast<size_t>(g.member_voxel[m])] = 0;
            }
            if (g.kmap) {
                for (const auto& t : g.kmap->triples) {
                    if (!voxel_ok[static_cast<size_t>(t.in_idx)]) fail("out-of-class neighbor", i);
                }
                triples += g.kmap->triples.size();
            }
        }
    }
    return finish("grouping_semantics", bad, 0, instances, timer, true,
                  std::to_string(triples) + " neighbor triples" + (first_failure.empty() ? "" : "; " + first_failure));
}

SuiteResult suite_roi_abstraction(uint64_t seed, int instances, double tol) {
    Timer timer;
    Rng rng(seed);
    double worst = 0.0;
    int bad = 0;
    for (int i = 0; i < instances; ++i) {
        const int stride = 1 << rng.below(2);
        const Vec3 vs{0.05, 0.05, 0.05};
        SparseTensor<double> x;
        x.stride = stride;
        x.voxel_size = vs;
        x.coords = random_coords(rng, 150, 24, stride);
        x.feats = random_matrix<double>(rng, static_cast<Eigen::Index>(x.coords.size()), 4);
        std::vector<Box3D> boxes;
        const size_t nb = 1 + rng.below(3);
        for (size_t b = 0; b < nb; ++b) {
            boxes.push_back({rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(0.2, 0.6),
                             rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6), rng.uniform(-3.0, 3.0)});
        }
        if (rng.uniform() < 0.3) boxes.push_back({5.0, 5.0, 5.0, 0.3, 0.3, 0.3, 0.0});  // empty space
        const std::array<int, 3> res{3, 3, 3};
        const int k = 3;
        Rng wr(rng.next());
        const ConvWeights<double> w = random_weights<double>(wr, k, 4, 5, true);
        GridSample grid;
        const ConvResult<double> got = sparse_abstraction(x, boxes, res, w, &grid);

        // Grid points from the cell-center formula, merged in first-seen order.
        std::vector<Coord3> pts;
        std::set<Coord3> seen;
        for (const Box3D& b : boxes) {
            const double c = std::cos(b.theta), s = std::sin(b.theta);
            for (int a = 0; a < res[0]; ++a) {
                for (int bb = 0; bb < res[1]; ++bb) {
                    for (int e = 0; e < res[2]; ++e) {
                        const double u = ((a + 0.5) / res[0] - 0.5) * b.w;
                        const double v = ((bb + 0.5) / res[1] - 0.5) * b.l;
                        const double z = ((e + 0.5) / res[2] - 0.5) * b.h;
                        const Vec3 p{b.cx + c * u - s * v, b.cy + s * u + c * v, b.cz + z};
                        Coord3 q{};
                        for (int ax = 0; ax < 3; ++ax) {
                            const auto cell = static_cast<int64_t>(std::floor(p[ax] / vs[ax]));
                            (&q.x)[ax] = static_cast<int32_t>(cell >= 0 ? cell / stride * stride : -((-cell + stride - 1) / stride) * stride);
                        }
                        if (seen.insert(q).second) pts.push_back(q);
                    }
                }
            }
        }
        if (grid.points != pts) {
            ++bad;
            continue;
        }
        // Keep only points with at least one occupied neighbor.
        std::vector<Coord3> kept;
        for (const Coord3& q : pts) {
            bool any = false;
            for (const Coord3& c : x.coords) {
                any = any || (std::abs(c.x - q.x) <= stride && std::abs(c.y - q.y) <= stride &&
                              std::abs(c.z - q.z) <= stride);
            }
            if (any) kept.push_back(q);
        }
        if (got.output.coords != kept) {
            ++bad;
            continue;
        }
        const Matrix ref = dense_conv<double>(x.coords, x.feats, kept, w.kernel, w.bias, k, stride);
        worst = std::max(worst, rel_err(flat(got.output.feats), flat(ref)));
    }
    return finish("roi_abstraction_compositional", worst, tol, instances, timer, bad == 0,
                  std::to_string(bad) + " structural mismatches");
}

SuiteResult suite_round_trips(uint64_t seed, int pairs, double tol) {
    Timer timer;
    Rng rng(seed);
    double worst = 0.0;
    double worst_unit = 0.0;
    for (int i = 0; i < pairs; ++i) {
        const Box3D g = random_box(rng);
        const Box3D p = random_box(rng);
        const Residual t = encode_residual(g, p);
        worst = std::max(worst, box_diff(decode_residual(t, p), g));
        worst_unit = std::max(worst_unit, std::abs(t[6] * t[6] + t[7] * t[7] - 1.0));

        const Vec3 c{g.cx + rng.uniform(-0.2, 0.2), g.cy + rng.uniform(-0.2, 0.2), g.cz + rng.uniform(-0.2, 0.2)};
        const Vec3 cell{rng.uniform(0.02, 0.2), rng.uniform(0.02, 0.2), rng.uniform(0.02, 0.2)};
        const Vec3 prior{rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5)};
        worst = std::max(worst, box_diff(decode_stage_one(encode_stage_one(g, c, cell, prior), c, cell, prior), g));
    }
    return finish("encode_decode_round_trip", worst, tol, pairs, timer, worst_unit <= 1e-15,
                  "heading unit error " + std::to_string(worst_unit));
}

SuiteResult suite_nms(uint64_t seed, int instances, int boxes) {
    Timer timer;
    Rng rng(seed);
    int bad = 0;
    for (int i = 0; i < instances; ++i) {
        std::vector<Proposal> props;
        std::vector<Box3D> bx;
        std::vector<double> sc;
        for (int b = 0; b < boxes; ++b) {
            Box3D box = random_box(rng, 1.0);
            box.cz = rng.uniform(-0.2, 0.2);
            const double s = rng.uniform();
            props.push_back({box, s, static_cast<int>(rng.below(3)), 0.5});
            bx.push_back(box);
            sc.push_back(s);
        }
        const double thr = rng.uniform(0.1, 0.7);
        const double smin = rng.uniform(0.0, 0.2);
        const auto got = filter_nms(props, smin, thr);
        const auto ref = brute_nms(bx, sc, smin, thr);
        bool ok = got.size() == ref.size();
        for (size_t k = 0; ok && k < ref.size(); ++k) {
            ok = got[k].score == sc[ref[k]] && box_diff(got[k].box, bx[ref[k]]) == 0.0;
        }
        bad += !ok;
    }
    return finish("nms_vs_bruteforce", bad, 0, instances, timer);
}

SuiteResult suite_assign(uint64_t seed, int instances, int voxels) {
    Timer timer;
    Rng rng(seed);
    int bad = 0;
    int foreground = 0;
    for (int i = 0; i < instances; ++i) {
        std::vector<GtBox> gt;
        std::vector<Box3D> bx;
        for (int b = 0; b < 12; ++b) {
            Box3D box = random_box(rng, 1.0);
            if (b % 4 == 3) {
                // Nested copy of the previous box.
                box = bx.back();
                box.w *= 0.5;
                box.l *= 0.6;
                box.h *= 0.7;
            }
            gt.push_back({box, static_cast<int>(rng.below(3))});
            bx.push_back(box);
        }
        std::vector<Vec3> pts(static_cast<size_t>(voxels));
        for (Vec3& p : pts) p = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        const VoxelTargets got = assign_targets(pts, gt);
        const auto ref = brute_assign(pts, bx);
        for (size_t p = 0; p < pts.size(); ++p) {
            if (got.box_id[p] != ref[p]) {
                ++bad;
                continue;
            }
            if (ref[p] < 0) {
                bad += got.class_id[p] != -1;
                continue;
            }
            ++foreground;
            const Box3D& b = bx[static_cast<size_t>(ref[p])];
            const Vec3 off{b.cx - pts[p][0], b.cy - pts[p][1], b.cz - pts[p][2]};
            bad += got.class_id[p] != gt[static_cast<size_t>(ref[p])].class_id || got.center_offset[p] != off;
        }
    }
    return finish("assign_targets_vs_bruteforce", bad, 0, instances, timer, true,
                  std::to_string(foreground) + " foreground voxels");
}

SuiteResult suite_selection(uint64_t seed, int instances) {
    Timer timer;
    Rng rng(seed);
    int bad = 0;
    for (int i = 0; i < instances; ++i) {
        std::vector<Box3D> gt, props;
        for (int b = 0; b < 6; ++b) gt.push_back(random_box(rng, 1.0));
        for (int p = 0; p < 300; ++p) props.push_back(jitter_box(rng, gt[rng.below(gt.size())], 0.4));
        const Selection s = select_training_proposals(props, gt, 0.3, 128);
        const auto ref = brute_select(props, gt, 0.3, 128);
        bool ok = s.size() == ref.size();
        for (size_t k = 0; ok && k < ref.size(); ++k) {
            ok = static_cast<size_t>(s.proposal[k]) == ref[k].first && static_cast<size_t>(s.gt[k]) == ref[k].second;
        }
        bad += !ok;
    }
    return finish("proposal_selection_vs_bruteforce", bad, 0, instances, timer);
}

SuiteResult suite_ap(uint64_t seed, int instances, double tol) {
    Timer timer;
    Rng rng(seed);
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        const int k = 3;
        const size_t scenes = 1 + rng.below(4);
        std::vector<std::vector<Detection>> preds(scenes);
        std::vector<std::vector<GtBox>> gt(scenes);
        for (size_t s = 0; s < scenes; ++s) {
            const size_t ng = rng.below(5);
            for (size_t g = 0; g < ng; ++g) gt[s].push_back({random_box(rng, 2.0), static_cast<int>(rng.below(k))});
            const size_t np = rng.below(8);
            for (size_t p = 0; p < np; ++p) {
                Detection d;
                if (!gt[s].empty() && rng.uniform() < 0.7) {
                    const GtBox& g = gt[s][rng.below(gt[s].size())];
                    d.box = jitter_box(rng, g.box, 0.2);
                    d.class_id = rng.uniform() < 0.8 ? g.class_id : static_cast<int>(rng.below(k));
                } else {
                    d.box = random_box(rng, 2.0);
                    d.class_id = static_cast<int>(rng.below(k));
                }
                // Coarse scores so ties occur.
                d.score = std::round(rng.uniform() * 10.0) / 10.0;
                preds[s].push_back(d);
            }
        }
        for (double thr : {0.25, 0.5}) {
            const EvalResult r = eval_map(preds, gt, k, {thr});
            const auto ref = reference_ap(preds, gt, k, thr);
            for (int c = 0; c < k; ++c) {
                const double a = r.ap[0][static_cast<size_t>(c)];
                const double b = ref[static_cast<size_t>(c)];
                if (std::isnan(a) != std::isnan(b)) {
                    worst = 1e300;
                } else if (!std::isnan(a)) {
                    worst = std::max(worst, std::abs(a - b));
                }
            }
            worst = std::max(worst, std::abs(r.map[0] - ref.back()));
        }
    }
    return finish("ap_vs_reference", worst, tol, instances, timer);
}

std::vector<SuiteResult> run_oracles(Precision p, uint64_t seed) {
    const bool f32 = p == Precision::f32;
    return {
        suite_kernel_map(seed + 1, 50),
        suite_sparse_vs_dense(p, seed + 2, 30, f32 ? 1e-4 : 1e-6),
        suite_conv_gradient(p, seed + 3, 5, f32 ? 1e-4 : 1e-5),
        suite_downsample_upsample(seed + 4, 50),
        suite_voxelize(seed + 5, 30),
        suite_iou_analytic(1e-9),
        suite_iou_monte_carlo(seed + 6, 50, 200000, 0.02),
        suite_contains(seed + 7, 50),
        suite_loss_formulas(seed + 8, 50, 1e-10),
        suite_loss_gradients(seed + 9, 5, 1e-4),
        suite_grouping(seed + 10, 20),
        suite_roi_abstraction(seed + 11, 20, 1e-10),
        suite_round_trips(seed + 12, 200, 1e-6),
        suite_nms(seed + 13, 10, 200),
        suite_assign(seed + 14, 3, 2000),
        suite_selection(seed + 15, 10),
        suite_ap(seed + 16, 50, 1e-12),
    };
}

std::vector<SuiteResult> run_gradchecks(Precision p, uint64_t seed) {
    const bool f32 = p == Precision::f32;
    return {
        suite_conv_gradient(p, seed + 3, 10, f32 ? 1e-4 : 1e-5),
        suite_loss_gradients(seed + 9, 20, 1e-4),
    };
}

}  // namespace sparsedet3d::oracle
