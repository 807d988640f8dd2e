// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

// Independent reference implementations used to check the library. Each
// one is written from the defining formula with the simplest data
// structures available (dense arrays, ordered sets, double loops) and
// shares no code with the routine it checks.

#pragma once

#include <array>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sparsedet3d/eval.hpp"
#include "sparsedet3d/random.hpp"
#include "sparsedet3d/sparse_tensor.hpp"

namespace sparsedet3d::oracle {

enum class Precision { f32, f64 };
const char* to_string(Precision p);

// Sparse core.

/// All (in, out, offset) triples by testing every coordinate pair, sorted.
std::vector<KernelMap::Triple> brute_kernel_map(std::span<const Coord3> in, std::span<const Coord3> out,
                                                int kernel_size, int dilation);

/// Dense convolution: scatters the input into a zero-filled volume and sums
/// all k^3 taps at every output site. `step` is the lattice spacing of the
/// taps (input stride times dilation).
template <class T>
FeatureMatrix<T> dense_conv(std::span<const Coord3> in, const FeatureMatrix<T>& feats, std::span<const Coord3> out,
                            const FeatureMatrix<T>& kernel, const Eigen::Matrix<T, 1, Eigen::Dynamic>& bias,
                            int kernel_size, int step);

/// Sorted unique floor(c / factor) * factor.
std::vector<Coord3> brute_downsample(std::span<const Coord3> coords, int factor);

/// Row of `low` containing each target (linear scan), or -1.
std::vector<int32_t> brute_parent(std::span<const Coord3> low, int low_stride, std::span<const Coord3> targets);

/// Average-pooled voxels keyed by cell; value = (count, mean feature row).
std::map<Coord3, std::pair<int, std::vector<double>>> brute_voxelize(const Eigen::MatrixXd& positions,
                                                                       const Eigen::MatrixXd& features,
                                                                       const Vec3& voxel_size);

// Geometry.

/// The 8 corners from the rotation matrix written out longhand.
std::array<Vec3, 8> box_corners(const Box3D& b);

/// Closed containment via the six outward face planes of box_corners.
bool contains_halfspace(const Box3D& b, const Vec3& p, double eps = 1e-12);

/// IoU from `samples` uniform points in the joint bounding box.
double monte_carlo_iou(const Box3D& a, const Box3D& b, int samples, Rng& rng);

// Detection.

/// Index of the minimum-volume containing box per point (lower index on
/// ties), -1 when none.
std::vector<int> brute_assign(std::span<const Vec3> points, std::span<const Box3D> boxes);

/// Repeatedly emits the best remaining proposal (lowest index on ties) and
/// removes everything overlapping it by more than iou_thresh.
std::vector<size_t> brute_nms(std::span<const Box3D> boxes, std::span<const double> scores, double score_min,
                              double iou_thresh);

/// Proposals with best IoU > iou_min, by descending IoU then index, capped.
std::vector<std::pair<size_t, size_t>> brute_select(std::span<const Box3D> proposals, std::span<const Box3D> gt,
                                                    double iou_min, size_t cap);

/// Per-class AP by summing interpolated precision at every true positive.
/// NaN for classes without ground truth; index K holds the mean.
std::vector<double> reference_ap(const std::vector<std::vector<Detection>>& predictions,
                                 const std::vector<std::vector<GtBox>>& gt, int num_classes, double iou_thresh);

// Losses, evaluated straight from their formulas.

double focal_formula(const Eigen::MatrixXd& probs, std::span<const int> targets, double gamma, double alpha);
double smooth_l1_formula(std::span<const double> x, double beta);

// Finite differences.

/// Central differences of f at x with step h.
std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                 double h);

/// max |a - b| / max(max |a|, max |b|, floor).
double rel_err(std::span<const double> a, std::span<const double> b, double floor = 1e-12);

// Suites.

struct SuiteResult {
    std::string name;
    bool passed = false;
    double worst = 0.0;  // worst observed error (suite-specific unit)
    double tol = 0.0;
    int cases = 0;
    double seconds = 0.0;
    std::string detail;
};

/// Randomized instances: every random k / occupancy / grid combination is
/// compared against dense_conv at every output site.
SuiteResult suite_sparse_vs_dense(Precision p, uint64_t seed, int instances, double tol);
SuiteResult suite_kernel_map(uint64_t seed, int instances);
SuiteResult suite_conv_gradient(Precision p, uint64_t seed, int instances, double tol);
SuiteResult suite_downsample_upsample(uint64_t seed, int instances);
SuiteResult suite_voxelize(uint64_t seed, int instances);
SuiteResult suite_iou_monte_carlo(uint64_t seed, int pairs, int samples, double tol);
SuiteResult suite_iou_analytic(double tol);
SuiteResult suite_contains(uint64_t seed, int instances);
SuiteResult suite_loss_gradients(uint64_t seed, int instances, double tol);
SuiteResult suite_loss_formulas(uint64_t seed, int instances, double tol);
SuiteResult suite_grouping(uint64_t seed, int instances);
SuiteResult suite_roi_abstraction(uint64_t seed, int instances, double tol);
SuiteResult suite_round_trips(uint64_t seed, int pairs, double tol);
SuiteResult suite_nms(uint64_t seed, int instances, int boxes);
SuiteResult suite_assign(uint64_t seed, int instances, int voxels);
SuiteResult suite_selection(uint64_t seed, int instances);
SuiteResult suite_ap(uint64_t seed, int instances, double tol);

/// Every suite at its default size.
std::vector<SuiteResult> run_oracles(Precision p, uint64_t seed);

/// Gradient suites only.
std::vector<SuiteResult> run_gradchecks(Precision p, uint64_t seed);

struct BenchRow {
    int grid = 0;
    double occupancy = 0.0;
    int kernel = 0;
    int channels = 0;
    size_t voxels = 0;
    size_t triples = 0;
    double kmap_ms = 0.0;
    double conv_ms = 0.0;
    double dense_ms = 0.0;
    double gflops = 0.0;
    double max_rel_err = 0.0;
    bool matches_dense = false;
};

/// One row per occupancy x kernel on a grid^3 volume.
std::vector<BenchRow> run_bench(Precision p, int grid, const std::vector<double>& occupancies,
                                const std::vector<int>& kernels, int channels = 16, uint64_t seed = 7);
void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows);

}  // namespace sparsedet3d::oracle
