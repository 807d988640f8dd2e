// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/proposal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace sparsedet3d {

VoxelTargets assign_targets(std::span<const Vec3> centers, std::span<const GtBox> gt) {
    for (const GtBox& g : gt) validate_box(g.box);
    VoxelTargets t;
    t.class_id.assign(centers.size(), -1);
    t.center_offset.assign(centers.size(), Vec3{0.0, 0.0, 0.0});
    t.box_id.assign(centers.size(), -1);
    std::vector<double> vol(gt.size());
    for (size_t b = 0; b < gt.size(); ++b) vol[b] = volume(gt[b].box);
    for (size_t i = 0; i < centers.size(); ++i) {
        int best = -1;
        for (size_t b = 0; b < gt.size(); ++b) {
            if (best >= 0 && !(vol[b] < vol[static_cast<size_t>(best)])) continue;
            if (contains(gt[b].box, centers[i])) best = static_cast<int>(b);
        }
        if (best < 0) continue;
        const Box3D& box = gt[static_cast<size_t>(best)].box;
        t.box_id[i] = best;
        t.class_id[i] = gt[static_cast<size_t>(best)].class_id;
        t.center_offset[i] = {box.cx - centers[i][0], box.cy - centers[i][1], box.cz - centers[i][2]};
    }
    return t;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void check_dense(const Dense& d, Eigen::Index in, const char* what) {
    if (d.weight.rows() != in || d.bias.rows() != 1 || d.bias.cols() != d.weight.cols()) {
        throw std::invalid_argument(std::string(what) + ": parameter shape mismatch");
    }
}

}  // namespace

Matrix Dense::apply(const Matrix& x) const {
    check_dense(*this, x.cols(), "dense");
    Matrix y = x * weight;
    y.rowwise() += bias.row(0);
    return y;
}

VoteOutput vote_forward(const SparseTensor<double>& feats, const VoteParams& params) {
    const Eigen::Index c = feats.channels();
    check_dense(params.fc1, c, "vote_forward");
    check_dense(params.fc2, params.fc1.weight.cols(), "vote_forward");
    if (params.fc2.weight.cols() != 3 + c) throw std::invalid_argument("vote_forward: output width must be 3 + C");
    const Matrix out = params.fc2.apply(params.fc1.apply(feats.feats).cwiseMax(0.0));
    VoteOutput v;
    v.dx = out.leftCols(3);
    v.df = out.rightCols(c);
    v.votes.positions.resize(static_cast<Eigen::Index>(feats.size()), 3);
    for (size_t i = 0; i < feats.size(); ++i) {
        const Vec3 p = feats.center(i);
        for (int a = 0; a < 3; ++a) v.votes.positions(static_cast<Eigen::Index>(i), a) = p[a] + v.dx(static_cast<Eigen::Index>(i), a);
    }
    v.votes.features = feats.feats + v.df;
    return v;
}

Matrix semantic_forward(const SparseTensor<double>& feats, const Dense& params) {
    check_dense(params, feats.channels(), "semantic_forward");
    return params.apply(feats.feats).unaryExpr([](double z) { return sigmoid(z); });
}

std::vector<Proposal> decode_proposals(const Matrix& cls_logits, const Matrix& reg, const Matrix& cntr_logits,
                                       std::span<const HeadRow> rows) {
    const auto n = static_cast<Eigen::Index>(rows.size());
    if (cls_logits.rows() != n || reg.rows() != n || cntr_logits.rows() != n || reg.cols() != 8 ||
        cntr_logits.cols() != 1) {
        throw std::invalid_argument("decode_proposals: head output shape mismatch");
    }
    std::vector<Proposal> out;
    out.reserve(rows.size());
    for (Eigen::Index r = 0; r < n; ++r) {
        const HeadRow& m = rows[static_cast<size_t>(r)];
        if (m.class_id < 0 || m.class_id >= cls_logits.cols()) throw std::invalid_argument("decode_proposals: bad class");
        BoxCode code;
        for (int q = 0; q < 8; ++q) code[q] = reg(r, q);
        for (int q = 3; q < 6; ++q) code[q] = std::clamp(code[q], -kMaxLogScale, kMaxLogScale);
        Proposal p;
        p.box = decode_stage_one(code, m.center, m.cell, m.prior);
        p.class_id = m.class_id;
        p.centerness = sigmoid(cntr_logits(r, 0));
        p.score = sigmoid(cls_logits(r, m.class_id)) * p.centerness;
        out.push_back(p);
    }
    return out;
}

std::vector<Proposal> proposal_head(const std::vector<SparseTensor<double>>& class_tensors, const HeadParams& params,
                                    const ClassSizeTable& sizes) {
    if (class_tensors.size() != sizes.size()) throw std::invalid_argument("proposal_head: one tensor per class");
    std::vector<HeadRow> rows;
    Eigen::Index total = 0;
    Eigen::Index c = -1;
    for (size_t j = 0; j < class_tensors.size(); ++j) {
        const SparseTensor<double>& t = class_tensors[j];
        if (t.size() == 0) continue;
        if (c >= 0 && t.channels() != c) throw std::invalid_argument("proposal_head: class tensors differ in width");
        c = t.channels();
        total += static_cast<Eigen::Index>(t.size());
        const ClassSize& d = sizes.dims[j];
        for (size_t i = 0; i < t.size(); ++i) rows.push_back({static_cast<int>(j), t.center(i), t.voxel_size, {d.w, d.l, d.h}});
    }
    if (rows.empty()) return {};
    Matrix stacked(total, c);
    Eigen::Index r = 0;
    for (const SparseTensor<double>& t : class_tensors) {
        if (t.size() == 0) continue;
        stacked.middleRows(r, t.feats.rows()) = t.feats;
        r += t.feats.rows();
    }
    return decode_proposals(params.cls.apply(stacked), params.reg.apply(stacked), params.cntr.apply(stacked), rows);
}

DatasetPreset parse_dataset_preset(const std::string& name) {
    if (name == "scannet") return DatasetPreset::scannet;
    if (name == "sunrgbd") return DatasetPreset::sunrgbd;
    throw std::invalid_argument("unknown dataset preset '" + name + "' (expected scannet or sunrgbd)");
}

std::string to_string(DatasetPreset p) { return p == DatasetPreset::scannet ? "scannet" : "sunrgbd"; }

TauSchedule TauSchedule::preset(DatasetPreset p) {
    TauSchedule s;
    s.interval_epochs = p == DatasetPreset::scannet ? 10 : 4;
    return s;
}

double TauSchedule::at(int epoch) const {
    if (epoch < 0) throw std::invalid_argument("tau_schedule: negative epoch");
    if (interval_epochs <= 0) throw std::invalid_argument("tau_schedule: interval must be positive");
    const int drops = epoch / interval_epochs;
    return std::max(floor, initial - step * drops);
}

double tau_schedule(int epoch, DatasetPreset preset) { return TauSchedule::preset(preset).at(epoch); }

Vec3 ClassGroup::center(size_t i) const {
    const Coord3& c = coords[i];
    return {(c.x + 0.5) * cell[0], (c.y + 0.5) * cell[1], (c.z + 0.5) * cell[2]};
}

std::vector<ClassGroup> slice_and_revoxelize(const PositionMatrix& votes, const Matrix& scores, double tau,
                                             double alpha, const ClassSizeTable& sizes, int kernel_size) {
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("class_aware_group: tau must be in (0, 1)");
    if (!(alpha > 0.0)) throw std::invalid_argument("class_aware_group: alpha must be positive");
    if (scores.rows() != votes.rows()) throw std::invalid_argument("class_aware_group: score rows != vote count");
    if (static_cast<size_t>(scores.cols()) != sizes.size()) {
        throw std::invalid_argument("class_aware_group: score columns != number of classes");
    }
    sizes.validate();
    std::vector<ClassGroup> groups(sizes.size());
    for (size_t j = 0; j < sizes.size(); ++j) {
        ClassGroup& g = groups[j];
        g.class_id = static_cast<int>(j);
        g.cell = sizes.cell(j, alpha);
        for (Eigen::Index i = 0; i < votes.rows(); ++i) {
            if (scores(i, static_cast<Eigen::Index>(j)) > tau) g.members.push_back(static_cast<int32_t>(i));
        }
        PositionMatrix sliced(static_cast<Eigen::Index>(g.members.size()), 3);
        for (size_t m = 0; m < g.members.size(); ++m) sliced.row(static_cast<Eigen::Index>(m)) = votes.row(g.members[m]);
        Quantization q = quantize(sliced, g.cell);
        g.coords = std::move(q.coords);
        g.member_voxel = std::move(q.point_to_voxel);
        g.kmap = std::make_shared<KernelMap>(build_kernel_map(g.coords, g.coords, kernel_size));
    }
    return groups;
}

std::vector<SparseTensor<double>> class_aware_group(const PointCloud& votes, const Matrix& scores, double tau,
                                                    double alpha, const ClassSizeTable& sizes, int kernel_size,
                                                    const GroupingWeights& weights) {
    votes.validate();
    if (weights.per_class.size() != sizes.size()) {
        throw std::invalid_argument("class_aware_group: need one weight set per class");
    }
    const std::vector<ClassGroup> groups = slice_and_revoxelize(votes.positions, scores, tau, alpha, sizes, kernel_size);
    std::vector<SparseTensor<double>> out;
    out.reserve(groups.size());
    for (size_t j = 0; j < groups.size(); ++j) {
        const ClassGroup& g = groups[j];
        const ConvWeights<double>& w = weights.per_class[j];
        w.validate();
        if (w.kernel_size != kernel_size) throw std::invalid_argument("class_aware_group: kernel size mismatch");
        const Eigen::Index channels = votes.features.cols() > 0 ? votes.features.cols() : 1;
        if (w.in_channels != channels) throw std::invalid_argument("class_aware_group: channel mismatch");

        SparseTensor<double> pooled;
        pooled.coords = g.coords;
        pooled.voxel_size = g.cell;
        pooled.feats = Matrix::Zero(static_cast<Eigen::Index>(g.size()), channels);
        std::vector<double> count(g.size(), 0.0);
        for (size_t m = 0; m < g.members.size(); ++m) {
            const auto row = g.member_voxel[m];
            if (votes.features.cols() > 0) {
                pooled.feats.row(row) += votes.features.row(g.members[m]);
            } else {
                pooled.feats(row, 0) += 1.0;
            }
            count[static_cast<size_t>(row)] += 1.0;
        }
        for (size_t r = 0; r < g.size(); ++r) pooled.feats.row(static_cast<Eigen::Index>(r)) /= count[r];

        SparseTensor<double> agg;
        agg.coords = g.coords;
        agg.voxel_size = g.cell;
        agg.feats = Matrix::Zero(static_cast<Eigen::Index>(g.size()), w.out_channels);
        if (w.has_bias()) agg.feats.rowwise() += w.bias;
        contract_kernel_map(*g.kmap, pooled.feats, w.kernel, agg.feats);
        agg.feats = agg.feats.cwiseMax(0.0);
        out.push_back(std::move(agg));
    }
    return out;
}

std::vector<Proposal> filter_nms(std::vector<Proposal> proposals, double score_min, double iou_thresh,
                                 size_t max_candidates) {
    if (!(iou_thresh >= 0.0 && iou_thresh <= 1.0)) throw std::invalid_argument("filter_nms: iou_thresh outside [0, 1]");
    std::erase_if(proposals, [score_min](const Proposal& p) { return p.score < score_min; });
    std::stable_sort(proposals.begin(), proposals.end(),
                     [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
    if (max_candidates > 0 && proposals.size() > max_candidates) proposals.resize(max_candidates);

    std::vector<Proposal> kept;
    for (const Proposal& p : proposals) {
        bool suppressed = false;
        for (const Proposal& k : kept) {
            if (iou3d(p.box, k.box) > iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(p);
    }
    return kept;
}

}  // namespace sparsedet3d
