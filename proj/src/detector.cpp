// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sparsedet3d/losses.hpp"

namespace sparsedet3d {

using nn::Mat;
using nn::Tape;
using nn::Var;

namespace {

template <class F>
auto stage(const char* name, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("stage ") + name + ": " + e.what());
    }
}

// Bias that makes sigmoid start at probability p.
double prior_logit(double p) { return -std::log((1.0 - p) / p); }

}  // namespace

void SceneRecord::validate(int num_classes) const {
    cloud.validate();
    for (const GtBox& g : gt) {
        validate_box(g.box);
        if (g.class_id < 0 || g.class_id >= num_classes) {
            throw std::invalid_argument("scene " + scene_id + ": class id " + std::to_string(g.class_id) +
                                        " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
}

ClassSizeTable estimate_class_sizes(const std::vector<SceneRecord>& scenes, int num_classes, ClassSize fallback) {
    std::vector<std::array<double, 3>> sum(static_cast<size_t>(num_classes), {0.0, 0.0, 0.0});
    std::vector<int> count(static_cast<size_t>(num_classes), 0);
    for (const SceneRecord& s : scenes) {
        for (const GtBox& g : s.gt) {
            if (g.class_id < 0 || g.class_id >= num_classes) continue;
            auto& acc = sum[static_cast<size_t>(g.class_id)];
            acc[0] += g.box.w;
            acc[1] += g.box.l;
            acc[2] += g.box.h;
            ++count[static_cast<size_t>(g.class_id)];
        }
    }
    ClassSizeTable t;
    for (size_t j = 0; j < sum.size(); ++j) {
        if (count[j] == 0) {
            t.dims.push_back(fallback);
        } else {
            const double n = count[j];
            t.dims.push_back({sum[j][0] / n, sum[j][1] / n, sum[j][2] / n});
        }
    }
    return t;
}

NetworkShape NetworkShape::preset(const RunConfig& cfg) {
    if (cfg.network != "toy") throw std::invalid_argument("unknown network preset '" + cfg.network + "'");
    NetworkShape s;
    s.backbone.in_channels = cfg.in_channels;
    s.backbone.highres_stride = cfg.highres_stride();
    s.backbone.norm = cfg.norm == "instance" ? nn::NormMode::instance : nn::NormMode::batch;
    return s;
}

Detector::Linear Detector::make_linear(const std::string& name, int in, int out) {
    Linear l;
    l.w = &store_.add(name + ".weight", in, out);
    l.b = &store_.add(name + ".bias", 1, out);
    l.b->decay = false;
    return l;
}

Detector::Conv Detector::make_conv(const std::string& name, int k, int in, int out) {
    Conv c;
    c.kernel = &store_.add(name + ".kernel", static_cast<Eigen::Index>(k) * k * k * in, out);
    c.bias = &store_.add(name + ".bias", 1, out);
    c.bias->decay = false;
    return c;
}

Detector::Detector(const RunConfig& cfg, const ClassSizeTable& sizes) : cfg_(cfg), shape_(NetworkShape::preset(cfg)) {
    cfg_.validate();
    sizes.validate();
    if (static_cast<int>(sizes.size()) != cfg_.num_classes) {
        throw std::invalid_argument("Detector: class size table has " + std::to_string(sizes.size()) +
                                    " entries, config expects " + std::to_string(cfg_.num_classes));
    }
    const int k = cfg_.num_classes;
    const int c = shape_.backbone.out_channels;
    backbone_ = std::make_unique<Backbone>(shape_.backbone, store_, "backbone");
    class_sizes_ = &store_.add("class_sizes", k, 3, false);
    for (int j = 0; j < k; ++j) {
        const ClassSize& d = sizes.dims[static_cast<size_t>(j)];
        class_sizes_->value.row(j) << d.w, d.l, d.h;
    }
    vote1_ = make_linear("vote.fc1", c, shape_.vote_hidden);
    vote2_ = make_linear("vote.fc2", shape_.vote_hidden, 3 + c);
    semantic_ = make_linear("semantic", c, k);
    for (int j = 0; j < k; ++j) {
        group_.push_back(make_conv("group" + std::to_string(j), cfg_.grouping_kernel, c, shape_.group_channels));
    }
    head_cls_ = make_linear("head.cls", shape_.group_channels, k);
    head_reg_ = make_linear("head.reg", shape_.group_channels, 8);
    head_cntr_ = make_linear("head.cntr", shape_.group_channels, 1);
    roi1_ = make_conv("roi.block1", cfg_.roi_kernel1, c, shape_.roi_channels1);
    roi2_ = make_conv("roi.block2", cfg_.roi_kernel2, shape_.roi_channels1, shape_.roi_channels2);
    refine1_ = make_linear("refine.fc1", shape_.roi_channels2, shape_.refine_hidden);
    refine2_ = make_linear("refine.fc2", shape_.refine_hidden, 8);
}

ClassSizeTable Detector::class_sizes() const {
    ClassSizeTable t;
    for (Eigen::Index j = 0; j < class_sizes_->value.rows(); ++j) {
        t.dims.push_back({class_sizes_->value(j, 0), class_sizes_->value(j, 1), class_sizes_->value(j, 2)});
    }
    return t;
}

void Detector::init(uint64_t seed) {
    Rng rng(seed);
    backbone_->init(rng);
    auto he = [&](const Linear& l) { nn::init_he(*l.w, l.w->value.rows(), rng); };
    he(vote1_);
    he(vote2_);
    vote2_.w->value *= 0.01;
    he(semantic_);
    for (const Conv& g : group_) nn::init_he(*g.kernel, g.kernel->value.rows(), rng);
    he(head_cls_);
    head_cls_.b->value.setConstant(prior_logit(0.01));
    he(head_reg_);
    head_reg_.w->value *= 0.01;
    // Decoded heading starts at atan2(0, 1) = 0.
    head_reg_.b->value(0, 7) = 1.0;
    he(head_cntr_);
    nn::init_he(*roi1_.kernel, roi1_.kernel->value.rows(), rng);
    nn::init_he(*roi2_.kernel, roi2_.kernel->value.rows(), rng);
    he(refine1_);
    // Refinement starts as the identity residual.
    refine2_.w->value.setZero();
    refine2_.b->value.setZero();
    refine2_.b->value(0, 7) = 1.0;
}

Var Detector::apply(Tape& t, Var x, const Linear& l) const { return nn::linear(t, x, t.param(*l.w), t.param(*l.b)); }

ForwardResult Detector::forward(Tape& t, const PointCloud& cloud, const std::vector<GtBox>* gt, double tau) const {
    ForwardResult R;
    const bool training = gt != nullptr;
    const ClassSizeTable sizes = class_sizes();
    const Vec3 vs{cfg_.voxel_size, cfg_.voxel_size, cfg_.voxel_size};

    LossTerms terms;
    std::vector<Var> term_vars(6, nullptr);

    const SparseTensor<double> vox = stage("voxelize", [&] { return voxelize_avg(cloud, vs); });
    R.input_voxels = vox.size();
    if (vox.size() > 0 && vox.channels() != cfg_.in_channels) {
        throw std::runtime_error("stage voxelize: cloud has " + std::to_string(vox.channels()) +
                                 " feature channels, config in_channels = " + std::to_string(cfg_.in_channels));
    }
    auto finish = [&]() {
        const LossReport counts = R.report;
        R.report = total_loss(terms, cfg_.loss);
        R.report.positives = counts.positives;
        R.report.train_proposals = counts.train_proposals;
        if (training && t.recording()) {
            std::vector<Var> vars;
            std::vector<double> weights;
            const auto w = loss_weight_values(cfg_.loss);
            for (size_t i = 0; i < term_vars.size(); ++i) {
                if (term_vars[i]) {
                    vars.push_back(term_vars[i]);
                    weights.push_back(w[i]);
                }
            }
            R.total = vars.empty() ? t.constant(Mat::Zero(1, 1)) : nn::weighted_sum(t, vars, weights);
        }
        return R;
    };
    if (vox.size() == 0) return finish();

    const Branch B = stage("backbone", [&] { return backbone_->forward(t, vox.coords, t.constant(vox.feats)); });
    const size_t n = B.coords.size();
    R.backbone_voxels = n;
    const Eigen::Index c = B.feats->cols();
    std::vector<Vec3> centers(n);
    const double half = 0.5 * B.stride;
    for (size_t i = 0; i < n; ++i) {
        const Coord3& q = B.coords[i];
        centers[i] = {(q.x + half) * vs[0], (q.y + half) * vs[1], (q.z + half) * vs[2]};
    }

    // Voting and semantics.
    Var vote_out = apply(t, nn::relu(t, apply(t, B.feats, vote1_)), vote2_);
    Var dx = nn::slice_cols(t, vote_out, 0, 3);
    Var df = nn::slice_cols(t, vote_out, 3, c);
    Var sem_logits = apply(t, B.feats, semantic_);
    const Mat scores = (1.0 / (1.0 + (-sem_logits->val().array()).exp())).matrix();
    PositionMatrix votes(static_cast<Eigen::Index>(n), 3);
    for (size_t i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a) votes(static_cast<Eigen::Index>(i), a) = centers[i][a] + dx->val()(i, a);
    }
    Var vote_feats = nn::add(t, B.feats, df);

    if (training) {
        const VoxelTargets tg = assign_targets(centers, *gt);
        LossGrad sem = focal_loss_logits(sem_logits->val(), tg.class_id, cfg_.focal_gamma, cfg_.focal_alpha);
        terms.sem = sem.value;
        term_vars[0] = nn::attach_loss(t, sem_logits, sem.value, std::move(sem.grad));

        std::vector<int32_t> fg;
        for (size_t i = 0; i < n; ++i) {
            if (tg.class_id[i] >= 0) fg.push_back(static_cast<int32_t>(i));
        }
        Mat pred(static_cast<Eigen::Index>(fg.size()), 3);
        Mat target(static_cast<Eigen::Index>(fg.size()), 3);
        for (size_t r = 0; r < fg.size(); ++r) {
            for (int a = 0; a < 3; ++a) {
                pred(static_cast<Eigen::Index>(r), a) = dx->val()(fg[r], a);
                target(static_cast<Eigen::Index>(r), a) = tg.center_offset[static_cast<size_t>(fg[r])][a];
            }
        }
        const LossGrad vote = smooth_l1_grad(pred, target);
        Mat g = Mat::Zero(static_cast<Eigen::Index>(n), 3);
        for (size_t r = 0; r < fg.size(); ++r) g.row(fg[r]) = vote.grad.row(static_cast<Eigen::Index>(r));
        terms.vote = vote.value;
        term_vars[1] = nn::attach_loss(t, dx, vote.value, std::move(g));
    }

    // Class-aware grouping.
    R.groups = stage("grouping", [&] {
        return slice_and_revoxelize(votes, scores, tau, cfg_.alpha, sizes, cfg_.grouping_kernel);
    });
    std::vector<Var> aggs;
    std::vector<HeadRow> meta;
    for (size_t j = 0; j < R.groups.size(); ++j) {
        const ClassGroup& g = R.groups[j];
        if (g.size() == 0) continue;
        Var members = nn::gather_rows(t, vote_feats, g.members);
        Var pooled = nn::segment_mean(t, members, g.member_voxel, static_cast<Eigen::Index>(g.size()));
        Var agg = nn::sparse_conv(t, pooled, t.param(*group_[j].kernel), t.param(*group_[j].bias), g.kmap);
        aggs.push_back(nn::relu(t, agg));
        const ClassSize& d = sizes.dims[j];
        for (size_t i = 0; i < g.size(); ++i) meta.push_back({static_cast<int>(j), g.center(i), g.cell, {d.w, d.l, d.h}});
    }

    if (!aggs.empty()) {
        Var A = aggs.size() == 1 ? aggs.front() : nn::concat_rows(t, aggs);
        Var cls = apply(t, A, head_cls_);
        Var reg = apply(t, A, head_reg_);
        Var cntr = apply(t, A, head_cntr_);
        const size_t rows = meta.size();

        std::vector<Proposal> candidates = decode_proposals(cls->val(), reg->val(), cntr->val(), meta);
        R.proposals = stage("proposal_nms", [&] {
            return filter_nms(std::move(candidates), cfg_.score_min, cfg_.nms_iou, static_cast<size_t>(cfg_.nms_pre));
        });

        if (training) {
            std::vector<Vec3> row_centers(rows);
            for (size_t r = 0; r < rows; ++r) row_centers[r] = meta[r].center;
            const VoxelTargets tg = assign_targets(row_centers, *gt);
            LossGrad cl = focal_loss_logits(cls->val(), tg.class_id, cfg_.focal_gamma, cfg_.focal_alpha);
            terms.cls = cl.value;
            term_vars[4] = nn::attach_loss(t, cls, cl.value, std::move(cl.grad));

            std::vector<size_t> pos;
            for (size_t r = 0; r < rows; ++r) {
                if (tg.class_id[r] == meta[r].class_id) pos.push_back(r);
            }
            R.report.positives = static_cast<int>(pos.size());
            if (!pos.empty()) {
                const auto np = static_cast<Eigen::Index>(pos.size());
                Mat reg_pos(np, 8);
                Mat cntr_pos(np, 1);
                Mat cntr_target(np, 1);
                std::vector<Vec3> pc, cells, priors;
                std::vector<Box3D> boxes;
                for (size_t q = 0; q < pos.size(); ++q) {
                    const size_t r = pos[q];
                    const Box3D& box = (*gt)[static_cast<size_t>(tg.box_id[r])].box;
                    reg_pos.row(static_cast<Eigen::Index>(q)) = reg->val().row(static_cast<Eigen::Index>(r));
                    cntr_pos(static_cast<Eigen::Index>(q), 0) = cntr->val()(static_cast<Eigen::Index>(r), 0);
                    cntr_target(static_cast<Eigen::Index>(q), 0) = centerness_target(box, meta[r].center);
                    pc.push_back(meta[r].center);
                    cells.push_back(meta[r].cell);
                    priors.push_back(meta[r].prior);
                    boxes.push_back(box);
                }
                const LossGrad bx = box_iou_loss(reg_pos, pc, cells, priors, boxes);
                const LossGrad cn = bce_logits(cntr_pos, cntr_target);
                Mat g_reg = Mat::Zero(static_cast<Eigen::Index>(rows), 8);
                Mat g_cntr = Mat::Zero(static_cast<Eigen::Index>(rows), 1);
                for (size_t q = 0; q < pos.size(); ++q) {
                    g_reg.row(static_cast<Eigen::Index>(pos[q])) = bx.grad.row(static_cast<Eigen::Index>(q));
                    g_cntr(static_cast<Eigen::Index>(pos[q]), 0) = cn.grad(static_cast<Eigen::Index>(q), 0);
                }
                terms.box = bx.value;
                terms.cntr = cn.value;
                term_vars[3] = nn::attach_loss(t, reg, bx.value, std::move(g_reg));
                term_vars[2] = nn::attach_loss(t, cntr, cn.value, std::move(g_cntr));
            }
        }
    }

    // RoI pooling and refinement.
    std::vector<Box3D> rois;
    std::vector<Box3D> matched;
    std::vector<size_t> roi_source;
    if (training) {
        std::vector<Box3D> boxes;
        for (const Proposal& p : R.proposals) boxes.push_back(p.box);
        std::vector<Box3D> gt_boxes;
        for (const GtBox& g : *gt) gt_boxes.push_back(g.box);
        R.selection = select_training_proposals(boxes, gt_boxes, cfg_.train_proposal_iou,
                                                static_cast<size_t>(cfg_.train_proposals));
        for (size_t i = 0; i < R.selection.size(); ++i) {
            rois.push_back(boxes[static_cast<size_t>(R.selection.proposal[i])]);
            matched.push_back(gt_boxes[static_cast<size_t>(R.selection.gt[i])]);
            roi_source.push_back(static_cast<size_t>(R.selection.proposal[i]));
        }
        R.report.train_proposals = static_cast<int>(rois.size());
    } else {
        for (size_t i = 0; i < R.proposals.size(); ++i) {
            rois.push_back(R.proposals[i].box);
            roi_source.push_back(i);
        }
    }

    if (!rois.empty()) {
        const RoiPlan plan = stage("roi_pool", [&] { return plan_roi_pooling(B.coords, B.stride, vs, rois, cfg_.roi()); });
        R.hollow = plan.hollow;
        Var q1 = nn::relu(t, nn::sparse_conv(t, B.feats, t.param(*roi1_.kernel), t.param(*roi1_.bias), plan.block1));
        Var pooled = nn::relu(t, nn::sparse_conv(t, q1, t.param(*roi2_.kernel), t.param(*roi2_.bias), plan.block2));
        std::vector<int32_t> idx(rois.size());
        for (size_t m = 0; m < rois.size(); ++m) idx[m] = plan.hollow[m] ? -1 : static_cast<int32_t>(m);
        pooled = nn::gather_rows(t, pooled, std::move(idx));
        Var residual = apply(t, nn::relu(t, apply(t, pooled, refine1_)), refine2_);

        if (training) {
            LossGrad rb = rebox_loss(residual->val(), rois, matched);
            terms.rebox = rb.value;
            term_vars[5] = nn::attach_loss(t, residual, rb.value, std::move(rb.grad));
        }
        const std::vector<Box3D> refined = decode_refinement(residual->val(), rois);
        for (size_t m = 0; m < rois.size(); ++m) {
            const Proposal& p = R.proposals[roi_source[m]];
            R.detections.push_back({refined[m], p.class_id, p.score});
        }
    }
    return finish();
}

std::vector<Detection> Detector::infer(const PointCloud& cloud) const {
    Tape t(false);
    return forward(t, cloud, nullptr, cfg_.tau_min).detections;
}

}  // namespace sparsedet3d
