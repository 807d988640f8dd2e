// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/train.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "sparsedet3d/random.hpp"

namespace sparsedet3d {

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(const std::vector<nn::Parameter*>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (nn::Parameter* p : params) {
        if (!p->trainable || p->grad.size() == 0) continue;
        Moments& s = state_[p];
        if (s.m.size() == 0) {
            s.m = nn::Mat::Zero(p->value.rows(), p->value.cols());
            s.v = nn::Mat::Zero(p->value.rows(), p->value.cols());
        }
        s.m = b1_ * s.m + (1.0 - b1_) * p->grad;
        s.v = b2_ * s.v + (1.0 - b2_) * p->grad.cwiseProduct(p->grad);
        if (p->decay && wd_ > 0.0) p->value *= 1.0 - lr_ * wd_;
        p->value.array() -= lr_ * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps_);
    }
}

double grad_norm(const std::vector<nn::Parameter*>& params) {
    double sq = 0.0;
    for (const nn::Parameter* p : params) {
        if (p->grad.size() > 0) sq += p->grad.squaredNorm();
    }
    return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<nn::Parameter*>& params, double max_norm) {
    const double norm = grad_norm(params);
    if (norm > max_norm) {
        const double scale = max_norm / (norm + 1e-6);
        for (nn::Parameter* p : params) {
            if (p->grad.size() > 0) p->grad *= scale;
        }
    }
    return norm;
}

int epoch_of_step(int step, int batch, size_t n_scenes) {
    return static_cast<int>(static_cast<int64_t>(step) * batch / static_cast<int64_t>(n_scenes));
}

std::vector<TrainStep> run_toy_train(Detector& model, const std::vector<SceneRecord>& scenes, const RunConfig& cfg,
                                     const std::function<void(const TrainStep&)>& on_step) {
    if (scenes.empty()) throw std::invalid_argument("run_toy_train: need at least one scene");
    cfg.validate();
    for (const SceneRecord& s : scenes) s.validate(cfg.num_classes);
    const TauSchedule tau = cfg.tau();
    AdamW opt(cfg.lr, cfg.weight_decay);
    const std::vector<nn::Parameter*> params = model.params().trainable();

    Rng rng(cfg.seed ^ 0x5eedULL);
    std::vector<size_t> order(scenes.size());
    size_t cursor = order.size();
    auto next_scene = [&]() {
        if (cursor == order.size()) {
            std::iota(order.begin(), order.end(), size_t{0});
            for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
            cursor = 0;
        }
        return order[cursor++];
    };

    std::vector<TrainStep> trace;
    for (int step = 0; step < cfg.steps; ++step) {
        TrainStep rec;
        rec.step = step;
        rec.epoch = epoch_of_step(step, cfg.batch, scenes.size());
        rec.tau = tau.at(rec.epoch);
        model.params().zero_grad();
        LossReport mean;
        for (int b = 0; b < cfg.batch; ++b) {
            const SceneRecord& scene = scenes[next_scene()];
            nn::Tape tape(true);
            ForwardResult r = model.forward(tape, scene.cloud, &scene.gt, rec.tau);
            tape.backward(r.total);
            const auto v = loss_term_values(r.report.terms);
            double* dst[6] = {&mean.terms.sem, &mean.terms.vote, &mean.terms.cntr,
                              &mean.terms.box, &mean.terms.cls, &mean.terms.rebox};
            for (size_t i = 0; i < 6; ++i) *dst[i] += v[i] / cfg.batch;
            mean.positives += r.report.positives;
            mean.train_proposals += r.report.train_proposals;
        }
        const LossReport total = total_loss(mean.terms, cfg.loss);
        rec.report = total;
        rec.report.positives = mean.positives;
        rec.report.train_proposals = mean.train_proposals;
        if (cfg.batch > 1) {
            for (nn::Parameter* p : params) {
                if (p->grad.size() > 0) p->grad /= static_cast<double>(cfg.batch);
            }
        }
        rec.grad_norm = clip_grad_norm(params, cfg.grad_clip);
        rec.clipped_norm = grad_norm(params);
        opt.step(params);
        trace.push_back(rec);
        if (on_step) on_step(rec);
    }
    return trace;
}

}  // namespace sparsedet3d
