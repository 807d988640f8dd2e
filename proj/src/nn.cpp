// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace sparsedet3d::nn {

Parameter& ParameterStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("ParameterStore: duplicate parameter " + name);
    index_[name] = storage_.size();
    Parameter& p = storage_.emplace_back();
    p.name = name;
    p.value = Mat::Zero(rows, cols);
    p.trainable = trainable;
    return p;
}

Parameter& ParameterStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterStore: unknown parameter " + name);
    return storage_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterStore: unknown parameter " + name);
    return storage_[it->second];
}

std::vector<Parameter*> ParameterStore::all() {
    std::vector<Parameter*> out;
    for (auto& p : storage_) out.push_back(&p);
    return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
    std::vector<const Parameter*> out;
    for (const auto& p : storage_) out.push_back(&p);
    return out;
}

std::vector<Parameter*> ParameterStore::trainable() {
    std::vector<Parameter*> out;
    for (auto& p : storage_) {
        if (p.trainable) out.push_back(&p);
    }
    return out;
}

void ParameterStore::zero_grad() {
    for (auto& p : storage_) {
        if (!p.trainable) continue;
        if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
            p.grad = Mat::Zero(p.value.rows(), p.value.cols());
        } else {
            p.grad.setZero();
        }
    }
}

size_t ParameterStore::scalar_count() const {
    size_t n = 0;
    for (const auto& p : storage_) n += static_cast<size_t>(p.value.size());
    return n;
}

void init_he(Parameter& p, Eigen::Index fan_in, Rng& rng) {
    const double sd = std::sqrt(2.0 / static_cast<double>(std::max<Eigen::Index>(1, fan_in)));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = sd * rng.normal();
}

void accumulate(Node& n, const Mat& g) {
    if (!n.requires_grad) return;
    if (n.param) {
        Mat& pg = n.param->grad;
        if (pg.rows() != g.rows() || pg.cols() != g.cols()) pg = Mat::Zero(g.rows(), g.cols());
        pg += g;
        return;
    }
    if (n.grad.size() == 0) {
        n.grad = g;
    } else {
        n.grad += g;
    }
}

Var Tape::constant(Mat value) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    return &n;
}

Var Tape::param(Parameter& p) {
    Node& n = nodes_.emplace_back();
    n.param = &p;
    n.requires_grad = record_ && p.trainable;
    return &n;
}

Var Tape::make(Mat value, const std::vector<Var>& parents, std::function<void(Node&)> backward) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    if (record_) {
        for (Var p : parents) {
            if (p && p->requires_grad) n.requires_grad = true;
        }
        if (n.requires_grad) n.backward = std::move(backward);
    }
    return &n;
}

Var Tape::make(Mat value, std::initializer_list<Var> parents, std::function<void(Node&)> backward) {
    return make(std::move(value), std::vector<Var>(parents), std::move(backward));
}

void Tape::backward(Var loss) {
    if (!record_) throw std::logic_error("Tape::backward on a non-recording tape");
    if (loss->rows() != 1 || loss->cols() != 1) throw std::invalid_argument("Tape::backward: loss must be scalar");
    if (!loss->requires_grad) return;
    loss->grad = Mat::Ones(1, 1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = *it;
        if (n.backward && n.grad.size() > 0) n.backward(n);
    }
}

Var add(Tape& t, Var a, Var b) {
    if (a->rows() != b->rows() || a->cols() != b->cols()) throw std::invalid_argument("nn::add: shape mismatch");
    return t.make(a->val() + b->val(), {a, b}, [a, b](Node& n) {
        accumulate(*a, n.grad);
        accumulate(*b, n.grad);
    });
}

Var relu(Tape& t, Var x) {
    Mat y = x->val().cwiseMax(0.0);
    return t.make(std::move(y), {x}, [x](Node& n) {
        accumulate(*x, (x->val().array() > 0.0).select(n.grad.array(), 0.0).matrix());
    });
}

Var sigmoid(Tape& t, Var x) {
    Mat y = (1.0 / (1.0 + (-x->val().array()).exp())).matrix();
    return t.make(std::move(y), {x}, [x](Node& n) {
        const auto s = n.value.array();
        accumulate(*x, (n.grad.array() * s * (1.0 - s)).matrix());
    });
}

Var linear(Tape& t, Var x, Var w, Var b) {
    if (x->cols() != w->rows()) {
        throw std::invalid_argument("nn::linear: input width " + std::to_string(x->cols()) + " != weight rows " +
                                    std::to_string(w->rows()));
    }
    Mat y = x->val() * w->val();
    if (b) {
        if (b->rows() != 1 || b->cols() != w->cols()) throw std::invalid_argument("nn::linear: bias shape mismatch");
        y.rowwise() += b->val().row(0);
    }
    return t.make(std::move(y), {x, w, b}, [x, w, b](Node& n) {
        if (x->requires_grad) accumulate(*x, n.grad * w->val().transpose());
        if (w->requires_grad) accumulate(*w, x->val().transpose() * n.grad);
        if (b && b->requires_grad) accumulate(*b, n.grad.colwise().sum());
    });
}

Var concat_cols(Tape& t, Var a, Var b) {
    if (a->rows() != b->rows()) throw std::invalid_argument("nn::concat_cols: row mismatch");
    Mat y(a->rows(), a->cols() + b->cols());
    y.leftCols(a->cols()) = a->val();
    y.rightCols(b->cols()) = b->val();
    const Eigen::Index ca = a->cols();
    const Eigen::Index cb = b->cols();
    return t.make(std::move(y), {a, b}, [a, b, ca, cb](Node& n) {
        if (a->requires_grad) accumulate(*a, n.grad.leftCols(ca));
        if (b->requires_grad) accumulate(*b, n.grad.rightCols(cb));
    });
}

Var slice_cols(Tape& t, Var x, Eigen::Index begin, Eigen::Index count) {
    if (begin < 0 || begin + count > x->cols()) throw std::invalid_argument("nn::slice_cols: out of range");
    Mat y = x->val().middleCols(begin, count);
    return t.make(std::move(y), {x}, [x, begin, count](Node& n) {
        Mat g = Mat::Zero(x->rows(), x->cols());
        g.middleCols(begin, count) = n.grad;
        accumulate(*x, g);
    });
}

Var concat_rows(Tape& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("nn::concat_rows: no inputs");
    const Eigen::Index cols = parts.front()->cols();
    Eigen::Index rows = 0;
    for (Var p : parts) {
        if (p->cols() != cols) throw std::invalid_argument("nn::concat_rows: width mismatch");
        rows += p->rows();
    }
    Mat y(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
        y.middleRows(r, p->rows()) = p->val();
        r += p->rows();
    }
    return t.make(std::move(y), parts, [parts](Node& n) {
        Eigen::Index r = 0;
        for (Var p : parts) {
            if (p->requires_grad) accumulate(*p, n.grad.middleRows(r, p->rows()));
            r += p->rows();
        }
    });
}

Var gather_rows(Tape& t, Var x, std::vector<int32_t> idx) {
    const Mat& xv = x->val();
    Mat y = Mat::Zero(static_cast<Eigen::Index>(idx.size()), xv.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= 0) y.row(static_cast<Eigen::Index>(i)) = xv.row(idx[i]);
    }
    return t.make(std::move(y), {x}, [x, idx = std::move(idx)](Node& n) {
        Mat g = Mat::Zero(x->rows(), x->cols());
        for (size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= 0) g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
        }
        accumulate(*x, g);
    });
}

Var segment_mean(Tape& t, Var x, std::vector<int32_t> seg, Eigen::Index n_segments) {
    const Mat& xv = x->val();
    if (static_cast<Eigen::Index>(seg.size()) != xv.rows()) throw std::invalid_argument("nn::segment_mean: size mismatch");
    std::vector<double> count(static_cast<size_t>(n_segments), 0.0);
    Mat y = Mat::Zero(n_segments, xv.cols());
    for (size_t i = 0; i < seg.size(); ++i) {
        if (seg[i] < 0) continue;
        y.row(seg[i]) += xv.row(static_cast<Eigen::Index>(i));
        count[static_cast<size_t>(seg[i])] += 1.0;
    }
    for (Eigen::Index s = 0; s < n_segments; ++s) {
        if (count[s] > 0.0) y.row(s) /= count[s];
    }
    return t.make(std::move(y), {x}, [x, seg = std::move(seg), count = std::move(count)](Node& n) {
        Mat g = Mat::Zero(x->rows(), x->cols());
        for (size_t i = 0; i < seg.size(); ++i) {
            if (seg[i] >= 0) g.row(static_cast<Eigen::Index>(i)) = n.grad.row(seg[i]) / count[seg[i]];
        }
        accumulate(*x, g);
    });
}

Var sparse_conv(Tape& t, Var x, Var kernel, Var bias, std::shared_ptr<const KernelMap> kmap) {
    const Mat& xv = x->val();
    const Mat& kv = kernel->val();
    if (xv.rows() != kmap->n_in) throw std::invalid_argument("nn::sparse_conv: input rows disagree with kernel map");
    if (kv.rows() != static_cast<Eigen::Index>(kmap->n_offsets) * xv.cols()) {
        throw std::invalid_argument("nn::sparse_conv: kernel has " + std::to_string(kv.rows()) + " rows, expected " +
                                    std::to_string(kmap->n_offsets * xv.cols()));
    }
    Mat y = Mat::Zero(kmap->n_out, kv.cols());
    if (bias) y.rowwise() += bias->val().row(0);
    contract_kernel_map(*kmap, xv, kv, y);
    return t.make(std::move(y), {x, kernel, bias}, [x, kernel, bias, kmap](Node& n) {
        Mat gx;
        Mat* gx_ptr = nullptr;
        if (x->requires_grad) {
            gx = Mat::Zero(x->rows(), x->cols());
            gx_ptr = &gx;
        }
        Mat* gk_ptr = nullptr;
        Mat gk_local;
        if (kernel->requires_grad) {
            if (kernel->param) {
                Mat& pg = kernel->param->grad;
                if (pg.rows() != kernel->rows() || pg.cols() != kernel->cols()) pg = Mat::Zero(kernel->rows(), kernel->cols());
                gk_ptr = &pg;
            } else {
                gk_local = Mat::Zero(kernel->rows(), kernel->cols());
                gk_ptr = &gk_local;
            }
        }
        contract_kernel_map_backward(*kmap, x->val(), kernel->val(), n.grad, gx_ptr, gk_ptr);
        if (gx_ptr) accumulate(*x, gx);
        if (gk_ptr == &gk_local) accumulate(*kernel, gk_local);
        if (bias && bias->requires_grad && n.grad.rows() > 0) accumulate(*bias, n.grad.colwise().sum());
    });
}

Var normalize(Tape& t, Var x, const NormParams& p, NormMode mode, double momentum, double eps) {
    const Mat& xv = x->val();
    const Eigen::Index rows = xv.rows();
    const Eigen::Index cols = xv.cols();
    Var gamma = t.param(*p.gamma);
    Var beta = t.param(*p.beta);
    if (rows == 0) return t.constant(Mat::Zero(0, cols));

    const bool use_batch_stats = mode == NormMode::instance || t.recording();
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd var;
    if (use_batch_stats) {
        mean = xv.colwise().mean();
        var = (xv.rowwise() - mean).array().square().colwise().mean().matrix();
        if (mode == NormMode::batch && p.running_mean && p.running_var) {
            p.running_mean->value.row(0) = (1.0 - momentum) * p.running_mean->value.row(0) + momentum * mean;
            p.running_var->value.row(0) = (1.0 - momentum) * p.running_var->value.row(0) + momentum * var;
        }
    } else {
        mean = p.running_mean->value.row(0);
        var = p.running_var->value.row(0);
    }
    const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt().matrix();
    Mat xhat = ((xv.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
    Mat y = (xhat.array().rowwise() * gamma->val().row(0).array()).matrix();
    y.rowwise() += beta->val().row(0);

    return t.make(std::move(y), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), inv_std, use_batch_stats](Node& n) {
                      const Mat& dy = n.grad;
                      if (gamma->requires_grad) accumulate(*gamma, (dy.array() * xhat.array()).colwise().sum().matrix());
                      if (beta->requires_grad) accumulate(*beta, dy.colwise().sum());
                      if (!x->requires_grad) return;
                      const Eigen::RowVectorXd g = gamma->val().row(0);
                      Mat dxhat = (dy.array().rowwise() * g.array()).matrix();
                      if (!use_batch_stats) {
                          accumulate(*x, (dxhat.array().rowwise() * inv_std.array()).matrix());
                          return;
                      }
                      const double m = static_cast<double>(dy.rows());
                      const Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
                      const Eigen::RowVectorXd sum_dx = (dxhat.array() * xhat.array()).colwise().sum().matrix();
                      Mat dx = dxhat * m;
                      dx.rowwise() -= sum_d;
                      dx -= (xhat.array().rowwise() * sum_dx.array()).matrix();
                      dx = (dx.array().rowwise() * (inv_std.array() / m)).matrix();
                      accumulate(*x, dx);
                  });
}

Var attach_loss(Tape& t, Var x, double value, Mat dvalue_dx) {
    if (dvalue_dx.rows() != x->rows() || dvalue_dx.cols() != x->cols()) {
        throw std::invalid_argument("nn::attach_loss: gradient shape mismatch");
    }
    Mat y(1, 1);
    y(0, 0) = value;
    return t.make(std::move(y), {x}, [x, g = std::move(dvalue_dx)](Node& n) { accumulate(*x, g * n.grad(0, 0)); });
}

Var weighted_sum(Tape& t, const std::vector<Var>& terms, const std::vector<double>& weights) {
    if (terms.size() != weights.size()) throw std::invalid_argument("nn::weighted_sum: size mismatch");
    Mat y = Mat::Zero(1, 1);
    for (size_t i = 0; i < terms.size(); ++i) y(0, 0) += weights[i] * terms[i]->scalar();
    return t.make(std::move(y), terms, [terms, weights](Node& n) {
        for (size_t i = 0; i < terms.size(); ++i) {
            if (terms[i]->requires_grad) accumulate(*terms[i], Mat::Constant(1, 1, weights[i] * n.grad(0, 0)));
        }
    });
}

}  // namespace sparsedet3d::nn
