// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sparsedet3d/random.hpp"
#include "sparsedet3d/sparse_tensor.hpp"

/// Minimal reverse-mode differentiation over row-major feature matrices.
namespace sparsedet3d::nn {

using Mat = FeatureMatrix<double>;

/// Named tensor. Trainable parameters receive gradients; buffers (running
/// normalization statistics) are stored and checkpointed but never trained.
struct Parameter {
    std::string name;
    Mat value;
    Mat grad;
    bool trainable = true;
    bool decay = true;  // subject to weight decay
};

class ParameterStore {
public:
    Parameter& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool trainable = true);
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    /// Insertion order.
    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    std::vector<Parameter*> trainable();

    void zero_grad();
    size_t scalar_count() const;

private:
    std::deque<Parameter> storage_;
    std::map<std::string, size_t> index_;
};

/// He-normal fill scaled for `fan_in` inputs.
void init_he(Parameter& p, Eigen::Index fan_in, Rng& rng);

struct Node {
    Mat value;
    Mat grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    std::function<void(Node&)> backward;

    const Mat& val() const { return param ? param->value : value; }
    Eigen::Index rows() const { return val().rows(); }
    Eigen::Index cols() const { return val().cols(); }
    double scalar() const { return val()(0, 0); }
};

using Var = Node*;

/// Owns the nodes of one forward pass. With recording disabled no backward
/// closures are kept and parameters are read-only.
class Tape {
public:
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    Var constant(Mat value);
    Var param(Parameter& p);

    /// Creates a node; `parents` decide whether it requires grad.
    Var make(Mat value, std::initializer_list<Var> parents, std::function<void(Node&)> backward);
    Var make(Mat value, const std::vector<Var>& parents, std::function<void(Node&)> backward);

    /// Seeds d(loss)/d(loss) = 1 and propagates in reverse creation order.
    void backward(Var loss);

    size_t size() const { return nodes_.size(); }

private:
    std::deque<Node> nodes_;
    bool record_;
};

/// Adds `g` into the gradient of `n` (parameter gradients live in the store).
void accumulate(Node& n, const Mat& g);

// Elementwise and dense ops.
Var add(Tape& t, Var a, Var b);
Var relu(Tape& t, Var x);
Var sigmoid(Tape& t, Var x);
/// x W (+ b broadcast over rows).
Var linear(Tape& t, Var x, Var w, Var b = nullptr);
Var concat_cols(Tape& t, Var a, Var b);
Var slice_cols(Tape& t, Var x, Eigen::Index begin, Eigen::Index count);
/// Stacks row blocks of equal width.
Var concat_rows(Tape& t, const std::vector<Var>& parts);
/// Row i of the result is x[idx[i]], or zeros when idx[i] < 0.
Var gather_rows(Tape& t, Var x, std::vector<int32_t> idx);
/// Row s of the result is the mean of x rows with seg[i] == s (rows with
/// seg[i] < 0 are skipped).
Var segment_mean(Tape& t, Var x, std::vector<int32_t> seg, Eigen::Index n_segments);

/// Sparse convolution over a prebuilt kernel map. `kernel` is a
/// (k^3 * C_in) x C_out parameter, `bias` optional 1 x C_out.
Var sparse_conv(Tape& t, Var x, Var kernel, Var bias, std::shared_ptr<const KernelMap> kmap);

enum class NormMode { batch, instance };

struct NormParams {
    Parameter* gamma = nullptr;
    Parameter* beta = nullptr;
    Parameter* running_mean = nullptr;
    Parameter* running_var = nullptr;
};

/// Per-channel normalization over rows. Batch mode uses row statistics
/// while recording (updating the running buffers) and the running buffers
/// otherwise; instance mode always uses row statistics.
Var normalize(Tape& t, Var x, const NormParams& p, NormMode mode, double momentum = 0.1, double eps = 1e-5);

/// Scalar node whose value is `value` and whose gradient with respect to
/// `x` is `dvalue_dx` (same shape as x).
Var attach_loss(Tape& t, Var x, double value, Mat dvalue_dx);

/// sum_i w_i * terms_i for scalar terms.
Var weighted_sum(Tape& t, const std::vector<Var>& terms, const std::vector<double>& weights);

}  // namespace sparsedet3d::nn
