#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sblab/common.hpp"

namespace sblab {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

// Dense row-major f64 tensor. `grad` stays empty until a backward pass
// flushes into it (leaves / parameters only).
struct Tensor {
    Shape shape;
    std::vector<double> data;
    std::optional<std::vector<double>> grad;

    Tensor() = default;
    explicit Tensor(Shape s);

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v);
    static Tensor from(Shape s, std::vector<double> values);
    static Tensor scalar(double v) { return from({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    double& at(int i) { return data[static_cast<size_t>(i)]; }
    double at(int i) const { return data[static_cast<size_t>(i)]; }
    double& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double& at(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double at(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double& at(int i, int j, int k, int l) {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    double at(int i, int j, int k, int l) const {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    bool all_finite() const;
};

// Trainable tensor with a persistent SGD momentum buffer.
struct Parameter {
    std::string name;
    Tensor tensor;
    std::vector<double> momentum;

    Parameter() = default;
    Parameter(std::string n, Tensor t)
        : name(std::move(n)), tensor(std::move(t)), momentum(tensor.data.size(), 0.0) {}
};

// Handle to a node on a Tape.
struct Val {
    int id = -1;
};

// Recorded reverse-mode graph. One tape per forward pass; backward walks the
// nodes in exact reverse recording order and finally flushes leaf gradients
// into the watched Parameter/Tensor objects (accumulating additively).
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves.
    Val leaf(Parameter& p);          // gradient flushes into p.tensor.grad
    Val watch(Tensor& t);            // gradient flushes into t.grad
    Val constant(Tensor t);          // no gradient tracking
    Val constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // Elementwise / structural ops.
    Val add(Val a, Val b);
    Val sub(Val a, Val b);
    Val mul(Val a, Val b);
    Val scale(Val a, double c);
    Val neg(Val a) { return scale(a, -1.0); }
    Val relu(Val x);
    Val sum(Val x);                  // -> [1]
    Val mean(Val x);                 // -> [1]
    Val mean_hw(Val x);              // [C,H,W] -> [C]
    Val concat1d(std::span<const Val> parts);
    Val stack_rows(std::span<const Val> rows);  // B x [K] -> [B,K]
    Val add_rowvec(Val m, Val v);    // [R,C] + [C]
    Val reshape(Val x, Shape new_shape);  // same numel; gradient passes through

    // Linear algebra / conv.
    Val matmul(Val a, Val b);        // [m,k] x [k,n] -> [m,n]
    Val conv2d(Val input, Val kernels, Val bias);  // valid padding, stride 1

    // Softmax family (numerically stable).
    Val log_softmax(Val logits);         // rank-1
    Val log_softmax_rows(Val logits);    // rank-2, row-wise

    // Fused batch losses over row-wise log-probabilities; all return the
    // mean over rows as a [1] scalar.
    Val nll_rows(Val logprobs, std::vector<int> labels);
    Val soft_ce_rows(Val logprobs, Tensor weights);
    Val entropy_rows(Val logprobs);  // H(q) with q = exp(logprobs)

    // Identity forward; backward multiplies the upstream gradient by -lambda.
    Val grad_reverse(Val x, double lambda);

    // Reverse pass from a [1] scalar. May be called repeatedly; leaf
    // gradients accumulate additively across calls.
    void backward(Val scalar_loss);

    const Tensor& value(Val v) const { return nodes_[check(v)].value; }
    const std::vector<double>& grad(Val v) const { return nodes_[check(v)].grad; }
    double scalar_value(Val v) const;

    // Smallest |pre-activation| seen by any relu recorded on this tape.
    // Finite-difference checks use it to detect kink crossings.
    double min_relu_margin() const { return min_relu_margin_; }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        bool needs_grad = false;
        std::function<void(Tape&)> backward;
        Parameter* param = nullptr;
        Tensor* watched = nullptr;
    };

    std::vector<Node> nodes_;
    double min_relu_margin_ = std::numeric_limits<double>::infinity();
    bool backward_ran_ = false;

    int check(Val v) const;
    Node& node(Val v) { return nodes_[check(v)]; }
    const Node& node(Val v) const { return nodes_[check(v)]; }
    Val push(Tensor value, bool needs_grad, std::function<void(Tape&)> bw);
};

// buffer <- momentum*buffer + grad + weight_decay*param; param -= lr*buffer;
// grads are cleared afterwards.
void sgd_step(std::span<Parameter* const> params, double lr, double momentum,
              double weight_decay);

// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
void glorot_init(Parameter& p, int fan_in, int fan_out, uint64_t seed);

// Central finite differences, (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps);

// Stable in-place helpers shared with non-autodiff code paths.
void log_softmax_inplace(std::span<double> row);
// Shannon entropy of a distribution, with probabilities clamped at 1e-12
// inside the log so that 0*log 0 contributes 0.
double entropy(std::span<const double> dist);

}  // namespace sblab
