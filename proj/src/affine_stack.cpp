// SPDX-License-Identifier: Apache-2.0
#include "factortopy/affine_stack.hpp"

#include <algorithm>
#include <cmath>

namespace factortopy {

Activation activation_from_string(const std::string& name) {
    if (name == "identity") return Activation::identity;
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "softmax") return Activation::softmax;
    if (name == "silu") return Activation::silu;
    throw InvalidArgument("unknown activation '" + name + "'");
}

std::string to_string(Activation act) {
    switch (act) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::sigmoid: return "sigmoid";
        case Activation::softmax: return "softmax";
        case Activation::silu: return "silu";
    }
    return "identity";
}

void AffineStackGrads::zero() {
    for (auto& w : weight) w.fill(0.0);
    for (auto& b : bias) b.fill(0.0);
}

namespace {

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline void axpy(double* y, double a, const double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace

void apply_activation(Activation act, Matrix& values) {
    auto& v = values.values();
    switch (act) {
        case Activation::identity: return;
        case Activation::relu:
            for (double& x : v) x = std::max(x, 0.0);
            return;
        case Activation::tanh:
            for (double& x : v) x = std::tanh(x);
            return;
        case Activation::sigmoid:
            for (double& x : v) x = sigmoid(x);
            return;
        case Activation::silu:
            for (double& x : v) x = x * sigmoid(x);
            return;
        case Activation::softmax: {
            const std::size_t rows = values.dim(0), cols = values.dim(1);
            for (std::size_t r = 0; r < rows; ++r) {
                double* row = values.data() + r * cols;
                const double top = *std::max_element(row, row + cols);
                double sum = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    row[c] = std::exp(row[c] - top);
                    sum += row[c];
                }
                for (std::size_t c = 0; c < cols; ++c) row[c] /= sum;
            }
            return;
        }
    }
}

Matrix activation_backward(Activation act, const Matrix& pre, const Matrix& post,
                           const Matrix& d_post) {
    Matrix d_pre(d_post.shape());
    const std::size_t n = d_post.size();
    switch (act) {
        case Activation::identity: return d_post;
        case Activation::relu:
            for (std::size_t i = 0; i < n; ++i) d_pre[i] = pre[i] > 0 ? d_post[i] : 0.0;
            break;
        case Activation::tanh:
            for (std::size_t i = 0; i < n; ++i) d_pre[i] = d_post[i] * (1.0 - post[i] * post[i]);
            break;
        case Activation::sigmoid:
            for (std::size_t i = 0; i < n; ++i) d_pre[i] = d_post[i] * post[i] * (1.0 - post[i]);
            break;
        case Activation::silu:
            for (std::size_t i = 0; i < n; ++i) {
                const double s = sigmoid(pre[i]);
                d_pre[i] = d_post[i] * (s + pre[i] * s * (1.0 - s));
            }
            break;
        case Activation::softmax: {
            const std::size_t rows = post.dim(0), cols = post.dim(1);
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += d_post(r, c) * post(r, c);
                for (std::size_t c = 0; c < cols; ++c) {
                    d_pre(r, c) = post(r, c) * (d_post(r, c) - dot);
                }
            }
            break;
        }
    }
    return d_pre;
}

AffineStack::AffineStack(std::vector<AffineLayer> layers, Activation hidden, Activation output)
    : layers_(std::move(layers)), hidden_(hidden), output_(output) {
    if (layers_.empty()) throw InvalidArgument("AffineStack needs at least one layer");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.dim(0) != l.out_dim()) {
            throw InvalidArgument("AffineStack layer " + std::to_string(i) +
                                  " has inconsistent weight/bias shapes");
        }
        if (i > 0 && layers_[i - 1].out_dim() != l.in_dim()) {
            throw InvalidArgument("AffineStack layer " + std::to_string(i) +
                                  " input width does not chain with previous output");
        }
    }
}

AffineStack AffineStack::random(const std::vector<std::size_t>& dims, Activation hidden,
                                Activation output, std::mt19937_64& rng, bool zero_last) {
    if (dims.size() < 2) throw InvalidArgument("AffineStack needs at least in and out dims");
    std::vector<AffineLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const std::size_t in = dims[i], out = dims[i + 1];
        AffineLayer layer{DenseArray({out, in}), DenseArray({out})};
        const bool zero = zero_last && i + 2 == dims.size();
        if (!zero) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (float& w : layer.weight.values()) w = static_cast<float>(dist(rng));
            for (float& b : layer.bias.values()) b = static_cast<float>(dist(rng));
        }
        layers.push_back(std::move(layer));
    }
    return AffineStack(std::move(layers), hidden, output);
}

std::size_t AffineStack::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

AffineStackGrads AffineStack::zero_grads() const {
    AffineStackGrads g;
    for (const auto& l : layers_) {
        g.weight.emplace_back(l.weight.shape());
        g.bias.emplace_back(l.bias.shape());
    }
    return g;
}

Matrix AffineStack::apply(const Matrix& input, Tape* tape) const {
    if (input.rank() != 2 || input.dim(1) != in_dim()) {
        throw InvalidArgument("AffineStack::apply: input " + shape_string(input.shape()) +
                              " does not match in-dimension " + std::to_string(in_dim()));
    }
    if (tape) {
        tape->inputs.clear();
        tape->pre.clear();
    }
    Matrix x = input;
    const std::size_t rows = input.dim(0);
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const auto& layer = layers_[li];
        const std::size_t in = layer.in_dim(), out = layer.out_dim();
        // Transposed copy so the inner loop is a contiguous axpy.
        std::vector<double> wt(in * out);
        for (std::size_t o = 0; o < out; ++o)
            for (std::size_t i = 0; i < in; ++i) wt[i * out + o] = layer.weight(o, i);
        Matrix y({rows, out});
        for (std::size_t r = 0; r < rows; ++r) {
            double* yr = y.data() + r * out;
            for (std::size_t o = 0; o < out; ++o) yr[o] = layer.bias[o];
            const double* xr = x.data() + r * in;
            for (std::size_t i = 0; i < in; ++i) {
                if (xr[i] != 0.0) axpy(yr, xr[i], wt.data() + i * out, out);
            }
        }
        if (tape) {
            tape->inputs.push_back(std::move(x));
            tape->pre.push_back(y);
        }
        apply_activation(li + 1 == layers_.size() ? output_ : hidden_, y);
        x = std::move(y);
    }
    if (tape) tape->output = x;
    return x;
}

Matrix AffineStack::backward(const Tape& tape, const Matrix& d_output,
                             AffineStackGrads& grads) const {
    if (tape.pre.size() != layers_.size()) {
        throw InvalidArgument("AffineStack::backward: tape does not belong to this stack");
    }
    Matrix grad = d_output;
    for (std::size_t li = layers_.size(); li-- > 0;) {
        const auto& layer = layers_[li];
        const Matrix& pre = tape.pre[li];
        const Matrix& post = li + 1 == layers_.size() ? tape.output : tape.inputs[li + 1];
        const Matrix d_pre =
            activation_backward(li + 1 == layers_.size() ? output_ : hidden_, pre, post, grad);
        const Matrix& x = tape.inputs[li];
        const std::size_t rows = x.dim(0), in = layer.in_dim(), out = layer.out_dim();
        Matrix& gw = grads.weight[li];
        Matrix& gb = grads.bias[li];
        std::vector<double> w(layer.weight.values().begin(), layer.weight.values().end());
        Matrix d_in({rows, in});
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = x.data() + r * in;
            double* dr = d_in.data() + r * in;
            for (std::size_t o = 0; o < out; ++o) {
                const double g = d_pre(r, o);
                if (g == 0.0) continue;
                gb[o] += g;
                axpy(gw.data() + o * in, g, xr, in);
                axpy(dr, g, w.data() + o * in, in);
            }
        }
        grad = std::move(d_in);
    }
    return grad;
}

}  // namespace factortopy
