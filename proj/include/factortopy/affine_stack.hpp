// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "factortopy/dense_array.hpp"

namespace factortopy {

enum class Activation { identity, relu, tanh, sigmoid, softmax, silu };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation act);

/// One affine map `out = W·in + b` with W stored out×in.
struct AffineLayer {
    DenseArray weight;  // out×in
    DenseArray bias;    // out

    std::size_t in_dim() const { return weight.dim(1); }
    std::size_t out_dim() const { return weight.dim(0); }
};

/// Gradients of an AffineStack, one entry per layer.
struct AffineStackGrads {
    std::vector<Matrix> weight;
    std::vector<Matrix> bias;

    void zero();
};

/// A small MLP: affine layers separated by `hidden` activations, the last
/// one followed by `output`. Softmax is row-wise.
class AffineStack {
public:
    struct Tape {
        std::vector<Matrix> inputs;  // input to each affine layer
        std::vector<Matrix> pre;     // pre-activation of each layer
        Matrix output;
    };

    AffineStack() = default;
    AffineStack(std::vector<AffineLayer> layers, Activation hidden, Activation output);

    /// Uniform init in ±1/sqrt(fan_in) for every layer; if `zero_last`, the
    /// final layer starts at zero.
    static AffineStack random(const std::vector<std::size_t>& dims, Activation hidden,
                              Activation output, std::mt19937_64& rng, bool zero_last = false);

    std::size_t in_dim() const { return layers_.front().in_dim(); }
    std::size_t out_dim() const { return layers_.back().out_dim(); }
    std::size_t depth() const { return layers_.size(); }
    std::size_t parameter_count() const;
    Activation hidden_activation() const { return hidden_; }
    Activation output_activation() const { return output_; }

    std::vector<AffineLayer>& layers() { return layers_; }
    const std::vector<AffineLayer>& layers() const { return layers_; }

    /// Forward pass over K×in rows. `tape` may be null when no backward is needed.
    Matrix apply(const Matrix& input, Tape* tape = nullptr) const;

    /// Accumulates parameter gradients into `grads` and returns dL/dinput.
    Matrix backward(const Tape& tape, const Matrix& d_output, AffineStackGrads& grads) const;

    AffineStackGrads zero_grads() const;

private:
    std::vector<AffineLayer> layers_;
    Activation hidden_ = Activation::tanh;
    Activation output_ = Activation::identity;
};

void apply_activation(Activation act, Matrix& values);

/// Given pre-activation `pre`, post-activation `post` and dL/dpost, returns dL/dpre.
Matrix activation_backward(Activation act, const Matrix& pre, const Matrix& post,
                           const Matrix& d_post);

}  // namespace factortopy
