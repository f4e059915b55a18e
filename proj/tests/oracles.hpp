// SPDX-License-Identifier: Apache-2.0
// Independent reference implementations used by the tests. Nothing here calls
// into the library's numerical code; only parameter containers are shared.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <random>
#include <vector>

#include "factortopy/encoder.hpp"

namespace oracle {

using factortopy::Activation;

inline double activate(Activation a, double x) {
    switch (a) {
        case Activation::identity: return x;
        case Activation::relu: return x > 0 ? x : 0.0;
        case Activation::tanh: return std::tanh(x);
        case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
        case Activation::silu: return x / (1.0 + std::exp(-x));
        case Activation::softmax: return x;  // handled row-wise
    }
    return x;
}

inline std::vector<double> mlp(const factortopy::AffineStack& stack, std::vector<double> x) {
    const auto& layers = stack.layers();
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto& W = layers[k].weight;
        const auto& b = layers[k].bias;
        std::vector<double> y(W.dim(0));
        for (std::size_t o = 0; o < W.dim(0); ++o) {
            double s = b[o];
            for (std::size_t i = 0; i < W.dim(1); ++i) s += double(W(o, i)) * x[i];
            y[o] = s;
        }
        const Activation a = k + 1 < layers.size() ? stack.hidden_activation() : stack.output_activation();
        if (a == Activation::softmax) {
            double m = *std::max_element(y.begin(), y.end()), z = 0;
            for (double& v : y) z += (v = std::exp(v - m));
            for (double& v : y) v /= z;
        } else {
            for (double& v : y) v = activate(a, v);
        }
        x = std::move(y);
    }
    return x;
}

inline std::vector<double> positional(const double xyz[3], std::size_t freqs) {
    std::vector<double> out;
    for (int a = 0; a < 3; ++a) {
        for (std::size_t j = 0; j < freqs; ++j) {
            const double f = std::ldexp(std::numbers::pi, static_cast<int>(j));
            out.push_back(std::sin(f * xyz[a]));
            out.push_back(std::cos(f * xyz[a]));
        }
    }
    return out;
}

/// Bilinear blend of a C×H×W grid at (u, v) in [-1, 1], align-corners,
/// written as an explicit weighted sum over every cell.
inline std::vector<double> blend(const factortopy::DenseArray& grid, double u, double v) {
    const std::size_t C = grid.dim(0), H = grid.dim(1), W = grid.dim(2);
    const double px = W > 1 ? (std::clamp(u, -1.0, 1.0) + 1) / 2 * double(W - 1) : 0.0;
    const double py = H > 1 ? (std::clamp(v, -1.0, 1.0) + 1) / 2 * double(H - 1) : 0.0;
    std::vector<double> out(C, 0.0);
    for (std::size_t y = 0; y < H; ++y) {
        const double wy = std::max(0.0, 1.0 - std::abs(py - double(y)));
        if (wy == 0.0) continue;
        for (std::size_t x = 0; x < W; ++x) {
            const double wx = std::max(0.0, 1.0 - std::abs(px - double(x)));
            if (wx == 0.0) continue;
            for (std::size_t c = 0; c < C; ++c) out[c] += wx * wy * grid(c, y, x);
        }
    }
    return out;
}

inline std::vector<double> affine(const factortopy::AffineLayer& layer, const std::vector<double>& x) {
    std::vector<double> y(layer.weight.dim(0));
    for (std::size_t o = 0; o < y.size(); ++o) {
        double s = layer.bias[o];
        for (std::size_t i = 0; i < x.size(); ++i) s += double(layer.weight(o, i)) * x[i];
        y[o] = s;
    }
    return y;
}

/// Prediction of a factortopy-variant model for one image, voxel by voxel.
/// Raw features are interpolated first and aligned afterwards, which is the
/// same map because the bilinear weights sum to one.
inline std::vector<double> forward(const factortopy::EncoderModel& model,
                                   const factortopy::ImageFeatures& image,
                                   const factortopy::Matrix& coords) {
    const std::size_t N = model.voxel_count(), L = model.layer_count(), D = model.dim();
    std::vector<double> y(N);
    for (std::size_t i = 0; i < N; ++i) {
        const double xyz[3] = {coords(i, 0), coords(i, 1), coords(i, 2)};
        const auto pe = positional(xyz, model.config().pe_frequencies);
        const auto uv = mlp(model.space_heads.at(0), pe);
        const auto omega = mlp(model.layer_head, pe);
        const double alpha = mlp(model.scale_head, pe)[0];
        std::vector<double> v(D, 0.0);
        for (std::size_t l = 0; l < L; ++l) {
            const auto loc = affine(model.align[l], blend(image.local[l], uv[0], uv[1]));
            const auto glob = affine(model.align[l], std::vector<double>(image.global[l].values().begin(),
                                                                         image.global[l].values().end()));
            for (std::size_t k = 0; k < D; ++k) v[k] += omega[l] * ((1 - alpha) * loc[k] + alpha * glob[k]);
        }
        double s = 0.0;
        for (std::size_t k = 0; k < D; ++k) s += v[k] * model.readout_weight(i, k);
        y[i] = s / double(D) + model.readout_bias[i];
    }
    return y;
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix (row-major n×n).
/// Returns eigenvalues descending and eigenvectors as columns.
inline void jacobi_eigen(std::vector<double> a, std::size_t n, std::vector<double>& values,
                         std::vector<double>& vectors) {
    vectors.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) vectors[i * n + i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a[p * n + q]) < 1e-300) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2 * a[p * n + q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1 / std::sqrt(t * t + 1), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = vectors[k * n + p], vkq = vectors[k * n + q];
                    vectors[k * n + p] = c * vkp - s * vkq;
                    vectors[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto x, auto y) { return a[x * n + x] > a[y * n + y]; });
    values.resize(n);
    std::vector<double> sorted(n * n);
    for (std::size_t j = 0; j < n; ++j) {
        values[j] = a[order[j] * n + order[j]];
        for (std::size_t k = 0; k < n; ++k) sorted[k * n + j] = vectors[k * n + order[j]];
    }
    vectors = std::move(sorted);
}

/// Slope and intercept from the 2×2 normal equations.
inline std::pair<double, double> normal_equations(const std::vector<double>& x, const std::vector<double>& y) {
    long double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const long double n = x.size();
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += (long double)x[i] * x[i];
        sxy += (long double)x[i] * y[i];
    }
    const long double det = n * sxx - sx * sx;
    return {double((n * sxy - sx * sy) / det), double((sxx * sy - sx * sxy) / det)};
}

/// True when two labelings induce the same partition.
inline bool same_partition(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    if (a.size() != b.size()) return false;
    std::map<std::size_t, std::size_t> ab, ba;
    for (std::size_t i = 0; i < a.size(); ++i) {
        auto [it, fresh] = ab.emplace(a[i], b[i]);
        if (!fresh && it->second != b[i]) return false;
        auto [jt, fresh2] = ba.emplace(b[i], a[i]);
        if (!fresh2 && jt->second != a[i]) return false;
    }
    return true;
}

/// Shannon entropy of a row in nats.
inline double entropy(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p) h -= v > 0 ? v * std::log(v) : 0.0;
    return h;
}

}  // namespace oracle
