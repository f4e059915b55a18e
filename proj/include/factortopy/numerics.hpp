// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "factortopy/dense_array.hpp"

namespace factortopy {

/// Sinusoidal encoding of K×3 coordinates in [-1, 1].
///
/// For each axis and frequency f_j = 2^j·π the output holds sin(f_j·x),
/// cos(f_j·x); axis-major, then frequency-major. Width is 3·2·F.
Matrix sinusoidal_encode(const Array<double>& coords, std::size_t num_frequencies);

/// Result of sampling a D×H×W grid at one point.
struct BilinearSample {
    std::vector<double> value;     // D
    std::vector<double> jacobian;  // D×2, row-major: (d/du, d/dv) per channel
};

/// Corner indices and weights of an align-corners bilinear lookup.
///
/// `u` addresses columns (width axis) and `v` rows. Coordinates outside
/// [-1, 1] are clamped and `clamped` is set.
struct BilinearStencil {
    std::size_t x0 = 0, x1 = 0, y0 = 0, y1 = 0;
    double fx = 0.0, fy = 0.0;   // fractional offsets in [0, 1]
    double dx_du = 0.0, dy_dv = 0.0;  // index-per-unit scale, zero when clamped
    bool clamped = false;

    double w00() const { return (1 - fx) * (1 - fy); }
    double w01() const { return fx * (1 - fy); }
    double w10() const { return (1 - fx) * fy; }
    double w11() const { return fx * fy; }
};

BilinearStencil bilinear_stencil(std::size_t height, std::size_t width, double u, double v);

/// Samples `grid` (D×H×W) at (u, v). Out-of-range points are clamped and
/// counted in `saturation_counter` when provided.
template <typename T>
BilinearSample bilinear_sample(const Array<T>& grid, std::array<double, 2> uv,
                               std::size_t* saturation_counter = nullptr);

/// Ordinary least-squares line through (x, y).
struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
};

LineFit linear_fit_1d(std::span<const double> x, std::span<const double> y);

}  // namespace factortopy
