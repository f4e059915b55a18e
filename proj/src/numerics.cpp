// SPDX-License-Identifier: Apache-2.0
#include "factortopy/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace factortopy {

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

Matrix sinusoidal_encode(const Array<double>& coords, std::size_t num_frequencies) {
    if (coords.rank() != 2 || coords.dim(1) != 3) {
        throw InvalidArgument("sinusoidal_encode expects K×3 coordinates, got " +
                              shape_string(coords.shape()));
    }
    if (num_frequencies == 0) {
        throw InvalidArgument("sinusoidal_encode needs at least one frequency");
    }
    const std::size_t k = coords.dim(0);
    const std::size_t width = 3 * 2 * num_frequencies;
    Matrix out({k, width});
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t axis = 0; axis < 3; ++axis) {
            const double x = coords(i, axis);
            if (!std::isfinite(x)) {
                throw InvalidArgument("sinusoidal_encode: non-finite coordinate at row " +
                                      std::to_string(i) + ", axis " + std::to_string(axis));
            }
            double freq = std::numbers::pi;
            for (std::size_t j = 0; j < num_frequencies; ++j, freq *= 2.0) {
                const std::size_t col = (axis * num_frequencies + j) * 2;
                out(i, col) = std::sin(freq * x);
                out(i, col + 1) = std::cos(freq * x);
            }
        }
    }
    return out;
}

namespace {

// Maps a normalized coordinate onto [0, extent-1] and splits it into a base
// index and fraction. Snaps to exact nodes so node lookups are bit-exact.
void locate(double t, std::size_t extent, std::size_t& i0, std::size_t& i1, double& frac,
            double& scale, bool& clamped) {
    if (extent <= 1) {
        i0 = i1 = 0;
        frac = 0.0;
        scale = 0.0;
        clamped = clamped || t < -1.0 || t > 1.0;
        return;
    }
    scale = 0.5 * static_cast<double>(extent - 1);
    if (t < -1.0 || t > 1.0 || !std::isfinite(t)) {
        clamped = true;
        scale = 0.0;
        t = std::isfinite(t) ? std::clamp(t, -1.0, 1.0) : 0.0;
    }
    double x = (t + 1.0) * 0.5 * static_cast<double>(extent - 1);
    const double nearest = std::round(x);
    if (std::abs(x - nearest) < 1e-12) x = nearest;
    auto base = static_cast<std::size_t>(std::floor(x));
    if (base >= extent - 1) base = extent - 2;
    i0 = base;
    i1 = base + 1;
    frac = x - static_cast<double>(base);
}

}  // namespace

BilinearStencil bilinear_stencil(std::size_t height, std::size_t width, double u, double v) {
    BilinearStencil s;
    locate(u, width, s.x0, s.x1, s.fx, s.dx_du, s.clamped);
    locate(v, height, s.y0, s.y1, s.fy, s.dy_dv, s.clamped);
    return s;
}

template <typename T>
BilinearSample bilinear_sample(const Array<T>& grid, std::array<double, 2> uv,
                               std::size_t* saturation_counter) {
    if (grid.rank() != 3 || grid.dim(1) == 0 || grid.dim(2) == 0) {
        throw InvalidArgument("bilinear_sample expects a D×H×W grid, got " +
                              shape_string(grid.shape()));
    }
    const std::size_t depth = grid.dim(0), height = grid.dim(1), width = grid.dim(2);
    const BilinearStencil s = bilinear_stencil(height, width, uv[0], uv[1]);
    if (s.clamped && saturation_counter) ++*saturation_counter;

    BilinearSample out;
    out.value.resize(depth);
    out.jacobian.resize(depth * 2);
    const std::size_t plane = height * width;
    for (std::size_t d = 0; d < depth; ++d) {
        const T* g = grid.data() + d * plane;
        const double a = g[s.y0 * width + s.x0];
        const double b = g[s.y0 * width + s.x1];
        const double c = g[s.y1 * width + s.x0];
        const double e = g[s.y1 * width + s.x1];
        out.value[d] = s.w00() * a + s.w01() * b + s.w10() * c + s.w11() * e;
        out.jacobian[d * 2] = ((b - a) * (1 - s.fy) + (e - c) * s.fy) * s.dx_du;
        out.jacobian[d * 2 + 1] = ((c - a) * (1 - s.fx) + (e - b) * s.fx) * s.dy_dv;
    }
    return out;
}

template BilinearSample bilinear_sample<float>(const Array<float>&, std::array<double, 2>,
                                               std::size_t*);
template BilinearSample bilinear_sample<double>(const Array<double>&, std::array<double, 2>,
                                                std::size_t*);

LineFit linear_fit_1d(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) {
        throw InvalidArgument("linear_fit_1d: x and y lengths differ");
    }
    if (x.size() < 2) {
        throw InvalidArgument("linear_fit_1d: need at least two points");
    }
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (!(sxx > 0.0) || !std::isfinite(sxx)) {
        throw InvalidArgument("linear_fit_1d: x values are degenerate (zero spread)");
    }
    LineFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    return fit;
}

}  // namespace factortopy
