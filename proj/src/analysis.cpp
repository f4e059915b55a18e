// SPDX-License-Identifier: Apache-2.0
#include "factortopy/analysis.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "factortopy/clustering.hpp"
#include "factortopy/error.hpp"
#include "factortopy/metrics.hpp"

namespace factortopy {

LayerColorMap layer_color_map(const Matrix& w) {
    if (w.rank() != 2 || w.dim(1) == 0) throw InvalidArgument("layer weights must be N×L");
    LayerColorMap out;
    const std::size_t n = w.dim(0), nl = w.dim(1);
    out.argmax.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t l = 1; l < nl; ++l) {
            if (w(i, l) > w(i, best)) best = l;
        }
        out.argmax[i] = best;
    }
    out.confidence = confidence(w);
    return out;
}

LayerColorMap layer_color_map(const EncoderModel& model, const Matrix& coords) {
    return layer_color_map(run_selectors(model, coords).layer);
}

Matrix readout_columns(const EncoderModel& model) {
    const std::size_t n = model.voxel_count(), d = model.dim();
    Matrix w({d, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) w(k, i) = model.readout_weight(i, k);
    }
    return w;
}

ChannelClustering cluster_channels(const Matrix& w, std::size_t target, std::size_t kmeans_k,
                                   std::uint64_t seed) {
    if (w.rank() != 2) throw InvalidArgument("read-out weights must be D×N");
    const std::size_t d = w.dim(0), n = w.dim(1);
    if (target == 0) throw InvalidArgument("cluster target must be ≥ 1");
    if (n < target) {
        throw InvalidArgument("cannot form " + std::to_string(target) + " clusters from " +
                              std::to_string(n) + " voxels");
    }
    if (kmeans_k == 0) throw InvalidArgument("k-means cluster count must be ≥ 1");
    Matrix kernel({n, n});
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a; b < n; ++b) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += w(k, a) * w(k, b);
            kernel(a, b) = kernel(b, a) = s;
        }
    }
    ChannelClustering out;
    out.kmeans_k = std::min({kmeans_k, std::max(target, n / 10), n});
    bool identical = true;
    for (std::size_t a = 1; a < n && identical; ++a) {
        identical = std::equal(kernel.data() + a * n, kernel.data() + (a + 1) * n, kernel.data());
    }
    if (identical) {
        out.degenerate = true;
        out.clusters = 1;
        out.labels.assign(n, 0);
        return out;
    }
    const KMeansResult km = kmeans(kernel, out.kmeans_k, seed);
    const std::vector<std::size_t> merged = agglomerative_ward(km.centroids, target);
    out.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.labels[i] = merged[km.labels[i]];
    // Relabel by first appearance over voxels.
    std::vector<std::size_t> remap(target, target);
    std::size_t next = 0;
    for (std::size_t& l : out.labels) {
        if (remap[l] == target) remap[l] = next++;
        l = remap[l];
    }
    out.clusters = next;
    return out;
}

RoiImage roi_channel_image(const EncoderModel& model, const ImageFeatures& image,
                           std::span<const std::size_t> roi, const Matrix& coords) {
    if (roi.empty()) throw InvalidArgument("ROI is empty");
    const std::size_t n = model.voxel_count(), nl = model.layer_count(), d = model.dim();
    for (std::size_t i : roi) {
        if (i >= n) throw InvalidArgument("ROI index " + std::to_string(i) + " is out of range");
    }
    if (model.align.size() != nl || model.traits().feature != VariantTraits::Feature::voxelwise) {
        throw InvalidArgument("ROI channel images need a voxelwise model with channel-align maps");
    }
    if (image.local.size() != nl) throw InvalidArgument("image layer count does not match model");
    const std::size_t h = image.local[0].dim(1), wd = image.local[0].dim(2), p = h * wd;
    for (std::size_t l = 0; l < nl; ++l) {
        const auto& s = model.layers()[l];
        if (image.local[l].shape() != std::vector<std::size_t>{s.channels, h, wd}) {
            throw InvalidArgument("ROI channel images need every layer on the same grid");
        }
    }

    RoiImage out;
    const Matrix layer = run_selectors(model, coords).layer;
    out.layer_weights.assign(nl, 0.0);
    for (std::size_t i : roi) {
        for (std::size_t l = 0; l < nl; ++l) out.layer_weights[l] += layer(i, l);
    }
    for (double& v : out.layer_weights) v /= static_cast<double>(roi.size());

    Matrix tokens({d, p});
    for (std::size_t l = 0; l < nl; ++l) {
        const AffineLayer& a = model.align[l];
        const DenseArray& grid = image.local[l];
        const double wl = out.layer_weights[l];
        for (std::size_t k = 0; k < d; ++k) {
            for (std::size_t q = 0; q < p; ++q) {
                double s = a.bias[k];
                for (std::size_t c = 0; c < a.in_dim(); ++c) s += double(a.weight(k, c)) * grid[c * p + q];
                tokens(k, q) += wl * s;
            }
        }
    }

    Matrix w_roi({d, roi.size()});
    for (std::size_t j = 0; j < roi.size(); ++j) {
        for (std::size_t k = 0; k < d; ++k) w_roi(k, j) = model.readout_weight(roi[j], k);
    }
    const std::size_t comps = std::min<std::size_t>({3, d, roi.size()});
    out.components = pca_top_k(w_roi, comps);

    out.raw = Matrix({3, h, wd});
    out.normalized = Matrix({3, h, wd});
    for (std::size_t c = 0; c < comps; ++c) {
        for (std::size_t q = 0; q < p; ++q) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += out.components(k, c) * tokens(k, q);
            out.raw[c * p + q] = s;
        }
        const auto [lo, hi] = std::minmax_element(out.raw.data() + c * p, out.raw.data() + (c + 1) * p);
        const double lov = *lo, span = *hi - *lo;
        for (std::size_t q = 0; q < p; ++q) {
            out.normalized[c * p + q] = span > 0 ? (out.raw[c * p + q] - lov) / span : 0.0;
        }
    }
    return out;
}

namespace {

void hsv_to_rgb(double hue, double sat, double val, std::uint8_t* rgb) {
    hue = std::fmod(hue, 360.0);
    if (hue < 0) hue += 360.0;
    const double c = val * sat;
    const double x = c * (1 - std::abs(std::fmod(hue / 60.0, 2.0) - 1));
    const double m = val - c;
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hue / 60.0)) {
        case 0: r = c; g = x; break;
        case 1: r = x; g = c; break;
        case 2: g = c; b = x; break;
        case 3: g = x; b = c; break;
        case 4: r = x; b = c; break;
        default: r = c; b = x; break;
    }
    rgb[0] = static_cast<std::uint8_t>(std::lround((r + m) * 255.0));
    rgb[1] = static_cast<std::uint8_t>(std::lround((g + m) * 255.0));
    rgb[2] = static_cast<std::uint8_t>(std::lround((b + m) * 255.0));
}

void png_append(png_structp png, png_bytep data, png_size_t length) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), length);
}

void png_noop_flush(png_structp) {}

}  // namespace

std::string encode_png(const std::vector<std::uint8_t>& rgb, std::size_t width,
                       std::size_t height) {
    if (rgb.size() != width * height * 3) throw InvalidArgument("pixel buffer size mismatch");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw NumericError("libpng: cannot create write struct");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw NumericError("libpng: cannot create info struct");
    }
    std::string out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw NumericError("libpng: encoding failed");
    }
    png_set_write_fn(png, &out, png_append, png_noop_flush);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    for (std::size_t r = 0; r < height; ++r) {
        png_write_row(png, const_cast<png_bytep>(rgb.data() + r * width * 3));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

std::string render_scatter(std::span<const double> values, const std::optional<DenseArray>& flat,
                           std::span<const double> brightness, const ScatterOptions& opt) {
    if (!flat) {
        throw InvalidArgument(
            "scatter rendering needs 2D flat coordinates; supply voxels/flat.bin (N×2 f32)");
    }
    const std::size_t n = values.size();
    if (flat->rank() != 2 || flat->dim(0) != n || flat->dim(1) != 2) {
        throw InvalidArgument("flat coordinates must be N×2 with N = " + std::to_string(n));
    }
    if (!brightness.empty() && brightness.size() != n) {
        throw InvalidArgument("brightness must have one entry per voxel");
    }
    if (opt.canvas < 8) throw InvalidArgument("canvas too small");
    const std::size_t size = opt.canvas;
    std::vector<std::uint8_t> rgb(size * size * 3, 255);
    if (n == 0) return encode_png(rgb, size, size);

    double xlo = (*flat)(0, 0), xhi = xlo, ylo = (*flat)(0, 1), yhi = ylo;
    double vlo = values[0], vhi = values[0];
    for (std::size_t i = 0; i < n; ++i) {
        xlo = std::min<double>(xlo, (*flat)(i, 0));
        xhi = std::max<double>(xhi, (*flat)(i, 0));
        ylo = std::min<double>(ylo, (*flat)(i, 1));
        yhi = std::max<double>(yhi, (*flat)(i, 1));
        vlo = std::min(vlo, values[i]);
        vhi = std::max(vhi, values[i]);
    }
    const double margin = static_cast<double>(opt.marker_radius + 4);
    const double span = std::max({xhi - xlo, yhi - ylo, 1e-12});
    const double scale = (static_cast<double>(size) - 1 - 2 * margin) / span;
    const std::size_t categories =
        opt.categories ? opt.categories : static_cast<std::size_t>(std::max(0.0, vhi)) + 1;
    const int radius = static_cast<int>(opt.marker_radius);

    for (std::size_t i = 0; i < n; ++i) {
        double hue;
        if (opt.palette == Palette::categorical) {
            hue = 360.0 * std::max(0.0, values[i]) / static_cast<double>(std::max<std::size_t>(categories, 1));
        } else {
            const double t = vhi > vlo ? (values[i] - vlo) / (vhi - vlo) : 0.0;
            hue = 270.0 * (1.0 - t);  // low values blue, high values red
        }
        const double val =
            brightness.empty() ? 1.0 : 0.15 + 0.85 * std::clamp(brightness[i], 0.0, 1.0);
        std::uint8_t color[3];
        hsv_to_rgb(hue, 0.9, val, color);
        const int cx = static_cast<int>(std::lround(margin + ((*flat)(i, 0) - xlo) * scale));
        const int cy = static_cast<int>(
            std::lround(static_cast<double>(size) - 1 - margin - ((*flat)(i, 1) - ylo) * scale));
        for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
                if (dx * dx + dy * dy > radius * radius) continue;
                const int x = cx + dx, y = cy + dy;
                if (x < 0 || y < 0 || x >= static_cast<int>(size) || y >= static_cast<int>(size)) continue;
                std::copy(color, color + 3, rgb.data() + (static_cast<std::size_t>(y) * size + x) * 3);
            }
        }
    }
    return encode_png(rgb, size, size);
}

void write_bytes(const std::filesystem::path& file, const std::string& bytes) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + file.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace factortopy
