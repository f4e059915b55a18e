// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "factortopy/dense_array.hpp"
#include "factortopy/encoder.hpp"

namespace factortopy {

struct LayerColorMap {
    std::vector<std::size_t> argmax;  // lowest index wins ties
    std::vector<double> confidence;
    std::string rule = "argmax-lowest-index";
};

LayerColorMap layer_color_map(const Matrix& layer_weights);
LayerColorMap layer_color_map(const EncoderModel& model, const Matrix& coords);

struct ChannelClustering {
    std::vector<std::size_t> labels;  // per voxel
    std::size_t kmeans_k = 0;
    std::size_t clusters = 0;
    bool degenerate = false;  // every voxel had the same kernel row
};

/// Clusters voxels by read-out weights `w` (D×N): kernel wᵀw, k-means on its
/// rows with k = min(kmeans_k, max(target, N/10)), then Ward agglomeration of
/// the centroids down to `target`.
ChannelClustering cluster_channels(const Matrix& w, std::size_t target = 20,
                                   std::size_t kmeans_k = 1000, std::uint64_t seed = 0);

/// Read-out weights of a model as D×N.
Matrix readout_columns(const EncoderModel& model);

struct RoiImage {
    Matrix raw;                        // 3×H×W projection
    Matrix normalized;                 // per-channel min-max to [0, 1]
    Matrix components;                 // D×k principal directions, k ≤ 3
    std::vector<double> layer_weights; // ROI-average ω
};

/// Projects one image's channel-aligned local tokens, mixed across layers by
/// the ROI-average layer weights, onto the top principal directions of the
/// ROI's read-out weights. Channels beyond the available components are zero.
RoiImage roi_channel_image(const EncoderModel& model, const ImageFeatures& image,
                           std::span<const std::size_t> roi, const Matrix& coords);

enum class Palette { continuous, categorical };

struct ScatterOptions {
    std::size_t canvas = 512;
    std::size_t marker_radius = 3;
    Palette palette = Palette::continuous;
    std::size_t categories = 0;  // categorical: number of hues (0 = max value + 1)
};

/// Renders values at 2D flat coordinates (N×2) as an RGB PNG held in memory.
/// Value sets the hue; `brightness` in [0, 1] (optional) scales the color.
std::string render_scatter(std::span<const double> values, const std::optional<DenseArray>& flat,
                           std::span<const double> brightness = {},
                           const ScatterOptions& options = {});

/// Encodes 8-bit RGB pixels (height×width×3) as PNG bytes.
std::string encode_png(const std::vector<std::uint8_t>& rgb, std::size_t width,
                       std::size_t height);

void write_bytes(const std::filesystem::path& file, const std::string& bytes);

}  // namespace factortopy
