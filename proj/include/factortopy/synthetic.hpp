// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "factortopy/dataset.hpp"
#include "factortopy/encoder.hpp"

namespace factortopy {

struct SyntheticConfig {
    std::size_t voxels = 256;
    std::size_t layers = 6;
    std::size_t channels = 16;
    std::size_t height = 8;
    std::size_t width = 8;
    std::size_t dim = 16;        // planted bottleneck width
    std::size_t images = 2500;
    double noise = 0.05;
    double smoothness = 1.0;     // scales the spatial frequency of planted fields
    double layer_sharpness = 8.0;
    double blur = 1.0;           // feature blur radius in grid cells
    std::size_t sessions = 0;    // 0: no session file
    std::uint64_t seed = 0;
};

/// Planted quantities behind a synthetic dataset.
struct SyntheticGroundTruth {
    Matrix space;                // N×2 in [-1, 1]
    Matrix layer;                // N×L, simplex rows
    Matrix scale;                // N×1
    std::vector<Matrix> align;   // per layer D×C (no bias)
    Matrix readout_weight;       // N×D
    std::vector<double> readout_bias;
    double noise = 0.0;
    double lipschitz_space = 0.0;  // max ‖∂field/∂(s,t)‖ over voxels
    double lipschitz_layer = 0.0;
    double lipschitz_scale = 0.0;
};

struct SyntheticDataset {
    Dataset dataset;
    SyntheticGroundTruth truth;
    SyntheticConfig config;
};

/// Voxels lie on a curved 2D sheet embedded in 3D; selector fields are smooth
/// functions of the sheet coordinates; local features are blurred Gaussian
/// noise, global tokens independent Gaussians. Responses follow the encoder's
/// forward formula with the planted factors plus Gaussian noise. Splits are
/// 8:1:1 over singleton groups.
SyntheticDataset generate_synthetic(const SyntheticConfig& config);

/// Noise-free responses (M×N) of the planted model, by direct evaluation.
Matrix planted_responses(const SyntheticGroundTruth& truth, const FeatureBank& bank);

/// Encoder model carrying the planted align and read-out, with the planted
/// selectors to be passed to forward_with_selectors.
struct PlantedModel {
    EncoderModel model;
    SelectorOutputs selectors;
};
PlantedModel planted_model(const SyntheticGroundTruth& truth, const std::vector<LayerSpec>& layers);

nlohmann::json truth_to_json(const SyntheticGroundTruth& truth, const SyntheticConfig& config);
SyntheticGroundTruth truth_from_json(const nlohmann::json& doc);

/// Writes the dataset plus `ground_truth.json`.
void write_synthetic(const SyntheticDataset& synth, const std::filesystem::path& dir);
SyntheticGroundTruth load_ground_truth(const std::filesystem::path& dataset_dir);

}  // namespace factortopy
