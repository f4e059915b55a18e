// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "factortopy/dense_array.hpp"

namespace factortopy {

struct LayerSpec {
    std::string name;
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Cached backbone features: per image and layer a C×H×W local grid plus a
/// C-vector global token.
///
/// A bank is either resident (all blobs in memory) or backed by a directory,
/// in which case blobs are read on access. When the source has no global
/// tokens, `global()` returns the spatial mean of the full-resolution local
/// grid.
class FeatureBank {
public:
    FeatureBank() = default;

    /// Resident bank. `locals[i * L + l]` is image i, layer l. `globals` is
    /// either empty (mean-pooled on demand) or the same length as `locals`.
    FeatureBank(std::vector<std::string> image_ids, std::vector<LayerSpec> layers,
                std::vector<DenseArray> locals, std::vector<DenseArray> globals);

    const std::vector<std::string>& image_ids() const noexcept { return image_ids_; }
    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    std::size_t image_count() const noexcept { return image_ids_.size(); }
    std::size_t layer_count() const noexcept { return layers_.size(); }
    bool has_native_global() const noexcept { return has_global_; }
    bool resident() const noexcept { return root_.empty(); }

    /// Index of `id` in image order; throws InvalidArgument when unknown.
    std::size_t image_index(const std::string& id) const;
    bool has_image(const std::string& id) const { return index_.count(id) > 0; }

    DenseArray local(std::size_t image, std::size_t layer) const;
    DenseArray global(std::size_t image, std::size_t layer) const;

    /// Loads every blob into memory.
    FeatureBank materialize() const;

    friend FeatureBank load_feature_bank(const std::filesystem::path& dir);

private:
    std::vector<std::string> image_ids_;
    std::vector<LayerSpec> layers_;
    bool has_global_ = false;
    std::vector<DenseArray> locals_;
    std::vector<DenseArray> globals_;
    std::filesystem::path root_;
    std::map<std::string, std::size_t> index_;

    void build_index();
};

/// Reads and validates `manifest.json` and checks that every declared blob
/// exists with the declared byte length. Blob contents are read lazily.
FeatureBank load_feature_bank(const std::filesystem::path& dir);

/// Writes manifest and blobs. Global blobs are written only when the bank
/// carries native global tokens.
void write_feature_bank(const FeatureBank& bank, const std::filesystem::path& dir);

/// Adaptive average pooling of every local grid onto at most `height`×`width`.
/// Layers already within the target are copied unchanged. Global tokens are
/// taken from the source bank (mean-pooled at full resolution if needed).
FeatureBank downsample_local_tokens(const FeatureBank& bank, std::size_t height = 8,
                                    std::size_t width = 8);

/// Adaptive average pool of one C×H×W grid.
DenseArray adaptive_avg_pool(const DenseArray& grid, std::size_t height, std::size_t width);

struct VoxelSet {
    DenseArray coords;                 // N×3
    std::optional<DenseArray> flat;    // N×2
    std::map<std::string, std::vector<std::size_t>> rois;
    DenseArray responses;              // M×N, rows follow the bank's image order
    std::vector<bool> has_response;    // M

    std::size_t size() const { return coords.empty() ? 0 : coords.dim(0); }
    void validate() const;
};

struct SplitSpec {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};

/// Everything under one dataset directory.
struct Dataset {
    FeatureBank bank;
    VoxelSet voxels;
    std::optional<SplitSpec> splits;
    std::map<std::string, std::string> sessions;  // image id -> session id
};

VoxelSet load_voxel_set(const std::filesystem::path& dir, const FeatureBank& bank);
void write_voxel_set(const VoxelSet& voxels, const FeatureBank& bank,
                     const std::filesystem::path& dir);

SplitSpec load_splits(const std::filesystem::path& file);
void write_splits(const SplitSpec& splits, const std::filesystem::path& file);

Dataset load_dataset(const std::filesystem::path& dir);
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// Checks split disjointness and membership in the bank, and that every split
/// image has responses.
void validate_splits(const SplitSpec& splits, const FeatureBank& bank, const VoxelSet& voxels);

/// Maps each coordinate axis onto [-1, 1] using the voxel bounding box. A
/// degenerate axis maps to 0.
Matrix normalize_coords(const DenseArray& coords);

struct ZScoreResult {
    VoxelSet voxels;
    std::size_t floored = 0;  // voxel-session pairs whose variance hit the floor
};

/// Standardizes each voxel within each session (population variance, floor 1e-6).
ZScoreResult session_zscore(const VoxelSet& voxels, const FeatureBank& bank,
                            const std::map<std::string, std::string>& sessions);

/// Group-level shuffled split. Group counts per split are
/// round(G·ratio/total) for val and test (at least one each), rest train.
SplitSpec make_splits(const std::vector<std::vector<std::string>>& groups,
                      std::array<std::size_t, 3> ratios, std::uint64_t seed);

/// Raw little-endian f32 blob helpers.
std::vector<float> read_f32_blob(const std::filesystem::path& file, std::size_t expected_count);
void write_f32_blob(const std::filesystem::path& file, std::span<const float> values);

}  // namespace factortopy
