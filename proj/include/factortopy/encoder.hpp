// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "factortopy/affine_stack.hpp"
#include "factortopy/dataset.hpp"
#include "factortopy/dense_array.hpp"
#include "factortopy/numerics.hpp"

namespace factortopy {

enum class Variant {
    factortopy,
    class_token,
    patch_token,
    gnet_vit,
    no_layer_sel,
    no_space_sel,
    no_scale_sel,
    no_topology,
    multi_sample,
};

Variant variant_from_string(const std::string& name);
std::string to_string(Variant v);
std::vector<Variant> all_variants();

/// How each factor of the read-out feature is chosen for a variant.
struct VariantTraits {
    enum class Space { interpolate, mean_pool, mask, none };
    enum class Feature { voxelwise, class_token, patch_token };

    Feature feature = Feature::voxelwise;
    Space space = Space::interpolate;
    std::size_t space_heads = 1;
    bool layer_selector = true;
    bool scale_selector = true;
    bool topology = true;  // selectors are functions of encoded coordinates

    static VariantTraits of(Variant v, std::size_t multi_heads);
};

struct EncoderConfig {
    Variant variant = Variant::factortopy;
    std::size_t bottleneck_dim = 128;
    std::size_t pe_frequencies = 10;
    std::size_t hidden_width = 128;
    std::size_t hidden_layers = 2;
    Activation hidden_activation = Activation::silu;
    std::size_t grid_height = 8;
    std::size_t grid_width = 8;
    std::size_t multi_sample_heads = 3;
};

struct SelectorOutputs {
    std::vector<Matrix> space;  // one N×2 per space head; empty when unused
    Matrix layer;               // N×L, rows on the simplex
    Matrix scale;               // N×1 in [0, 1]
    std::vector<Matrix> masks;  // gnet_vit: per layer N×(h·w), rows on the simplex

    std::size_t voxel_count() const { return layer.dim(0); }
};

/// Features of one image on the model's working grid.
struct ImageFeatures {
    std::string id;
    std::vector<DenseArray> local;   // per layer C×h×w
    std::vector<DenseArray> global;  // per layer C
};

/// Extracts every image of a (downsampled) bank.
std::vector<ImageFeatures> extract_features(const FeatureBank& bank);

class EncoderModel;

/// Gradients mirroring the parameter layout of an EncoderModel.
struct EncoderGradients {
    std::vector<Matrix> align_weight, align_bias;
    std::vector<AffineStackGrads> space_heads;
    AffineStackGrads layer_head, scale_head;
    Matrix space_table, layer_table, scale_table;
    std::vector<Matrix> mask_logits;
    std::vector<Matrix> patch_weight, patch_bias;
    Matrix readout_weight, readout_bias;
};

/// Cached selector evaluation, reused across every image of a batch.
struct SelectorTrace {
    SelectorOutputs outputs;
    std::vector<AffineStack::Tape> space_tapes;
    AffineStack::Tape layer_tape, scale_tape;
};

struct ImageTrace {
    std::vector<Matrix> aligned;    // per layer D×(h·w)
    Matrix aligned_global;          // L×D
    Matrix local;                   // N×(L·D): per-voxel sampled local features
    Matrix mixed;                   // N×D: v_i
    std::vector<Matrix> patch;      // patch_token: per layer projected D-vector (1×D)
};

struct ForwardTrace {
    SelectorTrace selectors;
    std::vector<const ImageFeatures*> inputs;
    std::vector<ImageTrace> images;
    Matrix prediction;  // B×N
    std::size_t saturated = 0;  // clamped space samples
};

struct NamedParameter {
    std::string name;
    DenseArray* value;
};

struct ConstNamedParameter {
    std::string name;
    const DenseArray* value;
};

/// Learnable parameters of the encoder and its baseline / ablation variants.
///
/// Read-out follows the mean-over-D convention: ŷ_i = mean_d(v_id·w_id) + b_i.
class EncoderModel {
public:
    EncoderModel() = default;

    const EncoderConfig& config() const noexcept { return config_; }
    const VariantTraits& traits() const noexcept { return traits_; }
    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    std::size_t voxel_count() const noexcept { return voxels_; }
    std::size_t layer_count() const noexcept { return layers_.size(); }
    std::size_t dim() const noexcept { return config_.bottleneck_dim; }

    std::vector<NamedParameter> parameters();
    std::vector<ConstNamedParameter> parameters() const;
    std::size_t parameter_count() const;

    EncoderGradients zero_gradients() const;
    /// Flattened gradient views in `parameters()` order.
    std::vector<Matrix*> gradient_slots(EncoderGradients& grads) const;

    // Public so tests and analysis can inspect or plant values.
    std::vector<AffineLayer> align;          // per layer D×C_l
    std::vector<AffineStack> space_heads;
    AffineStack layer_head;
    AffineStack scale_head;
    DenseArray space_table, layer_table, scale_table;  // no_topology logits
    std::vector<DenseArray> mask_logits;     // gnet_vit, per layer N×(h·w)
    std::vector<AffineLayer> patch_proj;     // patch_token, per layer D×(C·h·w)
    DenseArray readout_weight;               // N×D
    DenseArray readout_bias;                 // N

    friend EncoderModel init_model(const EncoderConfig&, std::size_t,
                                   const std::vector<LayerSpec>&, std::uint64_t,
                                   std::span<const double>);

private:
    EncoderConfig config_;
    VariantTraits traits_;
    std::vector<LayerSpec> layers_;
    std::size_t voxels_ = 0;
};

/// Builds a fresh model. `layers` are the source bank's layers; their grids
/// are clipped to the configured working grid. `mean_response` (length N,
/// optional) initializes the read-out bias.
EncoderModel init_model(const EncoderConfig& config, std::size_t voxel_count,
                        const std::vector<LayerSpec>& layers, std::uint64_t seed,
                        std::span<const double> mean_response = {});

/// Same as init_model with `base.variant` replaced by `variant`.
EncoderModel build_variant(EncoderConfig base, Variant variant, std::size_t voxel_count,
                           const std::vector<LayerSpec>& layers, std::uint64_t seed,
                           std::span<const double> mean_response = {});

/// Evaluates the selectors for normalized coordinates (N×3 in [-1, 1]).
SelectorOutputs run_selectors(const EncoderModel& model, const Matrix& coords);
SelectorTrace run_selectors_traced(const EncoderModel& model, const Matrix& encoded_coords);

/// Sinusoidal encoding of normalized coordinates with the model's frequency count.
Matrix encode_coords(const EncoderModel& model, const Matrix& coords);

/// Full forward pass over a batch. Rejects non-finite features.
ForwardTrace forward(const EncoderModel& model, std::span<const ImageFeatures* const> batch,
                     const Matrix& encoded_coords);

/// Forward pass with externally supplied selectors (no selector gradients).
ForwardTrace forward_with_selectors(const EncoderModel& model,
                                    std::span<const ImageFeatures* const> batch,
                                    SelectorOutputs selectors);

/// Exact reverse pass. `d_prediction` is B×N. `d_layer_extra` (N×L, optional)
/// is added to dL/dω before the layer selector's backward.
EncoderGradients backward(const EncoderModel& model, const ForwardTrace& trace,
                          const Matrix& d_prediction, const Matrix* d_layer_extra = nullptr);

/// Predictions for many images, computed in parallel over images with the
/// given worker count. Row order follows `images`.
Matrix predict(const EncoderModel& model, std::span<const ImageFeatures* const> images,
               const Matrix& encoded_coords, std::size_t workers = 1);

void set_default_workers(std::size_t workers);
std::size_t default_workers();

}  // namespace factortopy
