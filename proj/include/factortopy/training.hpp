// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "factortopy/adamw.hpp"
#include "factortopy/dataset.hpp"
#include "factortopy/encoder.hpp"

namespace factortopy {

struct TrainConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-2;
    std::size_t batch_size = 8;
    std::size_t steps_per_epoch = 1000;
    std::size_t max_epochs = 1000;
    std::size_t patience = 20;
    double smooth_l1_beta = 0.1;
    double reg_lambda = 0.1;
    std::size_t reg_decay_steps = 6000;
    std::uint64_t seed = 0;
    std::size_t soup_size = 10;
    std::string soup_target = "val";  // "val" or "test"
    std::size_t workers = 1;          // evaluation threads

    void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& config);
/// Overrides the fields present in `doc`; unknown keys are reported.
TrainConfig train_config_from_json(const nlohmann::json& doc, TrainConfig base = {});

struct LossValue {
    double loss = 0.0;
    Matrix gradient;  // same shape as the prediction
};

/// Mean over all elements of 0.5·d²/β for |d| < β, else |d| − 0.5·β.
LossValue smooth_l1(const Matrix& pred, const Matrix& target, double beta = 0.1);

/// λ·max(0, 1 − step/decay_steps).
double regularizer_multiplier(std::size_t step, double lambda, std::size_t decay_steps);

struct RegularizerValue {
    double loss_reg = 0.0;    // before the multiplier
    double multiplier = 0.0;
    double term = 0.0;        // multiplier · loss_reg
    Matrix gradient;          // d(term)/dω, N×L
};

/// loss_reg = −(1/N) Σ_i (Σ_l ω log ω) / (Σ_l (1/L) log(1/L)); entries are
/// clamped at 1e-12 inside the log. L = 1 contributes nothing.
RegularizerValue entropy_regularizer(const Matrix& layer_weights, std::size_t step,
                                     double lambda, std::size_t decay_steps);

/// One split of the training working set: image features on the model grid
/// and their M×N targets.
struct SplitData {
    std::vector<const ImageFeatures*> images;
    Matrix targets;
};

/// Training working set: downsampled features resident in memory.
struct TrainData {
    std::vector<ImageFeatures> features;
    std::vector<LayerSpec> layers;  // of the downsampled bank
    Matrix coords;                  // normalized N×3
    SplitData train, val, test;
    std::map<std::string, std::vector<std::size_t>> rois;

    std::vector<double> train_mean() const;
};

/// Downsamples to the configured grid, z-scores per session when sessions are
/// present, and keeps at most `max_train` training images (seeded subset,
/// 0 = all). Val and test are untouched by the subset.
TrainData prepare_train_data(const Dataset& dataset, const EncoderConfig& config,
                             std::size_t max_train = 0, std::uint64_t subset_seed = 0);

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double train_loss = 0.0;  // mean smooth-L1 over the epoch's steps
    double reg_term = 0.0;    // mean weighted regularizer term
    double val_r2 = 0.0;
};

struct CheckpointRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double score = 0.0;
    EncoderModel model;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::vector<CheckpointRecord> checkpoints;  // best first, at most soup_size
    std::size_t steps = 0;
    std::size_t best_epoch = 0;
    bool early_stopped = false;
};

/// Called after every epoch; returning false stops training.
using EpochCallback = std::function<bool(const EpochRecord&)>;

struct TrainResult {
    EncoderModel model;  // best validation checkpoint
    TrainHistory history;
};

TrainResult train(EncoderModel model, const TrainData& data, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Full loss on one batch and its gradients.
struct BatchLoss {
    double smooth_l1 = 0.0;
    double reg_term = 0.0;
    double total = 0.0;
    EncoderGradients gradients;
};

BatchLoss batch_loss(const EncoderModel& model, std::span<const ImageFeatures* const> images,
                     const Matrix& targets, const Matrix& encoded_coords, std::size_t step,
                     const TrainConfig& config, bool with_gradients = true);

/// Mean held-out R² of `model` on a split.
double evaluate_split(const EncoderModel& model, const SplitData& split, const Matrix& coords,
                      std::size_t workers = 1);

/// Greedy soup: candidates are scored and sorted; starting from the best, each
/// next one joins the uniform parameter average when the score does not drop.
struct SoupResult {
    EncoderModel model;
    double score = 0.0;
    double best_single = 0.0;
    std::vector<std::size_t> ingredients;  // indices into the input
};

SoupResult greedy_soup(const std::vector<EncoderModel>& candidates,
                       const std::function<double(const EncoderModel&)>& score);

/// Uniform parameter average of compatible models.
EncoderModel average_models(const std::vector<const EncoderModel*>& models);

struct GroupCheck {
    std::string name;
    std::size_t entries = 0;
    double max_abs_error = 0.0;
    double scale = 0.0;       // max(‖analytic‖∞, ‖numeric‖∞)
    double rel_error = 0.0;   // max_abs_error / scale, or 0 under the absolute floor
    bool passed = false;
};

struct GradCheckReport {
    std::vector<GroupCheck> groups;
    double tolerance = 1e-4;
    bool passed = false;
};

/// Central finite differences of the full batch loss against the analytic
/// gradients. `max_entries` (0 = all) caps the entries checked per group;
/// larger groups are sampled evenly. Groups whose analytic and numeric
/// gradients are both below 1e-8 compare with that absolute tolerance.
GradCheckReport grad_check(const EncoderModel& model,
                           std::span<const ImageFeatures* const> images, const Matrix& targets,
                           const Matrix& encoded_coords, const TrainConfig& config,
                           std::size_t step = 0, double epsilon = 1e-3,
                           std::size_t max_entries = 0, double tolerance = 1e-4,
                           const std::function<void(EncoderGradients&)>& tamper = {});

/// Fills every parameter with uniform noise in ±scale (for gradient checks on
/// models whose zero-initialized groups would hide gradient paths).
void randomize_parameters(EncoderModel& model, std::uint64_t seed, double scale = 0.5);

void write_history_jsonl(const TrainHistory& history, std::ostream& out);

}  // namespace factortopy
