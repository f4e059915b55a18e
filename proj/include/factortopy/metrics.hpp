// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "factortopy/dataset.hpp"
#include "factortopy/dense_array.hpp"

namespace factortopy {

struct ScoreReport {
    std::vector<double> r2;  // per voxel, NaN when the target has no variance
    std::size_t missing = 0;
    std::map<std::string, double> roi_mean;
    std::map<std::string, double> roi_diff_to_max;  // filled by diff_to_max

    /// Mean over voxels with a defined score.
    double mean() const;
};

/// Per-voxel coefficient of determination over the M evaluation rows of
/// M×N matrices. ȳ is the per-voxel mean of `target`.
ScoreReport brain_score(const Matrix& pred, const Matrix& target);

/// Fills `report.roi_mean` from the voxel scores.
void aggregate_rois(ScoreReport& report,
                    const std::map<std::string, std::vector<std::size_t>>& rois);

/// Mean of the finite entries; NaN when there are none.
double nan_mean(const std::vector<double>& values);

/// s_i = 1 − H(ω_i)/log L with entries clamped at 1e-12 before the log.
/// L = 1 yields s = 1.
std::vector<double> confidence(const Matrix& layer_weights);

struct HierarchyFit {
    double slope = 0.0;  // β
    double b0 = 0.0;     // intercept
    double b1 = 0.0;     // β + b0
    std::vector<double> depth;  // ι̂ for every voxel
    std::vector<std::size_t> voxels;  // voxels used in the fit
    std::vector<double> ideal;        // their ι
};

/// ι̂_i = Σ_l (l/(L−1))·ω_il, regressed on the ideal level of the voxel's ROI
/// over all voxels in `roi_levels`. A voxel listed in several leveled ROIs
/// contributes once per ROI.
HierarchyFit hierarchy_slope(const Matrix& layer_weights,
                             const std::map<std::string, std::vector<std::size_t>>& rois,
                             const std::map<std::string, double>& roi_levels);

/// Default four-level ordering for common visual ROI names.
std::map<std::string, double> default_roi_levels();

/// Per model and ROI: sqrt(Σ_{i∈ROI} (max_m r2_mi − r2_i)²) with the max
/// taken voxel-wise over all models. Voxels with a missing score in any model
/// are skipped.
std::vector<std::map<std::string, double>> diff_to_max(
    const std::vector<std::vector<double>>& model_scores,
    const std::map<std::string, std::vector<std::size_t>>& rois);

struct LayerGridSearch {
    Matrix voxel_scores;              // L×N held-out R² of each single-layer model
    std::vector<double> layer_means;  // L
    std::size_t best_layer = 0;       // argmax of layer_means, lowest index on ties
};

/// Fits one ridge regression per layer from that layer's global token to
/// every voxel on the fit rows and scores it on the eval rows.
LayerGridSearch layer_grid_search(const FeatureBank& bank, const Matrix& responses,
                                  const std::vector<std::size_t>& fit_rows,
                                  const std::vector<std::size_t>& eval_rows,
                                  double ridge = 1.0);

/// ROI-average of each row of `values` (N×K) → per ROI a K-vector.
std::map<std::string, std::vector<double>> roi_average(
    const Matrix& values, const std::map<std::string, std::vector<std::size_t>>& rois);

}  // namespace factortopy
