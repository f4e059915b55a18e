// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "factortopy/dense_array.hpp"

namespace factortopy {

/// Top-k principal directions of a D×N matrix whose N columns are the
/// observations' D-vectors after centering each column.
///
/// Returns D×k with orthonormal columns, ordered by descending eigenvalue of
/// the D×D scatter matrix Xc·Xcᵀ. Each column's largest-magnitude entry is
/// made positive.
Matrix pca_top_k(const Matrix& matrix, std::size_t k);

struct KMeansResult {
    std::vector<std::size_t> labels;
    Matrix centroids;  // k×P
    double inertia = 0.0;
    std::size_t iterations = 0;
    std::size_t reseeded = 0;  // empty clusters repaired
};

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iterations` is reached.
///
/// An empty cluster takes the point farthest from its current centroid
/// (lowest index on ties).
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iterations = 300);

/// Bottom-up Ward agglomeration of K points down to `target_clusters`.
/// Labels are 0..target-1 in order of first appearance. Ties merge the
/// lowest index pair.
std::vector<std::size_t> agglomerative_ward(const Matrix& points, std::size_t target_clusters);

/// Adjusted Rand index between two labelings of the same items.
double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b);

}  // namespace factortopy
