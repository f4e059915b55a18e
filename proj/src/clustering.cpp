// SPDX-License-Identifier: Apache-2.0
#include "factortopy/clustering.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "factortopy/error.hpp"

namespace factortopy {

Matrix pca_top_k(const Matrix& matrix, std::size_t k) {
    if (matrix.rank() != 2) throw InvalidArgument("pca_top_k expects a D×N matrix");
    const std::size_t d = matrix.dim(0), n = matrix.dim(1);
    if (k == 0 || k > std::min(d, n)) {
        throw InvalidArgument("pca_top_k: k=" + std::to_string(k) + " exceeds min(D, N)=" +
                              std::to_string(std::min(d, n)));
    }
    if (!matrix.all_finite()) throw InvalidArgument("pca_top_k: matrix has non-finite entries");

    Eigen::MatrixXd centered(d, n);
    for (std::size_t c = 0; c < n; ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < d; ++r) mean += matrix(r, c);
        mean /= static_cast<double>(d);
        for (std::size_t r = 0; r < d; ++r) centered(r, c) = matrix(r, c) - mean;
    }
    const Eigen::MatrixXd scatter = centered * centered.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(scatter);
    if (solver.info() != Eigen::Success) {
        throw NumericError("pca_top_k: eigen decomposition failed");
    }
    // Eigenvalues ascend; take from the back.
    Matrix out({d, k});
    for (std::size_t j = 0; j < k; ++j) {
        const auto col = solver.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - j));
        std::size_t arg = 0;
        for (std::size_t r = 1; r < d; ++r) {
            if (std::abs(col(r)) > std::abs(col(arg))) arg = r;
        }
        const double sign = col(arg) < 0 ? -1.0 : 1.0;
        double norm = col.norm();
        for (std::size_t r = 0; r < d; ++r) out(r, j) = sign * col(r) / norm;
    }
    return out;
}

namespace {

double sq_dist(const double* a, const double* b, std::size_t p) {
    double s = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        const double t = a[i] - b[i];
        s += t * t;
    }
    return s;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iterations) {
    if (points.rank() != 2) throw InvalidArgument("kmeans expects N×P points");
    const std::size_t n = points.dim(0), p = points.dim(1);
    if (k == 0 || k > n) {
        throw InvalidArgument("kmeans: k=" + std::to_string(k) + " must be in [1, N=" +
                              std::to_string(n) + "]");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // k-means++ seeding.
    std::vector<std::size_t> chosen;
    std::vector<bool> used(n, false);
    chosen.push_back(static_cast<std::size_t>(unit(rng) * static_cast<double>(n)) % n);
    used[chosen.back()] = true;
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    while (chosen.size() < k) {
        const double* c = points.data() + chosen.back() * p;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            nearest[i] = std::min(nearest[i], sq_dist(points.data() + i * p, c, p));
            total += nearest[i];
        }
        std::size_t pick = n;
        if (total > 0.0) {
            double target = unit(rng) * total;
            for (std::size_t i = 0; i < n; ++i) {
                if (nearest[i] <= 0.0) continue;
                pick = i;
                target -= nearest[i];
                if (target < 0.0) break;
            }
        }
        if (pick == n || used[pick]) {
            pick = static_cast<std::size_t>(std::find(used.begin(), used.end(), false) -
                                            used.begin());
        }
        used[pick] = true;
        chosen.push_back(pick);
    }

    KMeansResult result;
    result.centroids = Matrix({k, p});
    for (std::size_t j = 0; j < k; ++j) {
        std::copy_n(points.data() + chosen[j] * p, p, result.centroids.data() + j * p);
    }
    result.labels.assign(n, k);
    std::vector<double> dist(n, 0.0);

    for (std::size_t iter = 0; iter < max_iterations; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k; ++j) {
                const double dd = sq_dist(points.data() + i * p, result.centroids.data() + j * p, p);
                if (dd < best_d) {
                    best_d = dd;
                    best = j;
                }
            }
            if (result.labels[i] != best) changed = true;
            result.labels[i] = best;
            dist[i] = best_d;
        }
        result.iterations = iter + 1;
        if (!changed && iter > 0) break;

        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) ++counts[result.labels[i]];
        // Repair empty clusters by stealing the currently worst-fit point.
        for (std::size_t j = 0; j < k; ++j) {
            if (counts[j] != 0) continue;
            std::size_t far = 0;
            for (std::size_t i = 1; i < n; ++i) {
                if (dist[i] > dist[far] && counts[result.labels[i]] > 1) far = i;
            }
            if (counts[result.labels[far]] <= 1) continue;
            --counts[result.labels[far]];
            result.labels[far] = j;
            counts[j] = 1;
            dist[far] = 0.0;
            ++result.reseeded;
            changed = true;
        }
        result.centroids.fill(0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double* c = result.centroids.data() + result.labels[i] * p;
            const double* x = points.data() + i * p;
            for (std::size_t t = 0; t < p; ++t) c[t] += x[t];
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (counts[j] == 0) continue;
            for (std::size_t t = 0; t < p; ++t) {
                result.centroids(j, t) /= static_cast<double>(counts[j]);
            }
        }
    }
    result.inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        result.inertia +=
            sq_dist(points.data() + i * p, result.centroids.data() + result.labels[i] * p, p);
    }
    return result;
}

std::vector<std::size_t> agglomerative_ward(const Matrix& points, std::size_t target_clusters) {
    if (points.rank() != 2) throw InvalidArgument("agglomerative_ward expects K×P points");
    const std::size_t n = points.dim(0), p = points.dim(1);
    if (target_clusters == 0 || target_clusters > n) {
        throw InvalidArgument("agglomerative_ward: target_clusters must be in [1, K]");
    }
    std::vector<std::vector<double>> centroid(n);
    std::vector<double> size(n, 1.0);
    std::vector<bool> active(n, true);
    std::vector<std::size_t> owner(n);
    for (std::size_t i = 0; i < n; ++i) {
        centroid[i].assign(points.data() + i * p, points.data() + (i + 1) * p);
        owner[i] = i;
    }
    auto ward_cost = [&](std::size_t a, std::size_t b) {
        const double na = size[a], nb = size[b];
        return na * nb / (na + nb) * sq_dist(centroid[a].data(), centroid[b].data(), p);
    };
    std::vector<double> cost(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) cost[i * n + j] = ward_cost(i, j);

    for (std::size_t clusters = n; clusters > target_clusters; --clusters) {
        std::size_t bi = 0, bj = 0;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            if (!active[i]) continue;
            for (std::size_t j = i + 1; j < n; ++j) {
                if (active[j] && cost[i * n + j] < best) {
                    best = cost[i * n + j];
                    bi = i;
                    bj = j;
                }
            }
        }
        // Merge bj into bi.
        const double total = size[bi] + size[bj];
        for (std::size_t t = 0; t < p; ++t) {
            centroid[bi][t] = (size[bi] * centroid[bi][t] + size[bj] * centroid[bj][t]) / total;
        }
        size[bi] = total;
        active[bj] = false;
        for (auto& o : owner) {
            if (o == bj) o = bi;
        }
        for (std::size_t t = 0; t < n; ++t) {
            if (!active[t] || t == bi) continue;
            const double c = ward_cost(bi, t);
            if (t < bi) cost[t * n + bi] = c;
            else cost[bi * n + t] = c;
        }
    }
    std::map<std::size_t, std::size_t> relabel;
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto [it, inserted] = relabel.emplace(owner[i], relabel.size());
        labels[i] = it->second;
    }
    return labels;
}

double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    if (a.size() != b.size()) throw InvalidArgument("adjusted_rand_index: length mismatch");
    const std::size_t n = a.size();
    std::map<std::pair<std::size_t, std::size_t>, double> table;
    std::map<std::size_t, double> rows, cols;
    for (std::size_t i = 0; i < n; ++i) {
        table[{a[i], b[i]}] += 1;
        rows[a[i]] += 1;
        cols[b[i]] += 1;
    }
    auto pairs = [](double x) { return x * (x - 1) / 2.0; };
    double index = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (const auto& [key, c] : table) index += pairs(c);
    for (const auto& [key, c] : rows) sum_a += pairs(c);
    for (const auto& [key, c] : cols) sum_b += pairs(c);
    const double expected = sum_a * sum_b / pairs(static_cast<double>(n));
    const double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected) return 1.0;
    return (index - expected) / (max_index - expected);
}

}  // namespace factortopy
