// SPDX-License-Identifier: Apache-2.0
#include "factortopy/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "factortopy/error.hpp"
#include "factortopy/numerics.hpp"

namespace factortopy {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_rois(const std::map<std::string, std::vector<std::size_t>>& rois, std::size_t n) {
    for (const auto& [name, idx] : rois) {
        for (std::size_t i : idx) {
            if (i >= n) {
                throw InvalidArgument("ROI '" + name + "' index " + std::to_string(i) +
                                      " is out of range for " + std::to_string(n) + " voxels");
            }
        }
    }
}

}  // namespace

double nan_mean(const std::vector<double>& values) {
    double sum = 0.0;
    std::size_t count = 0;
    for (double v : values) {
        if (std::isfinite(v)) {
            sum += v;
            ++count;
        }
    }
    return count ? sum / static_cast<double>(count) : kNaN;
}

double ScoreReport::mean() const { return nan_mean(r2); }

ScoreReport brain_score(const Matrix& pred, const Matrix& target) {
    if (pred.shape() != target.shape() || pred.rank() != 2) {
        throw InvalidArgument("prediction " + shape_string(pred.shape()) + " and target " +
                              shape_string(target.shape()) + " must be equal M×N shapes");
    }
    const std::size_t m = pred.dim(0), n = pred.dim(1);
    if (m < 2) throw InvalidArgument("brain score needs at least 2 evaluation rows");
    ScoreReport report;
    report.r2.assign(n, kNaN);
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (std::size_t r = 0; r < m; ++r) mean += target(r, i);
        mean /= static_cast<double>(m);
        double ss_res = 0.0, ss_tot = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
            const double e = target(r, i) - pred(r, i);
            const double c = target(r, i) - mean;
            ss_res += e * e;
            ss_tot += c * c;
        }
        if (ss_tot > 0.0) {
            report.r2[i] = 1.0 - ss_res / ss_tot;
        } else {
            ++report.missing;
        }
    }
    return report;
}

void aggregate_rois(ScoreReport& report,
                    const std::map<std::string, std::vector<std::size_t>>& rois) {
    check_rois(rois, report.r2.size());
    report.roi_mean.clear();
    for (const auto& [name, idx] : rois) {
        std::vector<double> vals;
        for (std::size_t i : idx) vals.push_back(report.r2[i]);
        report.roi_mean[name] = nan_mean(vals);
    }
}

std::vector<double> confidence(const Matrix& w) {
    if (w.rank() != 2) throw InvalidArgument("layer weights must be N×L");
    const std::size_t n = w.dim(0), nl = w.dim(1);
    std::vector<double> s(n, 1.0);
    if (nl <= 1) return s;
    const double h_uniform = std::log(static_cast<double>(nl));
    for (std::size_t i = 0; i < n; ++i) {
        double h = 0.0;
        for (std::size_t l = 0; l < nl; ++l) {
            const double p = std::max(w(i, l), 1e-12);
            h -= w(i, l) * std::log(p);
        }
        s[i] = std::clamp(1.0 - h / h_uniform, 0.0, 1.0);
    }
    return s;
}

std::map<std::string, double> default_roi_levels() {
    return {{"V1", 0.0},   {"V2", 0.33},  {"V3", 0.33},  {"V4", 0.66},  {"hV4", 0.66},
            {"EBA", 1.0},  {"FBA", 1.0},  {"OFA", 1.0},  {"FFA", 1.0},  {"OPA", 1.0},
            {"PPA", 1.0},  {"OWFA", 1.0}, {"VWFA", 1.0}};
}

HierarchyFit hierarchy_slope(const Matrix& w,
                             const std::map<std::string, std::vector<std::size_t>>& rois,
                             const std::map<std::string, double>& roi_levels) {
    if (w.rank() != 2) throw InvalidArgument("layer weights must be N×L");
    const std::size_t n = w.dim(0), nl = w.dim(1);
    check_rois(rois, n);
    HierarchyFit fit;
    fit.depth.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double depth = 0.0;
        for (std::size_t l = 0; l < nl; ++l) {
            const double pos = nl > 1 ? static_cast<double>(l) / static_cast<double>(nl - 1) : 0.0;
            depth += pos * w(i, l);
        }
        fit.depth[i] = depth;
    }
    std::vector<double> x, y;
    for (const auto& [name, idx] : rois) {
        const auto level = roi_levels.find(name);
        if (level == roi_levels.end()) continue;
        for (std::size_t i : idx) {
            fit.voxels.push_back(i);
            fit.ideal.push_back(level->second);
            x.push_back(level->second);
            y.push_back(fit.depth[i]);
        }
    }
    if (x.empty() || std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); })) {
        throw InvalidArgument("hierarchy slope needs voxels at two or more ROI levels");
    }
    const LineFit line = linear_fit_1d(x, y);
    fit.slope = line.slope;
    fit.b0 = line.intercept;
    fit.b1 = line.slope + line.intercept;
    return fit;
}

std::vector<std::map<std::string, double>> diff_to_max(
    const std::vector<std::vector<double>>& scores,
    const std::map<std::string, std::vector<std::size_t>>& rois) {
    if (scores.size() < 2) throw InvalidArgument("difference to max needs at least 2 models");
    const std::size_t n = scores.front().size();
    for (const auto& s : scores) {
        if (s.size() != n) throw InvalidArgument("models must score the same voxel set");
    }
    check_rois(rois, n);
    std::vector<double> best(n, -std::numeric_limits<double>::infinity());
    std::vector<bool> usable(n, true);
    for (const auto& s : scores) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!std::isfinite(s[i])) usable[i] = false;
            else best[i] = std::max(best[i], s[i]);
        }
    }
    std::vector<std::map<std::string, double>> out(scores.size());
    for (std::size_t m = 0; m < scores.size(); ++m) {
        for (const auto& [name, idx] : rois) {
            double sum = 0.0;
            for (std::size_t i : idx) {
                if (!usable[i]) continue;
                const double gap = best[i] - scores[m][i];
                sum += gap * gap;
            }
            out[m][name] = std::sqrt(sum);
        }
    }
    return out;
}

LayerGridSearch layer_grid_search(const FeatureBank& bank, const Matrix& responses,
                                  const std::vector<std::size_t>& fit_rows,
                                  const std::vector<std::size_t>& eval_rows, double ridge) {
    const std::size_t nl = bank.layer_count();
    if (responses.rank() != 2 || responses.dim(0) != bank.image_count()) {
        throw InvalidArgument("responses must have one row per bank image");
    }
    if (fit_rows.empty() || eval_rows.size() < 2) {
        throw InvalidArgument("grid search needs fit rows and at least 2 eval rows");
    }
    if (ridge < 0.0) throw InvalidArgument("ridge penalty must be nonnegative");
    const std::size_t n = responses.dim(1);
    LayerGridSearch out;
    out.voxel_scores = Matrix({nl, n});
    out.layer_means.assign(nl, 0.0);

    auto rows_of = [&](const std::vector<std::size_t>& rows) {
        Eigen::MatrixXd y(rows.size(), n);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t i = 0; i < n; ++i) y(r, i) = responses(rows[r], i);
        }
        return y;
    };
    const Eigen::MatrixXd y_fit = rows_of(fit_rows);
    const Eigen::MatrixXd y_eval = rows_of(eval_rows);

    for (std::size_t l = 0; l < nl; ++l) {
        const std::size_t c = bank.layers()[l].channels;
        auto design = [&](const std::vector<std::size_t>& rows) {
            Eigen::MatrixXd x(rows.size(), c + 1);
            for (std::size_t r = 0; r < rows.size(); ++r) {
                const DenseArray g = bank.global(rows[r], l);
                for (std::size_t k = 0; k < c; ++k) x(r, k) = g[k];
                x(r, c) = 1.0;
            }
            return x;
        };
        const Eigen::MatrixXd x_fit = design(fit_rows);
        Eigen::MatrixXd gram = x_fit.transpose() * x_fit;
        for (std::size_t k = 0; k < c; ++k) gram(k, k) += ridge;  // intercept unpenalized
        const Eigen::MatrixXd beta = gram.ldlt().solve(x_fit.transpose() * y_fit);
        const Eigen::MatrixXd pred = design(eval_rows) * beta;

        Matrix p({eval_rows.size(), n}), t({eval_rows.size(), n});
        for (std::size_t r = 0; r < eval_rows.size(); ++r) {
            for (std::size_t i = 0; i < n; ++i) {
                p(r, i) = pred(r, i);
                t(r, i) = y_eval(r, i);
            }
        }
        const ScoreReport rep = brain_score(p, t);
        for (std::size_t i = 0; i < n; ++i) out.voxel_scores(l, i) = rep.r2[i];
        out.layer_means[l] = rep.mean();
    }
    out.best_layer = static_cast<std::size_t>(
        std::max_element(out.layer_means.begin(), out.layer_means.end()) -
        out.layer_means.begin());
    return out;
}

std::map<std::string, std::vector<double>> roi_average(
    const Matrix& values, const std::map<std::string, std::vector<std::size_t>>& rois) {
    if (values.rank() != 2) throw InvalidArgument("values must be N×K");
    check_rois(rois, values.dim(0));
    std::map<std::string, std::vector<double>> out;
    const std::size_t k = values.dim(1);
    for (const auto& [name, idx] : rois) {
        if (idx.empty()) throw InvalidArgument("ROI '" + name + "' is empty");
        std::vector<double> avg(k, 0.0);
        for (std::size_t i : idx) {
            for (std::size_t j = 0; j < k; ++j) avg[j] += values(i, j);
        }
        for (double& v : avg) v /= static_cast<double>(idx.size());
        out[name] = std::move(avg);
    }
    return out;
}

}  // namespace factortopy
