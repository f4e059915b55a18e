// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "factortopy/error.hpp"

namespace factortopy {

struct AdamWParams {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 1e-2;
};

/// Moment accumulators for one parameter group.
struct MomentBuffer {
    std::vector<double> first;
    std::vector<double> second;
};

/// Decoupled-weight-decay Adam with bias correction.
///
/// Each call to `step` advances the shared step counter once and updates
/// every group. Groups are registered by size on first use and must keep
/// their size afterwards.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(AdamWParams params) : params_(params) {}

    const AdamWParams& params() const noexcept { return params_; }
    void set_learning_rate(double lr) { params_.learning_rate = lr; }
    std::size_t step_count() const noexcept { return step_; }
    const std::vector<MomentBuffer>& moments() const noexcept { return moments_; }

    /// Validates every gradient, then updates all groups in place.
    /// `names` label groups in error messages.
    template <typename P, typename G>
    void step(std::span<const std::span<P>> params, std::span<const std::span<const G>> grads,
              std::span<const std::string> names = {});

private:
    AdamWParams params_;
    std::vector<MomentBuffer> moments_;
    std::size_t step_ = 0;
};

/// Update for one scalar; exposed so callers and tests share the formula.
inline double adamw_update(double param, double grad, double& m, double& v, std::size_t step,
                           const AdamWParams& p) {
    param *= 1.0 - p.learning_rate * p.weight_decay;
    m = p.beta1 * m + (1.0 - p.beta1) * grad;
    v = p.beta2 * v + (1.0 - p.beta2) * grad * grad;
    const double t = static_cast<double>(step);
    const double m_hat = m / (1.0 - std::pow(p.beta1, t));
    const double v_hat = v / (1.0 - std::pow(p.beta2, t));
    return param - p.learning_rate * m_hat / (std::sqrt(v_hat) + p.epsilon);
}

template <typename P, typename G>
void AdamW::step(std::span<const std::span<P>> params, std::span<const std::span<const G>> grads,
                 std::span<const std::string> names) {
    if (params.size() != grads.size()) {
        throw InvalidArgument("AdamW::step: parameter and gradient group counts differ");
    }
    auto label = [&](std::size_t g) {
        return g < names.size() ? names[g] : "group " + std::to_string(g);
    };
    if (moments_.empty()) {
        moments_.resize(params.size());
        for (std::size_t g = 0; g < params.size(); ++g) {
            moments_[g].first.assign(params[g].size(), 0.0);
            moments_[g].second.assign(params[g].size(), 0.0);
        }
    }
    if (moments_.size() != params.size()) {
        throw InvalidArgument("AdamW::step: group count changed between steps");
    }
    for (std::size_t g = 0; g < params.size(); ++g) {
        if (params[g].size() != grads[g].size() || moments_[g].first.size() != params[g].size()) {
            throw InvalidArgument("AdamW::step: shape mismatch in " + label(g));
        }
        for (std::size_t i = 0; i < grads[g].size(); ++i) {
            if (!std::isfinite(static_cast<double>(grads[g][i]))) {
                throw NumericError("AdamW::step: non-finite gradient in " + label(g) +
                                   " at element " + std::to_string(i));
            }
        }
    }
    ++step_;
    for (std::size_t g = 0; g < params.size(); ++g) {
        auto& mb = moments_[g];
        for (std::size_t i = 0; i < params[g].size(); ++i) {
            params[g][i] = static_cast<P>(adamw_update(static_cast<double>(params[g][i]),
                                                       static_cast<double>(grads[g][i]),
                                                       mb.first[i], mb.second[i], step_,
                                                       params_));
        }
    }
}

}  // namespace factortopy
