// SPDX-License-Identifier: Apache-2.0
#include "factortopy/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "factortopy/error.hpp"
#include "factortopy/metrics.hpp"

namespace factortopy {

using nlohmann::json;

void TrainConfig::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0)) throw InvalidArgument(std::string(name) + " must be > 0");
    };
    positive(learning_rate, "learning_rate");
    positive(smooth_l1_beta, "smooth_l1_beta");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw InvalidArgument("beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw InvalidArgument("beta2 must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw InvalidArgument("weight_decay must be ≥ 0");
    if (!(reg_lambda >= 0.0)) throw InvalidArgument("reg_lambda must be ≥ 0");
    if (batch_size == 0) throw InvalidArgument("batch_size must be ≥ 1");
    if (steps_per_epoch == 0) throw InvalidArgument("steps_per_epoch must be ≥ 1");
    if (max_epochs == 0) throw InvalidArgument("max_epochs must be ≥ 1");
    if (patience == 0) throw InvalidArgument("patience must be ≥ 1");
    if (reg_decay_steps == 0) throw InvalidArgument("reg_decay_steps must be ≥ 1");
    if (soup_size == 0) throw InvalidArgument("soup_size must be ≥ 1");
    if (soup_target != "val" && soup_target != "test") {
        throw InvalidArgument("soup_target must be 'val' or 'test', got '" + soup_target + "'");
    }
    if (workers == 0) throw InvalidArgument("workers must be ≥ 1");
}

json train_config_to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"beta1", c.beta1},
            {"beta2", c.beta2},                 {"weight_decay", c.weight_decay},
            {"batch_size", c.batch_size},       {"steps_per_epoch", c.steps_per_epoch},
            {"max_epochs", c.max_epochs},       {"patience", c.patience},
            {"smooth_l1_beta", c.smooth_l1_beta}, {"reg_lambda", c.reg_lambda},
            {"reg_decay_steps", c.reg_decay_steps}, {"seed", c.seed},
            {"soup_size", c.soup_size},         {"soup_target", c.soup_target},
            {"workers", c.workers}};
}

TrainConfig train_config_from_json(const json& doc, TrainConfig c) {
    if (!doc.is_object()) throw InvalidArgument("training config must be a JSON object");
    const json known = train_config_to_json(c);
    std::vector<std::string> problems;
    for (const auto& [key, value] : doc.items()) {
        if (!known.contains(key)) {
            problems.push_back("unknown key '" + key + "'");
            continue;
        }
        const bool numeric = known[key].is_number();
        if (numeric != value.is_number() || (!numeric && !value.is_string())) {
            problems.push_back("key '" + key + "' has the wrong type");
            continue;
        }
        if (known[key].is_number_unsigned() && !(value.is_number_unsigned() || value.is_number_integer())) {
            problems.push_back("key '" + key + "' must be an integer");
            continue;
        }
        if (known[key].is_number_unsigned() && value.get<long long>() < 0) {
            problems.push_back("key '" + key + "' must be nonnegative");
        }
    }
    if (!problems.empty()) {
        std::string msg = "training config is invalid:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw InvalidArgument(msg);
    }
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.beta1 = doc.value("beta1", c.beta1);
    c.beta2 = doc.value("beta2", c.beta2);
    c.weight_decay = doc.value("weight_decay", c.weight_decay);
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.steps_per_epoch = doc.value("steps_per_epoch", c.steps_per_epoch);
    c.max_epochs = doc.value("max_epochs", c.max_epochs);
    c.patience = doc.value("patience", c.patience);
    c.smooth_l1_beta = doc.value("smooth_l1_beta", c.smooth_l1_beta);
    c.reg_lambda = doc.value("reg_lambda", c.reg_lambda);
    c.reg_decay_steps = doc.value("reg_decay_steps", c.reg_decay_steps);
    c.seed = doc.value("seed", c.seed);
    c.soup_size = doc.value("soup_size", c.soup_size);
    c.soup_target = doc.value("soup_target", c.soup_target);
    c.workers = doc.value("workers", c.workers);
    c.validate();
    return c;
}

LossValue smooth_l1(const Matrix& pred, const Matrix& target, double beta) {
    if (pred.shape() != target.shape()) {
        throw InvalidArgument("smooth_l1: prediction " + shape_string(pred.shape()) +
                              " and target " + shape_string(target.shape()) + " differ");
    }
    if (!(beta > 0.0)) throw InvalidArgument("smooth_l1: beta must be > 0");
    LossValue out{0.0, Matrix(pred.shape())};
    const std::size_t count = pred.size();
    if (count == 0) return out;
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double d = pred[i] - target[i];
        const double a = std::abs(d);
        if (a < beta) {
            out.loss += 0.5 * d * d / beta;
            out.gradient[i] = d / beta * inv;
        } else {
            out.loss += a - 0.5 * beta;
            out.gradient[i] = (d > 0 ? 1.0 : -1.0) * inv;
        }
    }
    out.loss *= inv;
    return out;
}

double regularizer_multiplier(std::size_t step, double lambda, std::size_t decay_steps) {
    if (decay_steps == 0) throw InvalidArgument("regularizer decay steps must be ≥ 1");
    if (step >= decay_steps) return 0.0;
    return lambda * (1.0 - static_cast<double>(step) / static_cast<double>(decay_steps));
}

RegularizerValue entropy_regularizer(const Matrix& w, std::size_t step, double lambda,
                                     std::size_t decay_steps) {
    if (w.rank() != 2) throw InvalidArgument("layer weights must be N×L");
    const std::size_t n = w.dim(0), nl = w.dim(1);
    RegularizerValue out;
    out.gradient = Matrix(w.shape());
    out.multiplier = regularizer_multiplier(step, lambda, decay_steps);
    if (n == 0 || nl <= 1) return out;
    constexpr double kFloor = 1e-12;
    // Σ_l (1/L) log(1/L), summed the same way as a row so uniform rows give
    // a ratio of exactly 1.
    const double u = 1.0 / static_cast<double>(nl);
    double norm = 0.0;
    for (std::size_t l = 0; l < nl; ++l) norm += u * std::log(u);
    const double coeff = -1.0 / (static_cast<double>(n) * norm);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t l = 0; l < nl; ++l) {
            const double p = w(i, l);
            const double lp = std::log(std::max(p, kFloor));
            row += p * lp;
            out.gradient(i, l) = out.multiplier * coeff * (p > kFloor ? lp + 1.0 : lp);
        }
        total += row / norm;
    }
    out.loss_reg = -total / static_cast<double>(n);
    out.term = out.multiplier * out.loss_reg;
    return out;
}

std::vector<double> TrainData::train_mean() const {
    const std::size_t n = coords.dim(0);
    std::vector<double> mean(n, 0.0);
    const std::size_t m = train.targets.empty() ? 0 : train.targets.dim(0);
    if (m == 0) return mean;
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t i = 0; i < n; ++i) mean[i] += train.targets(r, i);
    }
    for (double& v : mean) v /= static_cast<double>(m);
    return mean;
}

TrainData prepare_train_data(const Dataset& dataset, const EncoderConfig& config,
                             std::size_t max_train, std::uint64_t subset_seed) {
    if (!dataset.splits) throw InvalidArgument("dataset has no splits (splits.json)");
    dataset.voxels.validate();
    validate_splits(*dataset.splits, dataset.bank, dataset.voxels);
    TrainData data;
    const FeatureBank bank =
        downsample_local_tokens(dataset.bank, config.grid_height, config.grid_width);
    const VoxelSet voxels = dataset.sessions.empty()
                                ? dataset.voxels
                                : session_zscore(dataset.voxels, bank, dataset.sessions).voxels;
    data.features = extract_features(bank);
    data.layers = bank.layers();
    data.coords = normalize_coords(voxels.coords);
    data.rois = voxels.rois;
    const std::size_t n = voxels.size();

    auto fill = [&](const std::vector<std::string>& ids, SplitData& split) {
        split.images.clear();
        split.targets = Matrix({ids.size(), n});
        for (std::size_t r = 0; r < ids.size(); ++r) {
            const std::size_t idx = bank.image_index(ids[r]);
            split.images.push_back(&data.features[idx]);
            for (std::size_t i = 0; i < n; ++i) split.targets(r, i) = voxels.responses(idx, i);
        }
    };
    std::vector<std::string> train_ids = dataset.splits->train;
    if (max_train > 0 && max_train < train_ids.size()) {
        std::vector<std::size_t> order(train_ids.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(subset_seed);
        std::shuffle(order.begin(), order.end(), rng);
        order.resize(max_train);
        std::sort(order.begin(), order.end());
        std::vector<std::string> subset;
        for (std::size_t k : order) subset.push_back(train_ids[k]);
        train_ids = std::move(subset);
    }
    fill(train_ids, data.train);
    fill(dataset.splits->val, data.val);
    fill(dataset.splits->test, data.test);
    return data;
}

BatchLoss batch_loss(const EncoderModel& model, std::span<const ImageFeatures* const> images,
                     const Matrix& targets, const Matrix& encoded_coords, std::size_t step,
                     const TrainConfig& config, bool with_gradients) {
    const ForwardTrace trace = forward(model, images, encoded_coords);
    const LossValue l1 = smooth_l1(trace.prediction, targets, config.smooth_l1_beta);
    BatchLoss out;
    out.smooth_l1 = l1.loss;
    const bool learned_layers = !model.layer_head.layers().empty() || !model.layer_table.empty();
    RegularizerValue reg;
    if (learned_layers) {
        reg = entropy_regularizer(trace.selectors.outputs.layer, step, config.reg_lambda,
                                  config.reg_decay_steps);
        out.reg_term = reg.term;
    }
    out.total = out.smooth_l1 + out.reg_term;
    if (with_gradients) {
        out.gradients = backward(model, trace, l1.gradient, learned_layers ? &reg.gradient : nullptr);
    }
    return out;
}

double evaluate_split(const EncoderModel& model, const SplitData& split, const Matrix& coords,
                      std::size_t workers) {
    const Matrix pred = predict(model, split.images, encode_coords(model, coords), workers);
    return brain_score(pred, split.targets).mean();
}

namespace {

void apply_step(AdamW& opt, EncoderModel& model, EncoderGradients& grads) {
    auto params = model.parameters();
    auto slots = model.gradient_slots(grads);
    std::vector<std::span<float>> p;
    std::vector<std::span<const double>> g;
    std::vector<std::string> names;
    for (std::size_t k = 0; k < params.size(); ++k) {
        p.emplace_back(params[k].value->data(), params[k].value->size());
        g.emplace_back(slots[k]->data(), slots[k]->size());
        names.push_back(params[k].name);
    }
    opt.step<float, double>(p, g, names);
}

double or_lowest(double v) { return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity(); }

}  // namespace

TrainResult train(EncoderModel model, const TrainData& data, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
    config.validate();
    const std::size_t n = model.voxel_count();
    if (data.coords.rank() != 2 || data.coords.dim(0) != n) {
        throw InvalidArgument("model has " + std::to_string(n) + " voxels, dataset has " +
                              std::to_string(data.coords.empty() ? 0 : data.coords.dim(0)));
    }
    if (model.layers().size() != data.layers.size()) {
        throw InvalidArgument("model and dataset layer counts differ");
    }
    if (data.train.images.empty()) throw InvalidArgument("training split is empty");
    if (data.val.images.size() < 2) throw InvalidArgument("validation split needs ≥ 2 images");

    const Matrix encoded = encode_coords(model, data.coords);
    AdamW opt({config.learning_rate, config.beta1, config.beta2, 1e-8, config.weight_decay});
    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(data.train.images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;

    TrainResult result;
    auto& hist = result.history;
    double best = -std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    const std::size_t bsz = std::min(config.batch_size, order.size());
    std::vector<const ImageFeatures*> batch(bsz);
    Matrix targets({bsz, n});
    std::vector<std::size_t> rows(bsz);

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        double loss_sum = 0.0, reg_sum = 0.0;
        for (std::size_t s = 0; s < config.steps_per_epoch; ++s) {
            for (std::size_t b = 0; b < bsz; ++b) {
                if (cursor == order.size()) {
                    std::shuffle(order.begin(), order.end(), rng);
                    cursor = 0;
                }
                rows[b] = order[cursor++];
                batch[b] = data.train.images[rows[b]];
                for (std::size_t i = 0; i < n; ++i) targets(b, i) = data.train.targets(rows[b], i);
            }
            BatchLoss bl = batch_loss(model, batch, targets, encoded, hist.steps, config);
            if (!std::isfinite(bl.total)) {
                std::string ids;
                for (const auto* f : batch) ids += (ids.empty() ? "" : ",") + f->id;
                throw NumericError("non-finite loss at step " + std::to_string(hist.steps) +
                                   " (batch images: " + ids + ")");
            }
            apply_step(opt, model, bl.gradients);
            ++hist.steps;
            loss_sum += bl.smooth_l1;
            reg_sum += bl.reg_term;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.step = hist.steps;
        rec.train_loss = loss_sum / static_cast<double>(config.steps_per_epoch);
        rec.reg_term = reg_sum / static_cast<double>(config.steps_per_epoch);
        rec.val_r2 = evaluate_split(model, data.val, data.coords, config.workers);
        hist.epochs.push_back(rec);

        const double score = or_lowest(rec.val_r2);
        auto& cps = hist.checkpoints;
        if (cps.size() < config.soup_size || score > cps.back().score) {
            auto pos = std::find_if(cps.begin(), cps.end(),
                                    [&](const CheckpointRecord& c) { return score > c.score; });
            cps.insert(pos, CheckpointRecord{epoch, hist.steps, score, model});
            if (cps.size() > config.soup_size) cps.pop_back();
        }
        if (score > best) {
            best = score;
            since_best = 0;
            hist.best_epoch = epoch;
        } else {
            ++since_best;
        }
        if (on_epoch && !on_epoch(rec)) break;
        if (since_best >= config.patience) {
            hist.early_stopped = true;
            break;
        }
    }
    result.model = hist.checkpoints.empty() ? model : hist.checkpoints.front().model;
    return result;
}

EncoderModel average_models(const std::vector<const EncoderModel*>& models) {
    if (models.empty()) throw InvalidArgument("cannot average zero models");
    EncoderModel out = *models.front();
    auto target = out.parameters();
    std::vector<std::vector<double>> sums;
    for (const auto& p : target) sums.emplace_back(p.value->size(), 0.0);
    for (const EncoderModel* m : models) {
        const auto params = m->parameters();
        if (m->voxel_count() != out.voxel_count() || params.size() != target.size()) {
            throw InvalidArgument("models with different layouts cannot be averaged");
        }
        for (std::size_t g = 0; g < params.size(); ++g) {
            if (params[g].name != target[g].name ||
                params[g].value->shape() != target[g].value->shape()) {
                throw InvalidArgument("parameter group " + params[g].name + " " +
                                      shape_string(params[g].value->shape()) +
                                      " is incompatible with " + target[g].name + " " +
                                      shape_string(target[g].value->shape()));
            }
            for (std::size_t i = 0; i < sums[g].size(); ++i) sums[g][i] += (*params[g].value)[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(models.size());
    for (std::size_t g = 0; g < target.size(); ++g) {
        for (std::size_t i = 0; i < sums[g].size(); ++i) {
            (*target[g].value)[i] = static_cast<float>(sums[g][i] * inv);
        }
    }
    return out;
}

SoupResult greedy_soup(const std::vector<EncoderModel>& candidates,
                       const std::function<double(const EncoderModel&)>& score) {
    if (candidates.empty()) throw InvalidArgument("greedy soup needs at least one checkpoint");
    // Shape compatibility is checked up front so a bad candidate fails loudly.
    {
        std::vector<const EncoderModel*> all;
        for (const auto& c : candidates) all.push_back(&c);
        (void)average_models(all);
    }
    std::vector<double> scores;
    for (const auto& c : candidates) scores.push_back(or_lowest(score(c)));
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    SoupResult out;
    out.ingredients = {order.front()};
    out.model = candidates[order.front()];
    out.score = scores[order.front()];
    out.best_single = out.score;
    for (std::size_t k = 1; k < order.size(); ++k) {
        std::vector<const EncoderModel*> trial;
        for (std::size_t idx : out.ingredients) trial.push_back(&candidates[idx]);
        trial.push_back(&candidates[order[k]]);
        EncoderModel mixed = average_models(trial);
        const double s = or_lowest(score(mixed));
        if (s >= out.score) {
            out.ingredients.push_back(order[k]);
            out.model = std::move(mixed);
            out.score = s;
        }
    }
    return out;
}

void randomize_parameters(EncoderModel& model, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-scale, scale);
    for (auto& p : model.parameters()) {
        for (float& v : p.value->values()) v = static_cast<float>(dist(rng));
    }
}

GradCheckReport grad_check(const EncoderModel& model,
                           std::span<const ImageFeatures* const> images, const Matrix& targets,
                           const Matrix& encoded_coords, const TrainConfig& config,
                           std::size_t step, double epsilon, std::size_t max_entries,
                           double tolerance, const std::function<void(EncoderGradients&)>& tamper) {
    if (!(epsilon > 0.0)) throw InvalidArgument("finite-difference step must be > 0");
    BatchLoss base = batch_loss(model, images, targets, encoded_coords, step, config);
    if (tamper) tamper(base.gradients);
    const double f0 = base.total;
    EncoderModel work = model;
    auto params = work.parameters();
    const auto slots = model.gradient_slots(base.gradients);
    constexpr double kAbsFloor = 1e-8;

    GradCheckReport report;
    report.tolerance = tolerance;
    report.passed = true;
    for (std::size_t g = 0; g < params.size(); ++g) {
        DenseArray& p = *params[g].value;
        const Matrix& analytic = *slots[g];
        const std::size_t size = p.size();
        std::vector<std::size_t> entries;
        if (max_entries == 0 || size <= max_entries) {
            entries.resize(size);
            std::iota(entries.begin(), entries.end(), std::size_t{0});
        } else {
            for (std::size_t j = 0; j < max_entries; ++j) entries.push_back(j * size / max_entries);
        }
        GroupCheck gc;
        gc.name = params[g].name;
        gc.entries = entries.size();
        double norm_a = 0.0, norm_n = 0.0;
        for (std::size_t idx : entries) {
            const float p0 = p[idx];
            const float up = static_cast<float>(p0 + epsilon);
            const float down = static_cast<float>(p0 - epsilon);
            // Actual steps after float rounding; the three-point formula below is
            // exact for quadratics even when the two steps differ.
            const double hp = static_cast<double>(up) - p0;
            const double hm = static_cast<double>(p0) - down;
            p[idx] = up;
            const double fp = batch_loss(work, images, targets, encoded_coords, step, config, false).total;
            p[idx] = down;
            const double fm = batch_loss(work, images, targets, encoded_coords, step, config, false).total;
            p[idx] = p0;
            const double numeric =
                (hm * hm * fp - hp * hp * fm - (hm * hm - hp * hp) * f0) / (hp * hm * (hp + hm));
            const double a = analytic[idx];
            gc.max_abs_error = std::max(gc.max_abs_error, std::abs(a - numeric));
            norm_a = std::max(norm_a, std::abs(a));
            norm_n = std::max(norm_n, std::abs(numeric));
        }
        gc.scale = std::max(norm_a, norm_n);
        if (gc.scale < kAbsFloor) {
            gc.rel_error = 0.0;
            gc.passed = gc.max_abs_error < kAbsFloor;
        } else {
            gc.rel_error = gc.max_abs_error / gc.scale;
            gc.passed = gc.rel_error < tolerance;
        }
        report.passed = report.passed && gc.passed;
        report.groups.push_back(std::move(gc));
    }
    return report;
}

void write_history_jsonl(const TrainHistory& history, std::ostream& out) {
    for (const auto& e : history.epochs) {
        json line = {{"type", "epoch"},           {"epoch", e.epoch},
                     {"step", e.step},            {"train_loss", e.train_loss},
                     {"reg_term", e.reg_term},
                     {"val_r2", std::isfinite(e.val_r2) ? json(e.val_r2) : json(nullptr)}};
        out << line.dump() << '\n';
    }
    json cps = json::array();
    for (const auto& c : history.checkpoints) {
        cps.push_back({{"epoch", c.epoch}, {"step", c.step}, {"val_r2", c.score}});
    }
    json summary = {{"type", "summary"},
                    {"steps", history.steps},
                    {"best_epoch", history.best_epoch},
                    {"early_stopped", history.early_stopped},
                    {"checkpoints", cps}};
    out << summary.dump() << '\n';
}

}  // namespace factortopy
