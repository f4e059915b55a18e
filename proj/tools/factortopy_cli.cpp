// SPDX-License-Identifier: Apache-2.0
// Command-line front end: synth, train, eval, viz, cluster, gradcheck, ablate.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "factortopy/analysis.hpp"
#include "factortopy/checkpoint.hpp"
#include "factortopy/error.hpp"
#include "factortopy/metrics.hpp"
#include "factortopy/synthetic.hpp"
#include "factortopy/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace factortopy;

namespace {

constexpr int kOk = 0;
constexpr int kUserError = 1;
constexpr int kInternalError = 2;

void write_json(const json& doc, const fs::path& file) {
    std::ofstream out(file);
    if (!out) throw FormatError("cannot write " + file.string());
    out << doc.dump(2) << '\n';
}

json read_json_file(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw InvalidArgument("cannot open config file " + file.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InvalidArgument("config file " + file.string() + " is not valid JSON: " + e.what());
    }
}

void prepare_output_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_directory(dir)) {
        throw InvalidArgument("output path " + dir.string() + " exists and is not a directory");
    }
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) {
            throw InvalidArgument("output directory " + dir.string() +
                                  " is not empty; pass --force to overwrite");
        }
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

void require_path(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw InvalidArgument(what + " not found: " + p.string());
}

std::string fmt(double v) {
    if (!std::isfinite(v)) return "nan";
    std::ostringstream s;
    s << std::setprecision(9) << v;
    return s.str();
}

void write_csv(const fs::path& file, const std::string& header,
               const std::vector<std::string>& rows) {
    std::ofstream out(file);
    if (!out) throw FormatError("cannot write " + file.string());
    out << header << '\n';
    for (const auto& r : rows) out << r << '\n';
}

std::size_t env_workers() {
    if (const char* v = std::getenv("FACTORTOPY_WORKERS")) {
        try {
            const long n = std::stol(v);
            if (n >= 1) return static_cast<std::size_t>(n);
        } catch (const std::exception&) {
        }
        std::cerr << "warning: ignoring FACTORTOPY_WORKERS='" << v << "'\n";
    }
    return 1;
}

// Encoder and training settings shared by train and ablate:
// defaults < --config file < explicit flags.
struct ModelFlags {
    std::string config_file;
    std::string variant = "factortopy";
    std::size_t dim = 128, hidden_width = 128, hidden_layers = 2, pe = 10, grid = 8, heads = 3;
    double lr = 1e-3, weight_decay = 1e-2, beta = 0.1, reg_lambda = 0.1;
    std::size_t batch = 8, steps_per_epoch = 1000, max_epochs = 1000, patience = 20;
    std::size_t reg_decay = 6000, soup_size = 10;
    std::string soup_target = "val";

    std::vector<CLI::Option*> opts;

    void add(CLI::App* app) {
        app->add_option("--config", config_file, "JSON file with 'encoder' and 'train' sections")
            ->check(CLI::ExistingFile);
        opts = {
            app->add_option("--variant", variant, "model variant"),
            app->add_option("--dim", dim, "bottleneck dimension D"),
            app->add_option("--hidden-width", hidden_width, "selector MLP width"),
            app->add_option("--hidden-layers", hidden_layers, "selector MLP hidden layers"),
            app->add_option("--pe-frequencies", pe, "positional-encoding octaves"),
            app->add_option("--grid", grid, "working token grid size"),
            app->add_option("--sample-heads", heads, "space heads for multi_sample"),
            app->add_option("--lr", lr, "learning rate"),
            app->add_option("--weight-decay", weight_decay, "AdamW weight decay"),
            app->add_option("--beta", beta, "smooth-L1 beta"),
            app->add_option("--reg-lambda", reg_lambda, "entropy regularizer weight"),
            app->add_option("--reg-decay", reg_decay, "regularizer decay steps"),
            app->add_option("--batch-size", batch, "images per step"),
            app->add_option("--steps-per-epoch", steps_per_epoch, "optimizer steps per epoch"),
            app->add_option("--max-epochs", max_epochs, "epoch cap"),
            app->add_option("--patience", patience, "early-stopping patience in epochs"),
            app->add_option("--soup-size", soup_size, "checkpoints kept for the soup"),
            app->add_option("--soup-target", soup_target, "split scored by the soup (val|test)"),
        };
    }

    bool given(const std::string& name) const {
        for (const auto* o : opts) {
            if (o->get_name() == name) return o->count() > 0;
        }
        return false;
    }

    std::pair<EncoderConfig, TrainConfig> resolve(std::uint64_t seed, std::size_t workers) const {
        EncoderConfig ec;
        TrainConfig tc;
        if (!config_file.empty()) {
            const json doc = read_json_file(config_file);
            for (const auto& [key, _] : doc.items()) {
                if (key != "encoder" && key != "train") {
                    throw InvalidArgument("config file: unknown section '" + key + "'");
                }
            }
            if (doc.contains("encoder")) {
                json merged = config_to_json(ec);
                for (const auto& [key, value] : doc["encoder"].items()) {
                    if (!merged.contains(key)) {
                        throw InvalidArgument("config file: unknown encoder key '" + key + "'");
                    }
                    merged[key] = value;
                }
                ec = config_from_json(merged);
            }
            if (doc.contains("train")) tc = train_config_from_json(doc["train"], tc);
        }
        if (given("--variant") || config_file.empty()) ec.variant = variant_from_string(variant);
        if (given("--dim") || config_file.empty()) ec.bottleneck_dim = dim;
        if (given("--hidden-width") || config_file.empty()) ec.hidden_width = hidden_width;
        if (given("--hidden-layers") || config_file.empty()) ec.hidden_layers = hidden_layers;
        if (given("--pe-frequencies") || config_file.empty()) ec.pe_frequencies = pe;
        if (given("--grid") || config_file.empty()) ec.grid_height = ec.grid_width = grid;
        if (given("--sample-heads") || config_file.empty()) ec.multi_sample_heads = heads;
        if (given("--lr") || config_file.empty()) tc.learning_rate = lr;
        if (given("--weight-decay") || config_file.empty()) tc.weight_decay = weight_decay;
        if (given("--beta") || config_file.empty()) tc.smooth_l1_beta = beta;
        if (given("--reg-lambda") || config_file.empty()) tc.reg_lambda = reg_lambda;
        if (given("--reg-decay") || config_file.empty()) tc.reg_decay_steps = reg_decay;
        if (given("--batch-size") || config_file.empty()) tc.batch_size = batch;
        if (given("--steps-per-epoch") || config_file.empty()) tc.steps_per_epoch = steps_per_epoch;
        if (given("--max-epochs") || config_file.empty()) tc.max_epochs = max_epochs;
        if (given("--patience") || config_file.empty()) tc.patience = patience;
        if (given("--soup-size") || config_file.empty()) tc.soup_size = soup_size;
        if (given("--soup-target") || config_file.empty()) tc.soup_target = soup_target;
        tc.seed = seed;
        tc.workers = workers;
        if (ec.bottleneck_dim == 0) throw InvalidArgument("--dim must be ≥ 1");
        if (ec.grid_height == 0) throw InvalidArgument("--grid must be ≥ 1");
        tc.validate();
        return {ec, tc};
    }
};

struct TrainOutcome {
    EncoderModel model;
    TrainHistory history;
    double val_r2 = 0.0;
    double test_r2 = 0.0;
    std::optional<SoupResult> soup;
};

TrainOutcome run_training(const TrainData& data, const EncoderConfig& ec, const TrainConfig& tc,
                          bool soup, bool verbose) {
    EncoderModel model = init_model(ec, data.coords.dim(0), data.layers, tc.seed, data.train_mean());
    TrainOutcome out;
    auto result = train(std::move(model), data, tc, [&](const EpochRecord& r) {
        if (verbose) {
            std::cerr << "epoch " << r.epoch << " step " << r.step << " loss " << fmt(r.train_loss)
                      << " val_r2 " << fmt(r.val_r2) << '\n';
        }
        return true;
    });
    out.history = std::move(result.history);
    out.model = std::move(result.model);
    if (soup) {
        const SplitData& target = tc.soup_target == "test" ? data.test : data.val;
        std::vector<EncoderModel> cands;
        for (const auto& c : out.history.checkpoints) cands.push_back(c.model);
        out.soup = greedy_soup(cands, [&](const EncoderModel& m) {
            return evaluate_split(m, target, data.coords, tc.workers);
        });
        out.model = out.soup->model;
    }
    out.val_r2 = evaluate_split(out.model, data.val, data.coords, tc.workers);
    out.test_r2 = data.test.images.size() >= 2
                      ? evaluate_split(out.model, data.test, data.coords, tc.workers)
                      : std::nan("");
    return out;
}

const SplitData& pick_split(const TrainData& data, const std::string& name) {
    if (name == "train") return data.train;
    if (name == "val") return data.val;
    if (name == "test") return data.test;
    throw InvalidArgument("unknown split '" + name + "' (train|val|test)");
}

// ---------------------------------------------------------------- synth

struct SynthCmd {
    SyntheticConfig cfg;
    std::string out;
    bool force = false;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("synth", "generate a synthetic dataset with ground truth");
        app->add_option("--out", out, "output dataset directory")->required();
        app->add_option("--n-voxels", cfg.voxels, "voxel count");
        app->add_option("--layers", cfg.layers, "layer count");
        app->add_option("--channels", cfg.channels, "channels per layer");
        app->add_option("--height", cfg.height, "token grid height");
        app->add_option("--width", cfg.width, "token grid width");
        app->add_option("--dim", cfg.dim, "planted bottleneck width");
        app->add_option("--images", cfg.images, "image count");
        app->add_option("--noise", cfg.noise, "response noise sigma");
        app->add_option("--smoothness", cfg.smoothness, "planted field frequency scale");
        app->add_option("--layer-sharpness", cfg.layer_sharpness, "planted layer profile sharpness");
        app->add_option("--blur", cfg.blur, "feature blur radius in cells");
        app->add_option("--sessions", cfg.sessions, "session count (0 = none)");
        app->add_option("--seed", cfg.seed, "random seed");
        app->add_flag("--force", force, "overwrite a non-empty output directory");
        app->callback([this] { run(); });
    }

    void run() {
        prepare_output_dir(out, force);
        const auto synth = generate_synthetic(cfg);
        write_synthetic(synth, out);
        std::cout << "wrote " << cfg.images << " images, " << cfg.voxels << " voxels, "
                  << cfg.layers << " layers to " << out << '\n';
    }
};

// ---------------------------------------------------------------- train

struct TrainCmd {
    ModelFlags flags;
    std::string data, out;
    std::uint64_t seed = 0;
    std::size_t max_samples = 0;
    bool soup = false, force = false, quiet = false;
    std::size_t* workers;

    explicit TrainCmd(std::size_t* w) : workers(w) {}

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("train", "train a model on a dataset");
        app->add_option("--data", data, "dataset directory")->required();
        app->add_option("--out", out, "run directory (default runs/<variant>-seed<seed>)");
        app->add_option("--seed", seed, "random seed");
        app->add_option("--max-samples", max_samples, "subsample the train split (0 = all)");
        app->add_flag("--soup", soup, "average top checkpoints with a greedy soup");
        app->add_flag("--force", force, "overwrite a non-empty run directory");
        app->add_flag("--quiet", quiet, "no per-epoch progress");
        flags.add(app);
        app->callback([this] { run(); });
    }

    void run() {
        require_path(data, "dataset directory");
        const auto [ec, tc] = flags.resolve(seed, *workers);
        const fs::path dir = out.empty()
                                 ? fs::path("runs") / (to_string(ec.variant) + "-seed" + std::to_string(seed))
                                 : fs::path(out);
        prepare_output_dir(dir, force);
        const Dataset ds = load_dataset(data);
        const TrainData td = prepare_train_data(ds, ec, max_samples, seed);
        json echo = {{"command", "train"},       {"data", fs::absolute(data).string()},
                     {"seed", seed},             {"max_samples", max_samples},
                     {"soup", soup},             {"encoder", config_to_json(ec)},
                     {"train", train_config_to_json(tc)}};
        write_json(echo, dir / "config.json");

        const TrainOutcome res = run_training(td, ec, tc, soup, !quiet);
        {
            std::ofstream hist(dir / "history.jsonl");
            write_history_jsonl(res.history, hist);
        }
        const json extra = {{"seed", seed}, {"val_r2", res.val_r2}};
        save_checkpoint(res.model, dir / "model.ckpt", extra);
        for (std::size_t k = 0; k < res.history.checkpoints.size(); ++k) {
            const auto& c = res.history.checkpoints[k];
            save_checkpoint(c.model, dir / "checkpoints" / ("rank" + std::to_string(k) + ".ckpt"),
                            {{"epoch", c.epoch}, {"step", c.step}, {"val_r2", c.score}});
        }
        json summary = {{"variant", to_string(ec.variant)},
                        {"seed", seed},
                        {"train_images", td.train.images.size()},
                        {"steps", res.history.steps},
                        {"best_epoch", res.history.best_epoch},
                        {"early_stopped", res.history.early_stopped},
                        {"val_r2", res.val_r2},
                        {"test_r2", std::isfinite(res.test_r2) ? json(res.test_r2) : json(nullptr)}};
        if (res.soup) {
            summary["soup"] = {{"ingredients", res.soup->ingredients},
                               {"score", res.soup->score},
                               {"best_single", res.soup->best_single},
                               {"target", tc.soup_target}};
        }
        write_json(summary, dir / "summary.json");
        std::cout << "val_r2 " << fmt(res.val_r2) << " test_r2 " << fmt(res.test_r2) << "\nrun "
                  << dir.string() << '\n';
    }
};

// ---------------------------------------------------------------- eval

struct EvalCmd {
    std::string data, checkpoint, out, split = "test";
    bool ground_truth = false, grid_search = false, force = false;
    std::size_t* workers;

    explicit EvalCmd(std::size_t* w) : workers(w) {}

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("eval", "score a checkpoint (or the planted model)");
        app->add_option("--data", data, "dataset directory")->required();
        app->add_option("--checkpoint", checkpoint, "model checkpoint");
        app->add_flag("--ground-truth", ground_truth, "evaluate the planted synthetic model");
        app->add_option("--split", split, "train|val|test");
        app->add_option("--out", out, "report directory")->required();
        app->add_flag("--grid-search", grid_search, "also run the per-layer grid search");
        app->add_flag("--force", force, "overwrite a non-empty report directory");
        app->callback([this] { run(); });
    }

    void run() {
        require_path(data, "dataset directory");
        if (ground_truth == !checkpoint.empty()) {
            throw InvalidArgument("pass exactly one of --checkpoint or --ground-truth");
        }
        if (!checkpoint.empty()) require_path(checkpoint, "checkpoint");
        const Dataset ds = load_dataset(data);
        Matrix pred;
        const SplitData* target = nullptr;
        TrainData td;
        std::optional<Matrix> layer_weights;
        if (ground_truth) {
            const SyntheticGroundTruth truth = load_ground_truth(data);
            PlantedModel planted = planted_model(truth, ds.bank.layers());
            td = prepare_train_data(ds, planted.model.config());
            target = &pick_split(td, split);
            pred = forward_with_selectors(planted.model, target->images, planted.selectors).prediction;
            layer_weights = truth.layer;
        } else {
            const EncoderModel model = load_checkpoint(checkpoint);
            td = prepare_train_data(ds, model.config());
            if (model.voxel_count() != td.coords.dim(0)) {
                throw InvalidArgument("checkpoint has " + std::to_string(model.voxel_count()) +
                                      " voxels, dataset has " + std::to_string(td.coords.dim(0)));
            }
            target = &pick_split(td, split);
            pred = predict(model, target->images, encode_coords(model, td.coords), *workers);
            layer_weights = run_selectors(model, td.coords).layer;
        }
        prepare_output_dir(out, force);
        ScoreReport rep = brain_score(pred, target->targets);
        aggregate_rois(rep, td.rois);
        std::vector<std::string> rows;
        for (std::size_t i = 0; i < rep.r2.size(); ++i) rows.push_back(std::to_string(i) + "," + fmt(rep.r2[i]));
        write_csv(fs::path(out) / "scores.csv", "voxel_id,r2", rows);

        json summary = {{"split", split},
                        {"images", target->images.size()},
                        {"mean_r2", rep.mean()},
                        {"missing", rep.missing},
                        {"roi_mean_r2", rep.roi_mean}};
        try {
            const HierarchyFit fit = hierarchy_slope(*layer_weights, td.rois, default_roi_levels());
            summary["hierarchy"] = {{"slope", fit.slope}, {"b0", fit.b0}, {"b1", fit.b1}};
        } catch (const InvalidArgument&) {
            summary["hierarchy"] = nullptr;  // ROIs do not span two levels
        }
        if (grid_search) {
            std::vector<std::size_t> fit_rows, eval_rows;
            for (const auto* f : td.train.images) fit_rows.push_back(static_cast<std::size_t>(f - td.features.data()));
            for (const auto* f : target->images) eval_rows.push_back(static_cast<std::size_t>(f - td.features.data()));
            Matrix responses({ds.bank.image_count(), td.coords.dim(0)});
            auto place = [&](const SplitData& s) {
                for (std::size_t r = 0; r < s.images.size(); ++r) {
                    const std::size_t idx = static_cast<std::size_t>(s.images[r] - td.features.data());
                    for (std::size_t i = 0; i < responses.dim(1); ++i) responses(idx, i) = s.targets(r, i);
                }
            };
            place(td.train);
            place(*target);
            const LayerGridSearch gs = layer_grid_search(ds.bank, responses, fit_rows, eval_rows);
            summary["grid_search"] = {{"layer_mean_r2", gs.layer_means}, {"best_layer", gs.best_layer}};
        }
        summary["config"] = {{"command", "eval"},
                             {"data", fs::absolute(data).string()},
                             {"checkpoint", checkpoint.empty() ? json(nullptr) : json(fs::absolute(checkpoint).string())},
                             {"ground_truth", ground_truth},
                             {"split", split},
                             {"grid_search", grid_search}};
        write_json(summary, fs::path(out) / "summary.json");
        std::cout << "mean_r2 " << fmt(rep.mean()) << " (" << split << ", " << target->images.size()
                  << " images)\n";
    }
};

// ---------------------------------------------------------------- viz

struct VizCmd {
    std::string data, checkpoint, out, image, roi;
    bool force = false;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("viz", "layer map, confidence and ROI channel images");
        app->add_option("--data", data, "dataset directory")->required();
        app->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
        app->add_option("--out", out, "output directory")->required();
        app->add_option("--image", image, "image id for the ROI channel image");
        app->add_option("--roi", roi, "ROI name for the channel image");
        app->add_flag("--force", force, "overwrite a non-empty output directory");
        app->callback([this] { run(); });
    }

    void run() {
        require_path(data, "dataset directory");
        require_path(checkpoint, "checkpoint");
        const EncoderModel model = load_checkpoint(checkpoint);
        const Dataset ds = load_dataset(data);
        const Matrix coords = normalize_coords(ds.voxels.coords);
        if (coords.dim(0) != model.voxel_count()) {
            throw InvalidArgument("checkpoint and dataset voxel counts differ");
        }
        if (image.empty() != roi.empty()) throw InvalidArgument("--image and --roi go together");
        prepare_output_dir(out, force);
        const LayerColorMap map = layer_color_map(model, coords);
        std::vector<std::string> rows;
        std::vector<double> argmax(map.argmax.begin(), map.argmax.end());
        for (std::size_t i = 0; i < map.argmax.size(); ++i) {
            rows.push_back(std::to_string(i) + "," + std::to_string(map.argmax[i]) + "," + fmt(map.confidence[i]));
        }
        write_csv(fs::path(out) / "layer_map.csv", "voxel_id,argmax_layer,confidence", rows);
        json summary = {{"rule", map.rule}, {"mean_confidence", nan_mean(map.confidence)}};
        if (ds.voxels.flat) {
            ScatterOptions opt;
            opt.palette = Palette::categorical;
            opt.categories = model.layer_count();
            write_bytes(fs::path(out) / "layer_map.png",
                        render_scatter(argmax, ds.voxels.flat, map.confidence, opt));
            write_bytes(fs::path(out) / "confidence.png", render_scatter(map.confidence, ds.voxels.flat));
        } else {
            summary["note"] = "no voxels/flat.bin; scatter images skipped";
        }
        if (!image.empty()) {
            const auto it = ds.voxels.rois.find(roi);
            if (it == ds.voxels.rois.end()) throw InvalidArgument("unknown ROI '" + roi + "'");
            const FeatureBank bank = downsample_local_tokens(ds.bank, model.config().grid_height,
                                                             model.config().grid_width);
            const std::size_t idx = bank.image_index(image);
            ImageFeatures f{image, {}, {}};
            for (std::size_t l = 0; l < bank.layer_count(); ++l) {
                f.local.push_back(bank.local(idx, l));
                f.global.push_back(bank.global(idx, l));
            }
            const RoiImage ri = roi_channel_image(model, f, it->second, coords);
            const std::size_t h = ri.normalized.dim(1), w = ri.normalized.dim(2);
            const std::size_t zoom = std::max<std::size_t>(1, 256 / std::max(h, w));
            std::vector<std::uint8_t> rgb(h * zoom * w * zoom * 3);
            for (std::size_t y = 0; y < h * zoom; ++y) {
                for (std::size_t x = 0; x < w * zoom; ++x) {
                    for (std::size_t c = 0; c < 3; ++c) {
                        const double v = ri.normalized[c * h * w + (y / zoom) * w + x / zoom];
                        rgb[(y * w * zoom + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255));
                    }
                }
            }
            write_bytes(fs::path(out) / ("roi_" + roi + "_" + image + ".png"), encode_png(rgb, w * zoom, h * zoom));
            summary["roi_image"] = {{"roi", roi}, {"image", image}, {"layer_weights", ri.layer_weights}};
        }
        summary["config"] = {{"command", "viz"},
                             {"data", fs::absolute(data).string()},
                             {"checkpoint", fs::absolute(checkpoint).string()},
                             {"image", image},
                             {"roi", roi}};
        write_json(summary, fs::path(out) / "summary.json");
        std::cout << "wrote " << out << '\n';
    }
};

// ---------------------------------------------------------------- cluster

struct ClusterCmd {
    std::string data, checkpoint, out;
    std::size_t target = 20, kmeans_k = 1000;
    std::uint64_t seed = 0;
    bool force = false;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("cluster", "cluster voxels by read-out channel weights");
        app->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
        app->add_option("--data", data, "dataset directory (for flat coordinates)");
        app->add_option("--out", out, "output directory")->required();
        app->add_option("--target", target, "final cluster count");
        app->add_option("--kmeans-k", kmeans_k, "upper bound on intermediate k-means clusters");
        app->add_option("--seed", seed, "random seed");
        app->add_flag("--force", force, "overwrite a non-empty output directory");
        app->callback([this] { run(); });
    }

    void run() {
        require_path(checkpoint, "checkpoint");
        const EncoderModel model = load_checkpoint(checkpoint);
        const ChannelClustering cc = cluster_channels(readout_columns(model), target, kmeans_k, seed);
        prepare_output_dir(out, force);
        std::vector<std::string> rows;
        std::vector<std::size_t> sizes(std::max<std::size_t>(cc.clusters, 1), 0);
        for (std::size_t i = 0; i < cc.labels.size(); ++i) {
            rows.push_back(std::to_string(i) + "," + std::to_string(cc.labels[i]));
            ++sizes[cc.labels[i]];
        }
        write_csv(fs::path(out) / "clusters.csv", "voxel_id,cluster", rows);
        if (!data.empty()) {
            require_path(data, "dataset directory");
            const FeatureBank bank = load_feature_bank(data);
            const VoxelSet vs = load_voxel_set(data, bank);
            if (vs.flat) {
                std::vector<double> vals(cc.labels.begin(), cc.labels.end());
                ScatterOptions opt;
                opt.palette = Palette::categorical;
                opt.categories = std::max<std::size_t>(cc.clusters, 1);
                write_bytes(fs::path(out) / "clusters.png", render_scatter(vals, vs.flat, {}, opt));
            }
        }
        write_json({{"clusters", cc.clusters},
                    {"kmeans_k", cc.kmeans_k},
                    {"degenerate", cc.degenerate},
                    {"sizes", sizes},
                    {"config", {{"command", "cluster"},
                                {"checkpoint", fs::absolute(checkpoint).string()},
                                {"target", target},
                                {"kmeans_k", kmeans_k},
                                {"seed", seed}}}},
                   fs::path(out) / "summary.json");
        std::cout << cc.clusters << " clusters (k-means k=" << cc.kmeans_k << ")"
                  << (cc.degenerate ? ", degenerate weights" : "") << '\n';
    }
};

// ---------------------------------------------------------------- gradcheck

struct GradCheckCmd {
    std::size_t voxels = 6, layers = 3, dim = 8, grid = 4, batch = 2, width = 32, channels = 5;
    std::string variant = "factortopy";
    double epsilon = 1e-3, tolerance = 1e-4;
    std::size_t max_entries = 0;
    std::uint64_t seed = 0;
    int* exit_code;

    explicit GradCheckCmd(int* code) : exit_code(code) {}

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("gradcheck", "finite-difference check on a tiny random model");
        app->add_option("--voxels", voxels, "voxel count");
        app->add_option("--layers", layers, "layer count");
        app->add_option("--dim", dim, "bottleneck dimension");
        app->add_option("--grid", grid, "token grid size");
        app->add_option("--channels", channels, "channels per layer");
        app->add_option("--batch", batch, "batch size");
        app->add_option("--hidden-width", width, "selector MLP width");
        app->add_option("--variant", variant, "model variant");
        app->add_option("--epsilon", epsilon, "finite-difference step");
        app->add_option("--tolerance", tolerance, "relative error tolerance");
        app->add_option("--max-entries", max_entries, "entries checked per group (0 = all)");
        app->add_option("--seed", seed, "random seed");
        app->callback([this] { run(); });
    }

    void run() {
        SyntheticConfig sc;
        sc.voxels = voxels;
        sc.layers = layers;
        sc.channels = channels;
        sc.height = sc.width = grid;
        sc.dim = dim;
        sc.images = std::max<std::size_t>(batch, 1);
        sc.seed = seed;
        const auto synth = generate_synthetic(sc);
        EncoderConfig ec;
        ec.variant = variant_from_string(variant);
        ec.bottleneck_dim = dim;
        ec.hidden_width = width;
        ec.grid_height = ec.grid_width = grid;
        const auto feats = extract_features(synth.dataset.bank);
        EncoderModel model = init_model(ec, voxels, synth.dataset.bank.layers(), seed);
        randomize_parameters(model, seed + 1);
        const Matrix coords = normalize_coords(synth.dataset.voxels.coords);
        std::vector<const ImageFeatures*> imgs;
        Matrix targets({batch, voxels});
        for (std::size_t b = 0; b < batch; ++b) {
            imgs.push_back(&feats[b]);
            for (std::size_t i = 0; i < voxels; ++i) targets(b, i) = synth.dataset.voxels.responses(b, i);
        }
        TrainConfig tc;
        const auto rep = grad_check(model, imgs, targets, encode_coords(model, coords), tc, 0,
                                    epsilon, max_entries, tolerance);
        for (const auto& g : rep.groups) {
            std::cout << (g.passed ? "ok   " : "FAIL ") << std::left << std::setw(28) << g.name
                      << " entries " << std::setw(6) << g.entries << " rel " << fmt(g.rel_error)
                      << '\n';
        }
        std::cout << (rep.passed ? "all groups pass" : "gradient check FAILED") << '\n';
        *exit_code = rep.passed ? kOk : kInternalError;
    }
};

// ---------------------------------------------------------------- ablate

struct AblateCmd {
    ModelFlags flags;
    std::string data, out, variants = "factortopy,class_token,no_space_sel";
    std::size_t seeds = 3, max_samples = 0;
    std::uint64_t base_seed = 0;
    bool force = false, quiet = false;
    std::size_t* workers;

    explicit AblateCmd(std::size_t* w) : workers(w) {}

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("ablate", "train a grid of variants × seeds, report means");
        app->add_option("--data", data, "dataset directory")->required();
        app->add_option("--out", out, "output directory")->required();
        app->add_option("--variants", variants, "comma-separated variant list");
        app->add_option("--seeds", seeds, "runs per variant");
        app->add_option("--seed", base_seed, "first seed");
        app->add_option("--max-samples", max_samples, "subsample the train split (0 = all)");
        app->add_flag("--force", force, "overwrite a non-empty output directory");
        app->add_flag("--quiet", quiet, "no per-run progress");
        flags.add(app);
        app->callback([this] { run(); });
    }

    void run() {
        require_path(data, "dataset directory");
        if (seeds == 0) throw InvalidArgument("--seeds must be ≥ 1");
        std::vector<Variant> list;
        std::stringstream ss(variants);
        for (std::string item; std::getline(ss, item, ',');) {
            if (!item.empty()) list.push_back(variant_from_string(item));
        }
        if (list.empty()) throw InvalidArgument("--variants is empty");
        const auto [base_ec, base_tc] = flags.resolve(base_seed, *workers);
        prepare_output_dir(out, force);
        const Dataset ds = load_dataset(data);
        json runs = json::array();
        std::vector<std::string> rows;
        for (Variant v : list) {
            EncoderConfig ec = base_ec;
            ec.variant = v;
            std::vector<double> tests, vals, confs;
            for (std::size_t s = 0; s < seeds; ++s) {
                TrainConfig tc = base_tc;
                tc.seed = base_seed + s;
                const TrainData td = prepare_train_data(ds, ec, max_samples, tc.seed);
                const TrainOutcome res = run_training(td, ec, tc, false, false);
                const auto conf = confidence(run_selectors(res.model, td.coords).layer);
                tests.push_back(res.test_r2);
                vals.push_back(res.val_r2);
                confs.push_back(nan_mean(conf));
                runs.push_back({{"variant", to_string(v)}, {"seed", tc.seed}, {"val_r2", res.val_r2},
                                {"test_r2", res.test_r2}, {"mean_confidence", confs.back()},
                                {"steps", res.history.steps}});
                if (!quiet) {
                    std::cerr << to_string(v) << " seed " << tc.seed << " test_r2 " << fmt(res.test_r2) << '\n';
                }
            }
            rows.push_back(to_string(v) + "," + std::to_string(seeds) + "," + fmt(nan_mean(tests)) +
                           "," + fmt(nan_mean(vals)) + "," + fmt(nan_mean(confs)));
            std::cout << std::left << std::setw(14) << to_string(v) << " test_r2 " << fmt(nan_mean(tests)) << '\n';
        }
        write_csv(fs::path(out) / "ablation.csv", "variant,seeds,mean_test_r2,mean_val_r2,mean_confidence", rows);
        write_json({{"runs", runs},
                    {"config", {{"command", "ablate"},
                                {"data", fs::absolute(data).string()},
                                {"variants", variants},
                                {"seeds", seeds},
                                {"seed", base_seed},
                                {"max_samples", max_samples},
                                {"encoder", config_to_json(base_ec)},
                                {"train", train_config_to_json(base_tc)}}}},
                   fs::path(out) / "ablation.json");
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FactorTopy brain-encoding engine"};
    app.require_subcommand(1);
    std::size_t workers = env_workers();
    app.add_option("--workers", workers, "evaluation threads (default: $FACTORTOPY_WORKERS or 1)")
        ->check(CLI::PositiveNumber);
    int exit_code = kOk;

    SynthCmd synth;
    TrainCmd train_cmd(&workers);
    EvalCmd eval(&workers);
    VizCmd viz;
    ClusterCmd cluster;
    GradCheckCmd gradcheck(&exit_code);
    AblateCmd ablate(&workers);
    synth.add(app);
    train_cmd.add(app);
    eval.add(app);
    viz.add(app);
    cluster.add(app);
    gradcheck.add(app);
    ablate.add(app);
    app.parse_complete_callback([&] { set_default_workers(workers); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUserError;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUserError;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUserError;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternalError;
    }
    return exit_code;
}
