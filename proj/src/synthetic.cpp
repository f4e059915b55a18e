// SPDX-License-Identifier: Apache-2.0
#include "factortopy/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "factortopy/error.hpp"

namespace factortopy {

using nlohmann::json;

namespace {

struct Fields {
    double a[2][2];   // space map
    double c[2];
    double phi;       // layer gradient direction
    double scale_dir[2];
    double scale_phase;
};

struct PointFields {
    double u, v;
    double depth;  // in [0, 1]
    double alpha;
};

PointFields eval_fields(const Fields& f, double s, double t) {
    PointFields p;
    p.u = 0.8 * std::tanh(f.a[0][0] * s + f.a[0][1] * t + f.c[0]);
    p.v = 0.8 * std::tanh(f.a[1][0] * s + f.a[1][1] * t + f.c[1]);
    p.depth = 0.5 + 0.5 * (std::cos(f.phi) * s + std::sin(f.phi) * t) / std::numbers::sqrt2;
    p.alpha = 0.25 + 0.15 * std::sin(f.scale_dir[0] * s + f.scale_dir[1] * t + f.scale_phase);
    return p;
}

std::vector<double> layer_profile(double depth, std::size_t nl, double sharpness) {
    std::vector<double> w(nl);
    const double centre = depth * static_cast<double>(nl - 1);
    double total = 0.0;
    for (std::size_t l = 0; l < nl; ++l) {
        const double d = centre - static_cast<double>(l);
        w[l] = std::exp(-sharpness * d * d);
        total += w[l];
    }
    for (double& x : w) x /= total;
    return w;
}

// Separable Gaussian blur with clamped borders, then standardization.
void blur_grid(std::vector<double>& g, std::size_t h, std::size_t w, double sigma) {
    if (sigma > 0) {
        const int radius = static_cast<int>(std::ceil(3 * sigma));
        std::vector<double> kernel(2 * radius + 1);
        double total = 0.0;
        for (int k = -radius; k <= radius; ++k) {
            kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
            total += kernel[k + radius];
        }
        for (double& k : kernel) k /= total;
        std::vector<double> tmp(g.size());
        const int hi = static_cast<int>(h), wi = static_cast<int>(w);
        for (int r = 0; r < hi; ++r) {
            for (int c = 0; c < wi; ++c) {
                double s = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    s += kernel[k + radius] * g[r * wi + std::clamp(c + k, 0, wi - 1)];
                }
                tmp[r * wi + c] = s;
            }
        }
        for (int r = 0; r < hi; ++r) {
            for (int c = 0; c < wi; ++c) {
                double s = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    s += kernel[k + radius] * tmp[std::clamp(r + k, 0, hi - 1) * wi + c];
                }
                g[r * wi + c] = s;
            }
        }
    }
    double mean = 0.0, var = 0.0;
    for (double x : g) mean += x;
    mean /= static_cast<double>(g.size());
    for (double x : g) var += (x - mean) * (x - mean);
    var /= static_cast<double>(g.size());
    const double inv = var > 0 ? 1.0 / std::sqrt(var) : 1.0;
    for (double& x : g) x = (x - mean) * inv;
}

// Straight-line bilinear lookup, align-corners, clamped.
double lookup(const std::vector<double>& plane, std::size_t h, std::size_t w, double u, double v) {
    const double x = std::clamp((u + 1.0) * 0.5 * static_cast<double>(w - 1), 0.0,
                                static_cast<double>(w - 1));
    const double y = std::clamp((v + 1.0) * 0.5 * static_cast<double>(h - 1), 0.0,
                                static_cast<double>(h - 1));
    const std::size_t x0 = static_cast<std::size_t>(std::floor(x));
    const std::size_t y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    return (1 - fy) * ((1 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1]) +
           fy * ((1 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
}

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.dim(0); ++r) {
        rows.push_back(std::vector<double>(m.data() + r * m.dim(1), m.data() + (r + 1) * m.dim(1)));
    }
    return rows;
}

Matrix matrix_from_json(const json& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows[0].size() : 0;
    Matrix m({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        if (rows[i].size() != c) throw FormatError("ragged matrix in ground truth");
        for (std::size_t j = 0; j < c; ++j) m(i, j) = rows[i][j].get<double>();
    }
    return m;
}

}  // namespace

Matrix planted_responses(const SyntheticGroundTruth& truth, const FeatureBank& bank) {
    const std::size_t n = truth.layer.dim(0), nl = truth.layer.dim(1);
    const std::size_t d = truth.readout_weight.dim(1);
    if (bank.layer_count() != nl || truth.align.size() != nl) {
        throw InvalidArgument("ground truth layer count does not match the bank");
    }
    Matrix out({bank.image_count(), n});
    for (std::size_t m = 0; m < bank.image_count(); ++m) {
        // mixed[i][k] accumulates v_i.
        std::vector<double> mixed(n * d, 0.0);
        for (std::size_t l = 0; l < nl; ++l) {
            const auto& spec = bank.layers()[l];
            const DenseArray local = bank.local(m, l);
            const DenseArray global = bank.global(m, l);
            const std::size_t h = local.dim(1), w = local.dim(2), p = h * w, c = spec.channels;
            const Matrix& b = truth.align[l];
            for (std::size_t k = 0; k < d; ++k) {
                std::vector<double> plane(p, 0.0);
                double g = 0.0;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    g += b(k, ch) * global[ch];
                    for (std::size_t q = 0; q < p; ++q) plane[q] += b(k, ch) * local[ch * p + q];
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double a = truth.scale(i, 0);
                    const double loc = lookup(plane, h, w, truth.space(i, 0), truth.space(i, 1));
                    mixed[i * d + k] += truth.layer(i, l) * ((1 - a) * loc + a * g);
                }
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += mixed[i * d + k] * truth.readout_weight(i, k);
            out(m, i) = s / static_cast<double>(d) + truth.readout_bias[i];
        }
    }
    return out;
}

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.voxels == 0 || cfg.layers == 0 || cfg.channels == 0 || cfg.height == 0 ||
        cfg.width == 0 || cfg.dim == 0 || cfg.images == 0) {
        throw InvalidArgument("synthetic sizes must all be ≥ 1");
    }
    if (!(cfg.noise >= 0.0)) throw InvalidArgument("synthetic noise must be ≥ 0");
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const std::size_t n = cfg.voxels, nl = cfg.layers, d = cfg.dim, c = cfg.channels;

    Fields f{};
    const double theta = std::numbers::pi * unit(rng);
    const double gain = 1.3 * cfg.smoothness;
    f.a[0][0] = gain * std::cos(theta);
    f.a[0][1] = -gain * std::sin(theta);
    f.a[1][0] = gain * std::sin(theta);
    f.a[1][1] = gain * std::cos(theta);
    f.c[0] = 0.2 * unit(rng);
    f.c[1] = 0.2 * unit(rng);
    f.phi = std::numbers::pi * unit(rng);
    f.scale_dir[0] = 1.5 * cfg.smoothness * unit(rng);
    f.scale_dir[1] = 1.5 * cfg.smoothness * unit(rng);
    f.scale_phase = std::numbers::pi * unit(rng);

    SyntheticDataset out;
    out.config = cfg;
    auto& truth = out.truth;
    auto& voxels = out.dataset.voxels;
    truth.noise = cfg.noise;
    truth.space = Matrix({n, 2});
    truth.layer = Matrix({n, nl});
    truth.scale = Matrix({n, 1});
    voxels.coords = DenseArray({n, 3});
    voxels.flat = DenseArray({n, 2});

    const double h = 1e-5;
    for (std::size_t i = 0; i < n; ++i) {
        const double s = unit(rng), t = unit(rng);
        voxels.coords(i, 0) = static_cast<float>(40.0 * s + 10.0);
        voxels.coords(i, 1) = static_cast<float>(30.0 * t - 5.0);
        voxels.coords(i, 2) = static_cast<float>(8.0 * std::sin(1.5 * s) + 4.0 * t * t);
        (*voxels.flat)(i, 0) = static_cast<float>(s);
        (*voxels.flat)(i, 1) = static_cast<float>(t);
        const PointFields p = eval_fields(f, s, t);
        truth.space(i, 0) = p.u;
        truth.space(i, 1) = p.v;
        truth.scale(i, 0) = p.alpha;
        const auto w = layer_profile(p.depth, nl, cfg.layer_sharpness);
        for (std::size_t l = 0; l < nl; ++l) truth.layer(i, l) = w[l];

        // Empirical Lipschitz constants from central differences on the sheet.
        const PointFields ps0 = eval_fields(f, s - h, t), ps1 = eval_fields(f, s + h, t);
        const PointFields pt0 = eval_fields(f, s, t - h), pt1 = eval_fields(f, s, t + h);
        auto grad_norm = [&](double ds, double dt) { return std::hypot(ds, dt) / (2 * h); };
        truth.lipschitz_space = std::max(
            {truth.lipschitz_space, grad_norm(ps1.u - ps0.u, pt1.u - pt0.u),
             grad_norm(ps1.v - ps0.v, pt1.v - pt0.v)});
        truth.lipschitz_scale =
            std::max(truth.lipschitz_scale, grad_norm(ps1.alpha - ps0.alpha, pt1.alpha - pt0.alpha));
        const auto ws0 = layer_profile(ps0.depth, nl, cfg.layer_sharpness);
        const auto ws1 = layer_profile(ps1.depth, nl, cfg.layer_sharpness);
        const auto wt0 = layer_profile(pt0.depth, nl, cfg.layer_sharpness);
        const auto wt1 = layer_profile(pt1.depth, nl, cfg.layer_sharpness);
        for (std::size_t l = 0; l < nl; ++l) {
            truth.lipschitz_layer =
                std::max(truth.lipschitz_layer, grad_norm(ws1[l] - ws0[l], wt1[l] - wt0[l]));
        }
        // Four ROI levels by planted depth.
        static const char* names[] = {"V1", "V2", "V4", "FFA"};
        const std::size_t level = std::min<std::size_t>(3, static_cast<std::size_t>(p.depth * 4));
        voxels.rois[names[level]].push_back(i);
    }

    for (std::size_t l = 0; l < nl; ++l) {
        Matrix b({d, c});
        for (double& x : b.values()) x = normal(rng) / std::sqrt(static_cast<double>(c));
        truth.align.push_back(std::move(b));
    }

    std::vector<std::string> ids;
    std::vector<DenseArray> locals, globals;
    const std::size_t p = cfg.height * cfg.width;
    for (std::size_t m = 0; m < cfg.images; ++m) {
        char id[32];
        std::snprintf(id, sizeof id, "img%05zu", m);
        ids.emplace_back(id);
        for (std::size_t l = 0; l < nl; ++l) {
            DenseArray local({c, cfg.height, cfg.width});
            std::vector<double> plane(p);
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (double& x : plane) x = normal(rng);
                blur_grid(plane, cfg.height, cfg.width, cfg.blur);
                for (std::size_t q = 0; q < p; ++q) local[ch * p + q] = static_cast<float>(plane[q]);
            }
            DenseArray global({c});
            for (float& x : global.values()) x = static_cast<float>(normal(rng));
            locals.push_back(std::move(local));
            globals.push_back(std::move(global));
        }
    }
    std::vector<LayerSpec> specs;
    for (std::size_t l = 0; l < nl; ++l) {
        specs.push_back({"layer" + std::to_string(l), c, cfg.height, cfg.width});
    }
    out.dataset.bank = FeatureBank(ids, specs, std::move(locals), std::move(globals));

    // Read-out weights scaled so every voxel's noise-free response has unit spread.
    truth.readout_weight = Matrix({n, d});
    for (double& x : truth.readout_weight.values()) x = normal(rng);
    truth.readout_bias.assign(n, 0.0);
    const Matrix raw = planted_responses(truth, out.dataset.bank);
    const std::size_t mcount = cfg.images;
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t m = 0; m < mcount; ++m) mean += raw(m, i);
        mean /= static_cast<double>(mcount);
        for (std::size_t m = 0; m < mcount; ++m) var += (raw(m, i) - mean) * (raw(m, i) - mean);
        var /= static_cast<double>(mcount);
        const double scale = var > 0 ? 1.0 / std::sqrt(var) : 1.0;
        for (std::size_t k = 0; k < d; ++k) truth.readout_weight(i, k) *= scale;
        truth.readout_bias[i] = 0.5 * normal(rng);
    }
    // Round the planted parameters to storage precision so a float model can carry them exactly.
    for (auto& b : truth.align) {
        for (double& x : b.values()) x = static_cast<float>(x);
    }
    for (double& x : truth.readout_weight.values()) x = static_cast<float>(x);
    for (double& x : truth.readout_bias) x = static_cast<float>(x);

    const Matrix clean = planted_responses(truth, out.dataset.bank);
    voxels.responses = DenseArray({mcount, n});
    for (std::size_t m = 0; m < mcount; ++m) {
        for (std::size_t i = 0; i < n; ++i) {
            voxels.responses(m, i) = static_cast<float>(clean(m, i) + cfg.noise * normal(rng));
        }
    }
    voxels.has_response.assign(mcount, true);

    std::vector<std::vector<std::string>> groups;
    for (const auto& id : ids) groups.push_back({id});
    if (groups.size() >= 3) out.dataset.splits = make_splits(groups, {8, 1, 1}, cfg.seed);
    if (cfg.sessions > 0) {
        for (std::size_t m = 0; m < mcount; ++m) {
            out.dataset.sessions[ids[m]] = "s" + std::to_string(m % cfg.sessions);
        }
    }
    return out;
}

PlantedModel planted_model(const SyntheticGroundTruth& truth, const std::vector<LayerSpec>& layers) {
    const std::size_t n = truth.layer.dim(0), d = truth.readout_weight.dim(1);
    EncoderConfig cfg;
    cfg.bottleneck_dim = d;
    cfg.hidden_width = 1;
    cfg.hidden_layers = 0;
    cfg.pe_frequencies = 1;
    for (const auto& s : layers) {
        cfg.grid_height = std::max(cfg.grid_height, s.height);
        cfg.grid_width = std::max(cfg.grid_width, s.width);
    }
    PlantedModel out;
    out.model = init_model(cfg, n, layers, 0);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& a = out.model.align[l];
        for (std::size_t k = 0; k < d; ++k) {
            a.bias[k] = 0.0f;
            for (std::size_t ch = 0; ch < layers[l].channels; ++ch) {
                a.weight(k, ch) = static_cast<float>(truth.align[l](k, ch));
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        out.model.readout_bias[i] = static_cast<float>(truth.readout_bias[i]);
        for (std::size_t k = 0; k < d; ++k) {
            out.model.readout_weight(i, k) = static_cast<float>(truth.readout_weight(i, k));
        }
    }
    out.selectors.space.push_back(truth.space);
    out.selectors.layer = truth.layer;
    out.selectors.scale = truth.scale;
    return out;
}

json truth_to_json(const SyntheticGroundTruth& t, const SyntheticConfig& c) {
    json align = json::array();
    for (const auto& b : t.align) align.push_back(matrix_json(b));
    return {{"config",
             {{"voxels", c.voxels},
              {"layers", c.layers},
              {"channels", c.channels},
              {"height", c.height},
              {"width", c.width},
              {"dim", c.dim},
              {"images", c.images},
              {"noise", c.noise},
              {"smoothness", c.smoothness},
              {"layer_sharpness", c.layer_sharpness},
              {"blur", c.blur},
              {"sessions", c.sessions},
              {"seed", c.seed}}},
            {"space", matrix_json(t.space)},
            {"layer", matrix_json(t.layer)},
            {"scale", matrix_json(t.scale)},
            {"align", align},
            {"readout_weight", matrix_json(t.readout_weight)},
            {"readout_bias", t.readout_bias},
            {"noise", t.noise},
            {"lipschitz", {{"space", t.lipschitz_space},
                           {"layer", t.lipschitz_layer},
                           {"scale", t.lipschitz_scale}}}};
}

SyntheticGroundTruth truth_from_json(const json& doc) {
    SyntheticGroundTruth t;
    try {
        t.space = matrix_from_json(doc.at("space"));
        t.layer = matrix_from_json(doc.at("layer"));
        t.scale = matrix_from_json(doc.at("scale"));
        for (const auto& b : doc.at("align")) t.align.push_back(matrix_from_json(b));
        t.readout_weight = matrix_from_json(doc.at("readout_weight"));
        t.readout_bias = doc.at("readout_bias").get<std::vector<double>>();
        t.noise = doc.at("noise").get<double>();
        const auto& lip = doc.at("lipschitz");
        t.lipschitz_space = lip.at("space").get<double>();
        t.lipschitz_layer = lip.at("layer").get<double>();
        t.lipschitz_scale = lip.at("scale").get<double>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("ground truth violates the schema: ") + e.what());
    }
    return t;
}

void write_synthetic(const SyntheticDataset& synth, const std::filesystem::path& dir) {
    write_dataset(synth.dataset, dir);
    std::ofstream out(dir / "ground_truth.json");
    if (!out) throw FormatError("cannot write " + (dir / "ground_truth.json").string());
    out << truth_to_json(synth.truth, synth.config).dump() << '\n';
}

SyntheticGroundTruth load_ground_truth(const std::filesystem::path& dataset_dir) {
    const auto file = dataset_dir / "ground_truth.json";
    std::ifstream in(file);
    if (!in) throw FormatError("cannot open " + file.string() + " (not a synthetic dataset?)");
    try {
        return truth_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw FormatError(file.string() + " is not valid JSON: " + e.what());
    }
}

}  // namespace factortopy
