// SPDX-License-Identifier: Apache-2.0
#include "factortopy/encoder.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>
#include <thread>

#include "factortopy/error.hpp"

namespace factortopy {

namespace {

std::atomic<std::size_t> g_workers{1};

inline void axpy(double* y, double a, const double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

inline void axpy(double* y, double a, const float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * static_cast<double>(x[i]);
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void softmax_rows(Matrix& m) { apply_activation(Activation::softmax, m); }

Matrix softmax_rows_backward(const Matrix& post, const Matrix& d_post) {
    return activation_backward(Activation::softmax, post, post, d_post);
}

AffineLayer random_affine(std::size_t out, std::size_t in, std::mt19937_64& rng) {
    AffineLayer layer{DenseArray({out, in}), DenseArray({out})};
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (float& w : layer.weight.values()) w = static_cast<float>(dist(rng));
    for (float& b : layer.bias.values()) b = static_cast<float>(dist(rng));
    return layer;
}

// Walks parameters and (optionally) their gradient buffers in one fixed order.
template <class Model, class Fn>
void walk(Model& m, EncoderGradients* g, Fn&& fn) {
    auto stack = [&](const std::string& prefix, auto& s, AffineStackGrads* sg) {
        for (std::size_t k = 0; k < s.layers().size(); ++k) {
            fn(prefix + "." + std::to_string(k) + ".weight", s.layers()[k].weight,
               sg ? &sg->weight[k] : nullptr);
            fn(prefix + "." + std::to_string(k) + ".bias", s.layers()[k].bias,
               sg ? &sg->bias[k] : nullptr);
        }
    };
    for (std::size_t l = 0; l < m.align.size(); ++l) {
        fn("align." + std::to_string(l) + ".weight", m.align[l].weight,
           g ? &g->align_weight[l] : nullptr);
        fn("align." + std::to_string(l) + ".bias", m.align[l].bias,
           g ? &g->align_bias[l] : nullptr);
    }
    for (std::size_t s = 0; s < m.space_heads.size(); ++s) {
        stack("space_head." + std::to_string(s), m.space_heads[s], g ? &g->space_heads[s] : nullptr);
    }
    if (!m.layer_head.layers().empty()) stack("layer_head", m.layer_head, g ? &g->layer_head : nullptr);
    if (!m.scale_head.layers().empty()) stack("scale_head", m.scale_head, g ? &g->scale_head : nullptr);
    if (!m.space_table.empty()) fn("space_table", m.space_table, g ? &g->space_table : nullptr);
    if (!m.layer_table.empty()) fn("layer_table", m.layer_table, g ? &g->layer_table : nullptr);
    if (!m.scale_table.empty()) fn("scale_table", m.scale_table, g ? &g->scale_table : nullptr);
    for (std::size_t l = 0; l < m.mask_logits.size(); ++l) {
        fn("mask." + std::to_string(l), m.mask_logits[l], g ? &g->mask_logits[l] : nullptr);
    }
    for (std::size_t l = 0; l < m.patch_proj.size(); ++l) {
        fn("patch." + std::to_string(l) + ".weight", m.patch_proj[l].weight,
           g ? &g->patch_weight[l] : nullptr);
        fn("patch." + std::to_string(l) + ".bias", m.patch_proj[l].bias,
           g ? &g->patch_bias[l] : nullptr);
    }
    fn("readout.weight", m.readout_weight, g ? &g->readout_weight : nullptr);
    fn("readout.bias", m.readout_bias, g ? &g->readout_bias : nullptr);
}

}  // namespace

void set_default_workers(std::size_t workers) { g_workers = std::max<std::size_t>(1, workers); }
std::size_t default_workers() { return g_workers; }

Variant variant_from_string(const std::string& name) {
    for (Variant v : all_variants()) {
        if (to_string(v) == name) return v;
    }
    throw InvalidArgument("unknown variant '" + name + "'");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::factortopy: return "factortopy";
        case Variant::class_token: return "class_token";
        case Variant::patch_token: return "patch_token";
        case Variant::gnet_vit: return "gnet_vit";
        case Variant::no_layer_sel: return "no_layer_sel";
        case Variant::no_space_sel: return "no_space_sel";
        case Variant::no_scale_sel: return "no_scale_sel";
        case Variant::no_topology: return "no_topology";
        case Variant::multi_sample: return "multi_sample";
    }
    return "factortopy";
}

std::vector<Variant> all_variants() {
    return {Variant::factortopy,   Variant::class_token,  Variant::patch_token,
            Variant::gnet_vit,     Variant::no_layer_sel, Variant::no_space_sel,
            Variant::no_scale_sel, Variant::no_topology,  Variant::multi_sample};
}

VariantTraits VariantTraits::of(Variant v, std::size_t multi_heads) {
    VariantTraits t;
    switch (v) {
        case Variant::factortopy: break;
        case Variant::class_token:
            t.feature = Feature::class_token;
            t.space = Space::none;
            t.space_heads = 0;
            t.layer_selector = t.scale_selector = false;
            break;
        case Variant::patch_token:
            t.feature = Feature::patch_token;
            t.space = Space::none;
            t.space_heads = 0;
            t.layer_selector = t.scale_selector = false;
            break;
        case Variant::gnet_vit:
            t.space = Space::mask;
            t.space_heads = 0;
            break;
        case Variant::no_layer_sel: t.layer_selector = false; break;
        case Variant::no_space_sel:
            t.space = Space::mean_pool;
            t.space_heads = 0;
            break;
        case Variant::no_scale_sel: t.scale_selector = false; break;
        case Variant::no_topology: t.topology = false; break;
        case Variant::multi_sample: t.space_heads = std::max<std::size_t>(1, multi_heads); break;
    }
    return t;
}

std::vector<ImageFeatures> extract_features(const FeatureBank& bank) {
    std::vector<ImageFeatures> out(bank.image_count());
    for (std::size_t i = 0; i < bank.image_count(); ++i) {
        out[i].id = bank.image_ids()[i];
        for (std::size_t l = 0; l < bank.layer_count(); ++l) {
            out[i].local.push_back(bank.local(i, l));
            out[i].global.push_back(bank.global(i, l));
        }
    }
    return out;
}

std::vector<NamedParameter> EncoderModel::parameters() {
    std::vector<NamedParameter> out;
    walk(*this, nullptr, [&](const std::string& name, DenseArray& p, Matrix*) {
        out.push_back({name, &p});
    });
    return out;
}

std::vector<ConstNamedParameter> EncoderModel::parameters() const {
    std::vector<ConstNamedParameter> out;
    walk(*this, nullptr, [&](const std::string& name, const DenseArray& p, Matrix*) {
        out.push_back({name, &p});
    });
    return out;
}

std::size_t EncoderModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.value->size();
    return n;
}

EncoderGradients EncoderModel::zero_gradients() const {
    EncoderGradients g;
    for (const auto& a : align) {
        g.align_weight.emplace_back(a.weight.shape());
        g.align_bias.emplace_back(a.bias.shape());
    }
    for (const auto& s : space_heads) g.space_heads.push_back(s.zero_grads());
    if (!layer_head.layers().empty()) g.layer_head = layer_head.zero_grads();
    if (!scale_head.layers().empty()) g.scale_head = scale_head.zero_grads();
    if (!space_table.empty()) g.space_table = Matrix(space_table.shape());
    if (!layer_table.empty()) g.layer_table = Matrix(layer_table.shape());
    if (!scale_table.empty()) g.scale_table = Matrix(scale_table.shape());
    for (const auto& m : mask_logits) g.mask_logits.emplace_back(m.shape());
    for (const auto& p : patch_proj) {
        g.patch_weight.emplace_back(p.weight.shape());
        g.patch_bias.emplace_back(p.bias.shape());
    }
    g.readout_weight = Matrix(readout_weight.shape());
    g.readout_bias = Matrix(readout_bias.shape());
    return g;
}

std::vector<Matrix*> EncoderModel::gradient_slots(EncoderGradients& grads) const {
    std::vector<Matrix*> out;
    walk(*this, &grads, [&](const std::string&, const DenseArray&, Matrix* g) { out.push_back(g); });
    return out;
}

EncoderModel init_model(const EncoderConfig& config, std::size_t voxel_count,
                        const std::vector<LayerSpec>& layers, std::uint64_t seed,
                        std::span<const double> mean_response) {
    if (config.bottleneck_dim == 0) throw InvalidArgument("bottleneck dimension must be ≥ 1");
    if (voxel_count == 0) throw InvalidArgument("model needs at least one voxel");
    if (layers.empty()) throw InvalidArgument("model needs at least one layer");
    if (!mean_response.empty() && mean_response.size() != voxel_count) {
        throw InvalidArgument("mean response length does not match voxel count");
    }
    EncoderModel m;
    m.config_ = config;
    m.traits_ = VariantTraits::of(config.variant, config.multi_sample_heads);
    m.voxels_ = voxel_count;
    m.layers_ = layers;
    for (auto& s : m.layers_) {
        s.height = std::min(s.height, config.grid_height);
        s.width = std::min(s.width, config.grid_width);
    }
    const std::size_t d = config.bottleneck_dim, n = voxel_count, nl = layers.size();
    const auto& t = m.traits_;
    std::mt19937_64 rng(seed);

    if (t.feature != VariantTraits::Feature::patch_token) {
        for (const auto& s : m.layers_) m.align.push_back(random_affine(d, s.channels, rng));
    } else {
        for (const auto& s : m.layers_) {
            m.patch_proj.push_back(random_affine(d, s.channels * s.height * s.width, rng));
        }
    }

    if (t.feature == VariantTraits::Feature::voxelwise) {
        std::vector<std::size_t> dims{3 * 2 * config.pe_frequencies};
        for (std::size_t h = 0; h < config.hidden_layers; ++h) dims.push_back(config.hidden_width);
        auto head = [&](std::size_t out, Activation act, bool zero_last) {
            auto dd = dims;
            dd.push_back(out);
            return AffineStack::random(dd, config.hidden_activation, act, rng, zero_last);
        };
        if (t.topology) {
            for (std::size_t s = 0; s < t.space_heads; ++s) {
                m.space_heads.push_back(head(2, Activation::tanh, false));
            }
            if (t.layer_selector) m.layer_head = head(nl, Activation::softmax, true);
            if (t.scale_selector) m.scale_head = head(1, Activation::sigmoid, true);
        } else {
            m.space_table = DenseArray({n, 2});
            std::uniform_real_distribution<double> dist(-0.1, 0.1);
            for (float& v : m.space_table.values()) v = static_cast<float>(dist(rng));
            if (t.layer_selector) m.layer_table = DenseArray({n, nl});
            if (t.scale_selector) m.scale_table = DenseArray({n, 1});
        }
        if (t.space == VariantTraits::Space::mask) {
            for (const auto& s : m.layers_) m.mask_logits.emplace_back(std::vector{n, s.height * s.width});
        }
    }
    m.readout_weight = DenseArray({n, d});
    m.readout_bias = DenseArray({n});
    for (std::size_t i = 0; i < mean_response.size(); ++i) {
        m.readout_bias[i] = static_cast<float>(mean_response[i]);
    }
    return m;
}

EncoderModel build_variant(EncoderConfig base, Variant variant, std::size_t voxel_count,
                           const std::vector<LayerSpec>& layers, std::uint64_t seed,
                           std::span<const double> mean_response) {
    base.variant = variant;
    return init_model(base, voxel_count, layers, seed, mean_response);
}

Matrix encode_coords(const EncoderModel& model, const Matrix& coords) {
    return sinusoidal_encode(coords, model.config().pe_frequencies);
}

SelectorTrace run_selectors_traced(const EncoderModel& model, const Matrix& encoded) {
    const auto& t = model.traits();
    const std::size_t n = model.voxel_count(), nl = model.layer_count();
    SelectorTrace tr;
    auto& out = tr.outputs;
    const bool needs_coords = t.feature == VariantTraits::Feature::voxelwise && t.topology;
    if (needs_coords && (encoded.rank() != 2 || encoded.dim(0) != n)) {
        throw InvalidArgument("encoded coordinates must have one row per voxel (" +
                              std::to_string(n) + "), got " + shape_string(encoded.shape()));
    }
    if (!model.space_heads.empty()) {
        tr.space_tapes.resize(model.space_heads.size());
        for (std::size_t s = 0; s < model.space_heads.size(); ++s) {
            out.space.push_back(model.space_heads[s].apply(encoded, &tr.space_tapes[s]));
        }
    } else if (!model.space_table.empty()) {
        Matrix sp = model.space_table.cast<double>();
        apply_activation(Activation::tanh, sp);
        out.space.push_back(std::move(sp));
    }
    if (!model.layer_head.layers().empty()) {
        out.layer = model.layer_head.apply(encoded, &tr.layer_tape);
    } else if (!model.layer_table.empty()) {
        out.layer = model.layer_table.cast<double>();
        softmax_rows(out.layer);
    } else {
        out.layer = Matrix({n, nl}, 1.0 / static_cast<double>(nl));
    }
    if (!model.scale_head.layers().empty()) {
        out.scale = model.scale_head.apply(encoded, &tr.scale_tape);
    } else if (!model.scale_table.empty()) {
        out.scale = model.scale_table.cast<double>();
        for (double& v : out.scale.values()) v = sigmoid(v);
    } else {
        out.scale = Matrix({n, 1}, 0.5);
    }
    for (const auto& logits : model.mask_logits) {
        Matrix mask = logits.cast<double>();
        softmax_rows(mask);
        out.masks.push_back(std::move(mask));
    }
    return tr;
}

SelectorOutputs run_selectors(const EncoderModel& model, const Matrix& coords) {
    const auto& t = model.traits();
    Matrix encoded;
    if (t.feature == VariantTraits::Feature::voxelwise && t.topology) {
        encoded = encode_coords(model, coords);
    }
    return run_selectors_traced(model, encoded).outputs;
}

namespace {

void check_features(const EncoderModel& model, const ImageFeatures& f) {
    if (f.local.size() != model.layer_count() || f.global.size() != model.layer_count()) {
        throw InvalidArgument("image '" + f.id + "' has " + std::to_string(f.local.size()) +
                              " layers, model expects " + std::to_string(model.layer_count()));
    }
    for (std::size_t l = 0; l < model.layer_count(); ++l) {
        const auto& s = model.layers()[l];
        if (f.local[l].shape() != std::vector<std::size_t>{s.channels, s.height, s.width} ||
            f.global[l].size() != s.channels) {
            throw InvalidArgument("image '" + f.id + "' layer " + std::to_string(l) +
                                  " has local shape " + shape_string(f.local[l].shape()) +
                                  "; model expects " +
                                  shape_string({s.channels, s.height, s.width}) +
                                  " (was the bank downsampled to the working grid?)");
        }
        if (!f.local[l].all_finite() || !f.global[l].all_finite()) {
            throw NumericError("non-finite feature in image '" + f.id + "' layer " +
                               std::to_string(l) + " (" + s.name + ")");
        }
    }
}

// Aligns one layer grid: out = W·V + b, D×P.
Matrix align_grid(const AffineLayer& a, const DenseArray& grid) {
    const std::size_t d = a.out_dim(), c = a.in_dim(), p = grid.dim(1) * grid.dim(2);
    Matrix out({d, p});
    for (std::size_t r = 0; r < d; ++r) {
        double* row = out.data() + r * p;
        std::fill(row, row + p, static_cast<double>(a.bias[r]));
        for (std::size_t ch = 0; ch < c; ++ch) {
            axpy(row, static_cast<double>(a.weight(r, ch)), grid.data() + ch * p, p);
        }
    }
    return out;
}

std::vector<double> align_vector(const AffineLayer& a, std::span<const float> x) {
    const std::size_t d = a.out_dim(), c = a.in_dim();
    std::vector<double> out(d);
    for (std::size_t r = 0; r < d; ++r) {
        double s = a.bias[r];
        for (std::size_t ch = 0; ch < c; ++ch) s += static_cast<double>(a.weight(r, ch)) * x[ch];
        out[r] = s;
    }
    return out;
}

// Samples a D×P aligned grid (h×w layout) at a stencil into `out` with weight `scale`.
void sample_into(const Matrix& aligned, std::size_t width, const BilinearStencil& s, double scale,
                 double* out, std::size_t d) {
    const std::size_t p = aligned.dim(1);
    const std::size_t i00 = s.y0 * width + s.x0, i01 = s.y0 * width + s.x1;
    const std::size_t i10 = s.y1 * width + s.x0, i11 = s.y1 * width + s.x1;
    const double w00 = s.w00() * scale, w01 = s.w01() * scale;
    const double w10 = s.w10() * scale, w11 = s.w11() * scale;
    for (std::size_t k = 0; k < d; ++k) {
        const double* g = aligned.data() + k * p;
        out[k] += w00 * g[i00] + w01 * g[i01] + w10 * g[i10] + w11 * g[i11];
    }
}

void image_forward(const EncoderModel& model, const SelectorOutputs& sel, const ImageFeatures& f,
                   ImageTrace& tr, double* prediction, std::size_t& saturated) {
    const auto& t = model.traits();
    const std::size_t n = model.voxel_count(), nl = model.layer_count(), d = model.dim();
    const double inv_d = 1.0 / static_cast<double>(d);

    if (t.feature == VariantTraits::Feature::patch_token ||
        t.feature == VariantTraits::Feature::class_token) {
        std::vector<double> shared(d, 0.0);
        tr.patch.clear();
        for (std::size_t l = 0; l < nl; ++l) {
            std::vector<double> pl = t.feature == VariantTraits::Feature::patch_token
                                         ? align_vector(model.patch_proj[l], f.local[l].span())
                                         : align_vector(model.align[l], f.global[l].span());
            for (std::size_t k = 0; k < d; ++k) shared[k] += pl[k] / static_cast<double>(nl);
            tr.patch.emplace_back(std::vector<std::size_t>{1, d}, std::move(pl));
        }
        tr.mixed = Matrix({1, d}, shared);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += shared[k] * model.readout_weight(i, k);
            prediction[i] = s * inv_d + model.readout_bias[i];
        }
        return;
    }

    tr.aligned.resize(nl);
    tr.aligned_global = Matrix({nl, d});
    for (std::size_t l = 0; l < nl; ++l) {
        tr.aligned[l] = align_grid(model.align[l], f.local[l]);
        const auto g = align_vector(model.align[l], f.global[l].span());
        std::copy(g.begin(), g.end(), tr.aligned_global.data() + l * d);
    }
    tr.local = Matrix({n, nl * d});
    switch (t.space) {
        case VariantTraits::Space::interpolate: {
            const double inv_heads = 1.0 / static_cast<double>(sel.space.size());
            for (std::size_t l = 0; l < nl; ++l) {
                const auto& s = model.layers()[l];
                for (const auto& head : sel.space) {
                    for (std::size_t i = 0; i < n; ++i) {
                        const auto st = bilinear_stencil(s.height, s.width, head(i, 0), head(i, 1));
                        if (st.clamped && l == 0) ++saturated;
                        sample_into(tr.aligned[l], s.width, st, inv_heads,
                                    tr.local.data() + i * nl * d + l * d, d);
                    }
                }
            }
            break;
        }
        case VariantTraits::Space::mean_pool: {
            for (std::size_t l = 0; l < nl; ++l) {
                const std::size_t p = tr.aligned[l].dim(1);
                std::vector<double> mean(d, 0.0);
                for (std::size_t k = 0; k < d; ++k) {
                    for (std::size_t q = 0; q < p; ++q) mean[k] += tr.aligned[l](k, q);
                    mean[k] /= static_cast<double>(p);
                }
                for (std::size_t i = 0; i < n; ++i) {
                    std::copy(mean.begin(), mean.end(), tr.local.data() + i * nl * d + l * d);
                }
            }
            break;
        }
        case VariantTraits::Space::mask: {
            for (std::size_t l = 0; l < nl; ++l) {
                const Matrix& a = tr.aligned[l];
                const std::size_t p = a.dim(1);
                for (std::size_t i = 0; i < n; ++i) {
                    double* out = tr.local.data() + i * nl * d + l * d;
                    const double* mask = sel.masks[l].data() + i * p;
                    for (std::size_t k = 0; k < d; ++k) {
                        const double* row = a.data() + k * p;
                        double s = 0.0;
                        for (std::size_t q = 0; q < p; ++q) s += mask[q] * row[q];
                        out[k] = s;
                    }
                }
            }
            break;
        }
        case VariantTraits::Space::none: break;
    }
    tr.mixed = Matrix({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const double alpha = sel.scale(i, 0);
        double* v = tr.mixed.data() + i * d;
        for (std::size_t l = 0; l < nl; ++l) {
            const double omega = sel.layer(i, l);
            const double* loc = tr.local.data() + i * nl * d + l * d;
            const double* glob = tr.aligned_global.data() + l * d;
            for (std::size_t k = 0; k < d; ++k) {
                v[k] += omega * ((1.0 - alpha) * loc[k] + alpha * glob[k]);
            }
        }
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += v[k] * model.readout_weight(i, k);
        prediction[i] = s * inv_d + model.readout_bias[i];
    }
}

void validate_selectors(const EncoderModel& model, const SelectorOutputs& sel) {
    const std::size_t n = model.voxel_count(), nl = model.layer_count();
    if (sel.layer.shape() != std::vector<std::size_t>{n, nl} ||
        sel.scale.shape() != std::vector<std::size_t>{n, 1}) {
        throw InvalidArgument("selector outputs do not match the model's voxel/layer counts");
    }
    const auto& t = model.traits();
    if (t.space == VariantTraits::Space::interpolate) {
        if (sel.space.empty()) throw InvalidArgument("space selector output missing");
        for (const auto& s : sel.space) {
            if (s.shape() != std::vector<std::size_t>{n, 2}) {
                throw InvalidArgument("space selector output must be N×2");
            }
        }
    }
    if (t.space == VariantTraits::Space::mask && sel.masks.size() != nl) {
        throw InvalidArgument("gnet masks missing");
    }
}

}  // namespace

ForwardTrace forward_with_selectors(const EncoderModel& model,
                                    std::span<const ImageFeatures* const> batch,
                                    SelectorOutputs selectors) {
    validate_selectors(model, selectors);
    ForwardTrace trace;
    trace.selectors.outputs = std::move(selectors);
    trace.inputs.assign(batch.begin(), batch.end());
    trace.images.resize(batch.size());
    trace.prediction = Matrix({batch.size(), model.voxel_count()});
    for (std::size_t b = 0; b < batch.size(); ++b) {
        check_features(model, *batch[b]);
        image_forward(model, trace.selectors.outputs, *batch[b], trace.images[b],
                      trace.prediction.data() + b * model.voxel_count(), trace.saturated);
    }
    return trace;
}

ForwardTrace forward(const EncoderModel& model, std::span<const ImageFeatures* const> batch,
                     const Matrix& encoded_coords) {
    SelectorTrace sel = run_selectors_traced(model, encoded_coords);
    ForwardTrace trace = forward_with_selectors(model, batch, sel.outputs);
    trace.selectors = std::move(sel);
    return trace;
}

EncoderGradients backward(const EncoderModel& model, const ForwardTrace& trace,
                          const Matrix& d_prediction, const Matrix* d_layer_extra) {
    const auto& t = model.traits();
    const std::size_t n = model.voxel_count(), nl = model.layer_count(), d = model.dim();
    const std::size_t batch = trace.images.size();
    if (d_prediction.shape() != std::vector<std::size_t>{batch, n}) {
        throw InvalidArgument("d_prediction must be B×N");
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    const auto& sel = trace.selectors.outputs;
    EncoderGradients g = model.zero_gradients();

    if (t.feature != VariantTraits::Feature::voxelwise) {
        for (std::size_t b = 0; b < batch; ++b) {
            const ImageTrace& tr = trace.images[b];
            const ImageFeatures& f = *trace.inputs[b];
            std::vector<double> dv(d, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = d_prediction(b, i);
                if (gi == 0.0) continue;
                g.readout_bias[i] += gi;
                for (std::size_t k = 0; k < d; ++k) {
                    g.readout_weight(i, k) += gi * tr.mixed[k] * inv_d;
                    dv[k] += gi * model.readout_weight(i, k) * inv_d;
                }
            }
            for (std::size_t l = 0; l < nl; ++l) {
                const bool patch = t.feature == VariantTraits::Feature::patch_token;
                const DenseArray& x = patch ? f.local[l] : f.global[l];
                Matrix& gw = patch ? g.patch_weight[l] : g.align_weight[l];
                Matrix& gb = patch ? g.patch_bias[l] : g.align_bias[l];
                const std::size_t in = x.size();
                for (std::size_t k = 0; k < d; ++k) {
                    const double dp = dv[k] / static_cast<double>(nl);
                    gb[k] += dp;
                    axpy(gw.data() + k * in, dp, x.data(), in);
                }
            }
        }
        return g;
    }

    Matrix d_layer({n, nl});
    Matrix d_scale({n, 1});
    std::vector<Matrix> d_space;
    for (std::size_t s = 0; s < sel.space.size(); ++s) d_space.emplace_back(std::vector{n, std::size_t{2}});
    std::vector<Matrix> d_mask;
    for (const auto& m : sel.masks) d_mask.emplace_back(m.shape());

    std::vector<double> dv(d), dloc(d);
    for (std::size_t b = 0; b < batch; ++b) {
        const ImageTrace& tr = trace.images[b];
        const ImageFeatures& f = *trace.inputs[b];
        std::vector<Matrix> d_aligned;
        for (const auto& a : tr.aligned) d_aligned.emplace_back(a.shape());
        Matrix d_global({nl, d});
        std::vector<std::vector<double>> d_pooled(nl, std::vector<double>(d, 0.0));

        for (std::size_t i = 0; i < n; ++i) {
            const double gi = d_prediction(b, i);
            if (gi == 0.0) continue;
            g.readout_bias[i] += gi;
            const double* v = tr.mixed.data() + i * d;
            for (std::size_t k = 0; k < d; ++k) {
                g.readout_weight(i, k) += gi * v[k] * inv_d;
                dv[k] = gi * model.readout_weight(i, k) * inv_d;
            }
            const double alpha = sel.scale(i, 0);
            for (std::size_t l = 0; l < nl; ++l) {
                const double omega = sel.layer(i, l);
                const double* loc = tr.local.data() + i * nl * d + l * d;
                const double* glob = tr.aligned_global.data() + l * d;
                double dom = 0.0, dal = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    dom += dv[k] * ((1.0 - alpha) * loc[k] + alpha * glob[k]);
                    dal += dv[k] * (glob[k] - loc[k]);
                    d_global(l, k) += dv[k] * omega * alpha;
                    dloc[k] = dv[k] * omega * (1.0 - alpha);
                }
                d_layer(i, l) += dom;
                d_scale(i, 0) += omega * dal;

                const auto& spec = model.layers()[l];
                const Matrix& a = tr.aligned[l];
                const std::size_t p = a.dim(1);
                switch (t.space) {
                    case VariantTraits::Space::interpolate: {
                        const double inv_heads = 1.0 / static_cast<double>(sel.space.size());
                        for (std::size_t s = 0; s < sel.space.size(); ++s) {
                            const auto st = bilinear_stencil(spec.height, spec.width,
                                                             sel.space[s](i, 0), sel.space[s](i, 1));
                            const std::size_t w = spec.width;
                            const std::size_t i00 = st.y0 * w + st.x0, i01 = st.y0 * w + st.x1;
                            const std::size_t i10 = st.y1 * w + st.x0, i11 = st.y1 * w + st.x1;
                            double du = 0.0, dvv = 0.0;
                            for (std::size_t k = 0; k < d; ++k) {
                                const double gk = dloc[k] * inv_heads;
                                double* da = d_aligned[l].data() + k * p;
                                da[i00] += gk * st.w00();
                                da[i01] += gk * st.w01();
                                da[i10] += gk * st.w10();
                                da[i11] += gk * st.w11();
                                const double* ak = a.data() + k * p;
                                du += gk * ((ak[i01] - ak[i00]) * (1 - st.fy) +
                                            (ak[i11] - ak[i10]) * st.fy) * st.dx_du;
                                dvv += gk * ((ak[i10] - ak[i00]) * (1 - st.fx) +
                                             (ak[i11] - ak[i01]) * st.fx) * st.dy_dv;
                            }
                            d_space[s](i, 0) += du;
                            d_space[s](i, 1) += dvv;
                        }
                        break;
                    }
                    case VariantTraits::Space::mean_pool:
                        for (std::size_t k = 0; k < d; ++k) d_pooled[l][k] += dloc[k];
                        break;
                    case VariantTraits::Space::mask: {
                        const double* mask = sel.masks[l].data() + i * p;
                        double* dm = d_mask[l].data() + i * p;
                        for (std::size_t k = 0; k < d; ++k) {
                            double* da = d_aligned[l].data() + k * p;
                            const double* ak = a.data() + k * p;
                            for (std::size_t q = 0; q < p; ++q) {
                                da[q] += dloc[k] * mask[q];
                                dm[q] += dloc[k] * ak[q];
                            }
                        }
                        break;
                    }
                    case VariantTraits::Space::none: break;
                }
            }
        }
        // Channel-align gradients for this image.
        for (std::size_t l = 0; l < nl; ++l) {
            Matrix& da = d_aligned[l];
            const std::size_t p = da.dim(1);
            if (t.space == VariantTraits::Space::mean_pool) {
                for (std::size_t k = 0; k < d; ++k) {
                    const double share = d_pooled[l][k] / static_cast<double>(p);
                    for (std::size_t q = 0; q < p; ++q) da(k, q) += share;
                }
            }
            const DenseArray& grid = f.local[l];
            const DenseArray& glob = f.global[l];
            const std::size_t c = grid.dim(0);
            Matrix& gw = g.align_weight[l];
            Matrix& gb = g.align_bias[l];
            for (std::size_t k = 0; k < d; ++k) {
                const double* dr = da.data() + k * p;
                double bias = d_global(l, k);
                for (std::size_t q = 0; q < p; ++q) bias += dr[q];
                gb[k] += bias;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float* x = grid.data() + ch * p;
                    double s = d_global(l, k) * glob[ch];
                    for (std::size_t q = 0; q < p; ++q) s += dr[q] * x[q];
                    gw(k, ch) += s;
                }
            }
        }
    }

    if (d_layer_extra) {
        if (d_layer_extra->shape() != d_layer.shape()) {
            throw InvalidArgument("extra layer-weight gradient must be N×L");
        }
        for (std::size_t i = 0; i < d_layer.size(); ++i) d_layer[i] += (*d_layer_extra)[i];
    }

    // Selector reverse passes.
    const auto& st = trace.selectors;
    if (!model.space_heads.empty()) {
        for (std::size_t s = 0; s < model.space_heads.size(); ++s) {
            model.space_heads[s].backward(st.space_tapes[s], d_space[s], g.space_heads[s]);
        }
    } else if (!model.space_table.empty()) {
        const Matrix& u = sel.space[0];
        for (std::size_t i = 0; i < u.size(); ++i) {
            g.space_table[i] += d_space[0][i] * (1.0 - u[i] * u[i]);
        }
    }
    if (!model.layer_head.layers().empty()) {
        model.layer_head.backward(st.layer_tape, d_layer, g.layer_head);
    } else if (!model.layer_table.empty()) {
        const Matrix dz = softmax_rows_backward(sel.layer, d_layer);
        for (std::size_t i = 0; i < dz.size(); ++i) g.layer_table[i] += dz[i];
    }
    if (!model.scale_head.layers().empty()) {
        model.scale_head.backward(st.scale_tape, d_scale, g.scale_head);
    } else if (!model.scale_table.empty()) {
        for (std::size_t i = 0; i < n; ++i) {
            const double a = sel.scale(i, 0);
            g.scale_table[i] += d_scale[i] * a * (1.0 - a);
        }
    }
    for (std::size_t l = 0; l < d_mask.size(); ++l) {
        const Matrix dz = softmax_rows_backward(sel.masks[l], d_mask[l]);
        for (std::size_t i = 0; i < dz.size(); ++i) g.mask_logits[l][i] += dz[i];
    }
    return g;
}

Matrix predict(const EncoderModel& model, std::span<const ImageFeatures* const> images,
               const Matrix& encoded_coords, std::size_t workers) {
    const SelectorOutputs sel = run_selectors_traced(model, encoded_coords).outputs;
    const std::size_t n = model.voxel_count();
    Matrix out({images.size(), n});
    for (const auto* f : images) check_features(model, *f);
    auto run = [&](std::size_t begin, std::size_t end) {
        ImageTrace tr;
        std::size_t saturated = 0;
        for (std::size_t b = begin; b < end; ++b) {
            image_forward(model, sel, *images[b], tr, out.data() + b * n, saturated);
        }
    };
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, images.size()));
    if (workers == 1) {
        run(0, images.size());
        return out;
    }
    // Each worker writes disjoint rows, so the result does not depend on scheduling.
    std::vector<std::thread> pool;
    const std::size_t chunk = (images.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk, end = std::min(images.size(), begin + chunk);
        if (begin < end) pool.emplace_back(run, begin, end);
    }
    for (auto& th : pool) th.join();
    return out;
}

}  // namespace factortopy
