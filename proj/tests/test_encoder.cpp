// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "factortopy/encoder.hpp"
#include "factortopy/training.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace factortopy;
using fixture::make_tiny;
using fixture::TinySpec;

namespace {

Matrix predict_all(const fixture::Tiny& t) {
    return forward(t.model, t.batch, encode_coords(t.model, t.coords)).prediction;
}

double max_abs(const Matrix& m) {
    double r = 0;
    for (double v : m.values()) r = std::max(r, std::abs(v));
    return r;
}

}  // namespace

TEST_CASE("forward matches the naive per-voxel evaluation") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        TinySpec s;
        s.voxels = 4;
        s.layers = 3;
        s.dim = 5;
        s.height = s.width = 4;
        s.seed = seed;
        const auto t = make_tiny(s);
        const Matrix pred = predict_all(t);
        for (std::size_t b = 0; b < t.images.size(); ++b) {
            const auto ref = oracle::forward(t.model, t.images[b], t.coords);
            for (std::size_t i = 0; i < ref.size(); ++i) {
                CHECK(std::abs(pred(b, i) - ref[i]) <= 1e-6 * std::max(1.0, std::abs(ref[i])));
            }
        }
    }
}

TEST_CASE("fresh model starts at the response mean") {
    TinySpec s;
    s.randomize = false;
    s.batch = 4;
    auto t = make_tiny(s);
    std::vector<double> mean(s.voxels, 0.0);
    for (std::size_t b = 0; b < s.batch; ++b)
        for (std::size_t i = 0; i < s.voxels; ++i) mean[i] += t.targets(b, i) / double(s.batch);
    t.model = init_model(t.model.config(), s.voxels, t.model.layers(), 3, mean);

    const auto sel = run_selectors(t.model, t.coords);
    for (double v : sel.layer.values()) CHECK(v == doctest::Approx(1.0 / s.layers).epsilon(1e-12));
    for (double v : sel.scale.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));

    const Matrix pred = predict_all(t);
    for (std::size_t b = 0; b < s.batch; ++b)
        for (std::size_t i = 0; i < s.voxels; ++i) CHECK(pred(b, i) == doctest::Approx(mean[i]));

    TrainConfig tc;
    const auto loss = batch_loss(t.model, t.batch, t.targets, encode_coords(t.model, t.coords), 0, tc, false);
    double ref = 0;
    for (std::size_t b = 0; b < s.batch; ++b) {
        for (std::size_t i = 0; i < s.voxels; ++i) {
            const double d = std::abs(t.targets(b, i) - mean[i]);
            ref += d < 0.1 ? 0.5 * d * d / 0.1 : d - 0.05;
        }
    }
    CHECK(loss.smooth_l1 == doctest::Approx(ref / double(s.batch * s.voxels)).epsilon(1e-9));
}

TEST_CASE("selectors are functions of coordinates") {
    TinySpec s;
    s.voxels = 5;
    auto t = make_tiny(s);
    for (std::size_t a = 0; a < 3; ++a) t.coords(3, a) = t.coords(1, a);
    const auto sel = run_selectors(t.model, t.coords);
    for (std::size_t l = 0; l < s.layers; ++l) CHECK(sel.layer(3, l) == sel.layer(1, l));
    CHECK(sel.space[0](3, 0) == sel.space[0](1, 0));
    CHECK(sel.scale(3, 0) == sel.scale(1, 0));

    for (std::size_t i = 0; i < s.voxels; ++i) {
        double row = 0;
        for (std::size_t l = 0; l < s.layers; ++l) {
            CHECK(sel.layer(i, l) >= 0.0);
            row += sel.layer(i, l);
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::abs(sel.space[0](i, 0)) <= 1.0);
        CHECK(std::abs(sel.space[0](i, 1)) <= 1.0);
        CHECK((sel.scale(i, 0) >= 0.0 && sel.scale(i, 0) <= 1.0));
    }

    // Empirical Lipschitz probe.
    const double delta = 1e-3;
    double k = 0;
    for (std::size_t a = 0; a < 3; ++a) {
        Matrix moved = t.coords;
        moved(0, a) += delta;
        const auto other = run_selectors(t.model, moved);
        auto worst = [&](const Matrix& x, const Matrix& y) {
            double r = 0;
            for (std::size_t q = 0; q < x.size(); ++q) r = std::max(r, std::abs(x[q] - y[q]));
            return r;
        };
        k = std::max({k, worst(sel.layer, other.layer) / delta, worst(sel.scale, other.scale) / delta,
                      worst(sel.space[0], other.space[0]) / delta});
    }
    CHECK(std::isfinite(k));
    CHECK(k > 0.0);
}

TEST_CASE("no_topology selectors are per-voxel tables") {
    TinySpec s;
    s.variant = Variant::no_topology;
    const auto t = make_tiny(s);
    const auto a = run_selectors(t.model, t.coords);
    Matrix moved = t.coords;
    for (std::size_t i = 1; i < s.voxels; ++i) moved(i, 0) = -moved(i, 0);
    const auto b = run_selectors(t.model, moved);
    for (std::size_t l = 0; l < s.layers; ++l) CHECK(a.layer(0, l) == b.layer(0, l));
    CHECK(a.space[0](0, 1) == b.space[0](0, 1));
    CHECK(a.scale(0, 0) == b.scale(0, 0));
}

TEST_CASE("scale and layer selection invariances") {
    const auto t = make_tiny(TinySpec{});
    auto sel = run_selectors(t.model, t.coords);

    SUBCASE("global-only path ignores local token order") {
        sel.scale.fill(1.0);
        const Matrix before = forward_with_selectors(t.model, t.batch, sel).prediction;
        auto shuffled = t.images;
        std::mt19937_64 rng(1);
        for (auto& f : shuffled)
            for (auto& loc : f.local) std::shuffle(loc.values().begin(), loc.values().end(), rng);
        std::vector<const ImageFeatures*> ptrs;
        for (const auto& f : shuffled) ptrs.push_back(&f);
        const Matrix after = forward_with_selectors(t.model, ptrs, sel).prediction;
        for (std::size_t q = 0; q < before.size(); ++q) CHECK(after[q] == doctest::Approx(before[q]).epsilon(1e-12));
    }
    SUBCASE("one-hot layer weights ignore other layers") {
        sel.layer.fill(0.0);
        for (std::size_t i = 0; i < t.model.voxel_count(); ++i) sel.layer(i, 1) = 1.0;
        const Matrix before = forward_with_selectors(t.model, t.batch, sel).prediction;
        auto changed = t.images;
        for (auto& f : changed) {
            for (auto& v : f.local[0].values()) v = v * 3 + 1;
            for (auto& v : f.global[2].values()) v = -v;
        }
        std::vector<const ImageFeatures*> ptrs;
        for (const auto& f : changed) ptrs.push_back(&f);
        const Matrix after = forward_with_selectors(t.model, ptrs, sel).prediction;
        for (std::size_t q = 0; q < before.size(); ++q) CHECK(after[q] == doctest::Approx(before[q]).epsilon(1e-12));
    }
}

TEST_CASE("non-finite features are rejected with the image and layer") {
    auto t = make_tiny(TinySpec{});
    t.images[1].local[2][3] = std::nanf("");
    try {
        predict_all(t);
        FAIL("accepted a NaN feature");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("img1") != std::string::npos);
        CHECK(msg.find("layer 2 (layer2)") != std::string::npos);
    }
}

TEST_CASE("baseline variants") {
    SUBCASE("class_token shares one feature across voxels") {
        TinySpec s;
        s.variant = Variant::class_token;
        auto t = make_tiny(s);
        for (std::size_t i = 1; i < s.voxels; ++i) {
            for (std::size_t k = 0; k < s.dim; ++k) t.model.readout_weight(i, k) = t.model.readout_weight(0, k);
            t.model.readout_bias[i] = t.model.readout_bias[0];
        }
        const Matrix p = predict_all(t);
        for (std::size_t b = 0; b < s.batch; ++b)
            for (std::size_t i = 1; i < s.voxels; ++i) CHECK(p(b, i) == p(b, 0));
    }
    SUBCASE("patch_token shares one feature across voxels") {
        TinySpec s;
        s.variant = Variant::patch_token;
        auto t = make_tiny(s);
        for (std::size_t i = 1; i < s.voxels; ++i) {
            for (std::size_t k = 0; k < s.dim; ++k) t.model.readout_weight(i, k) = t.model.readout_weight(0, k);
            t.model.readout_bias[i] = t.model.readout_bias[0];
        }
        const Matrix p = predict_all(t);
        for (std::size_t b = 0; b < s.batch; ++b)
            for (std::size_t i = 1; i < s.voxels; ++i) CHECK(p(b, i) == p(b, 0));
    }
    SUBCASE("gnet_vit masks are normalized") {
        TinySpec s;
        s.variant = Variant::gnet_vit;
        const auto t = make_tiny(s);
        const auto sel = run_selectors(t.model, t.coords);
        REQUIRE(sel.masks.size() == s.layers);
        for (const auto& m : sel.masks) {
            for (std::size_t i = 0; i < s.voxels; ++i) {
                double row = 0;
                for (std::size_t q = 0; q < m.dim(1); ++q) {
                    CHECK(m(i, q) >= 0.0);
                    row += m(i, q);
                }
                CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
            }
        }
    }
    SUBCASE("multi_sample with equal heads equals one sample") {
        TinySpec s;
        s.variant = Variant::multi_sample;
        auto t = make_tiny(s);
        REQUIRE(t.model.space_heads.size() == 3);
        t.model.space_heads[1] = t.model.space_heads[0];
        t.model.space_heads[2] = t.model.space_heads[0];
        const Matrix three = predict_all(t);
        auto sel = run_selectors(t.model, t.coords);
        sel.space.resize(1);
        const Matrix one = forward_with_selectors(t.model, t.batch, sel).prediction;
        for (std::size_t q = 0; q < one.size(); ++q) CHECK(three[q] == doctest::Approx(one[q]).epsilon(1e-12));
    }
    SUBCASE("ablations fix their selector") {
        TinySpec s;
        s.variant = Variant::no_layer_sel;
        auto sel = run_selectors(make_tiny(s).model, make_tiny(s).coords);
        for (double v : sel.layer.values()) CHECK(v == doctest::Approx(1.0 / s.layers));
        s.variant = Variant::no_scale_sel;
        sel = run_selectors(make_tiny(s).model, make_tiny(s).coords);
        for (double v : sel.scale.values()) CHECK(v == 0.5);
    }
    CHECK_THROWS_AS(variant_from_string("resnet"), InvalidArgument);
    for (Variant v : all_variants()) CHECK(variant_from_string(to_string(v)) == v);
}

TEST_CASE("backward: null and annihilated paths") {
    const auto t = make_tiny(TinySpec{});
    const Matrix enc = encode_coords(t.model, t.coords);
    const auto tr = forward(t.model, t.batch, enc);
    Matrix zero(tr.prediction.shape());
    const auto g0 = backward(t.model, tr, zero);
    auto slots_zero = [&](EncoderGradients& g) {
        double m = 0;
        for (Matrix* s : t.model.gradient_slots(g)) m = std::max(m, max_abs(*s));
        return m;
    };
    auto g0c = g0;
    CHECK(slots_zero(g0c) == 0.0);

    auto w0 = t;
    w0.model.readout_weight.fill(0.0f);
    const auto tr0 = forward(w0.model, w0.batch, enc);
    Matrix ones(tr0.prediction.shape(), 1.0);
    auto g = backward(w0.model, tr0, ones);
    for (const auto& m : g.space_heads) {
        for (const auto& w : m.weight) CHECK(max_abs(w) == 0.0);
    }
    for (const auto& w : g.layer_head.weight) CHECK(max_abs(w) == 0.0);
    for (const auto& w : g.scale_head.weight) CHECK(max_abs(w) == 0.0);
    for (const auto& w : g.align_weight) CHECK(max_abs(w) == 0.0);
    CHECK(max_abs(g.readout_bias) > 0.0);
}

TEST_CASE("gradients match finite differences for every variant") {
    for (Variant v : all_variants()) {
        CAPTURE(to_string(v));
        TinySpec s;
        s.variant = v;
        s.seed = 5;
        const auto t = make_tiny(s);
        TrainConfig tc;
        const auto rep = grad_check(t.model, t.batch, t.targets, encode_coords(t.model, t.coords), tc, 100,
                                    1e-3, 40);
        for (const auto& g : rep.groups) {
            CAPTURE(g.name);
            CHECK(g.rel_error < 1e-4);
        }
        CHECK(rep.passed);
    }
}

TEST_CASE("gradient check at the default selector width, sampled") {
    TinySpec s;
    s.hidden_width = 128;
    s.pe = 10;
    const auto t = make_tiny(s);
    TrainConfig tc;
    const auto rep = grad_check(t.model, t.batch, t.targets, encode_coords(t.model, t.coords), tc, 0, 1e-3, 60);
    CHECK(rep.passed);
}

TEST_CASE("gradient check flags a corrupted backward") {
    const auto t = make_tiny(TinySpec{});
    TrainConfig tc;
    const auto rep = grad_check(t.model, t.batch, t.targets, encode_coords(t.model, t.coords), tc, 0, 1e-3, 0,
                                1e-4, [](EncoderGradients& g) {
                                    for (auto& v : g.readout_weight.values()) v *= 1.1;
                                });
    CHECK_FALSE(rep.passed);
    bool flagged = false;
    for (const auto& g : rep.groups) {
        if (g.name == "readout.weight") {
            flagged = true;
            CHECK(g.rel_error > 1e-2);
            CHECK_FALSE(g.passed);
        }
    }
    CHECK(flagged);
}

TEST_CASE("gradient check at zero loss uses the absolute floor") {
    TinySpec s;
    auto t = make_tiny(s);
    t.model.readout_weight.fill(0.0f);
    t.model.readout_bias.fill(0.25f);
    t.targets.fill(0.25);
    TrainConfig tc;
    tc.reg_lambda = 0.0;
    const auto rep = grad_check(t.model, t.batch, t.targets, encode_coords(t.model, t.coords), tc);
    CHECK(rep.passed);
    for (const auto& g : rep.groups) CHECK(g.scale < 1e-8);
}

TEST_CASE("parallel prediction is identical to serial") {
    TinySpec s;
    s.batch = 7;
    const auto t = make_tiny(s);
    const Matrix enc = encode_coords(t.model, t.coords);
    const Matrix a = predict(t.model, t.batch, enc, 1);
    const Matrix b = predict(t.model, t.batch, enc, 3);
    CHECK(a == b);
    CHECK(a == predict_all(t));
}
