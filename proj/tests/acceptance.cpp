// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, also written to
// acceptance_report.txt in the working directory. Pass criterion names as
// arguments to run a subset.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "factortopy/analysis.hpp"
#include "factortopy/checkpoint.hpp"
#include "factortopy/clustering.hpp"
#include "factortopy/metrics.hpp"
#include "factortopy/synthetic.hpp"
#include "factortopy/training.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace factortopy;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string num(double v, int precision = 4) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct RunScore {
    double test_r2 = 0.0;
    double confidence = 0.0;
};

RunScore train_and_score(const SyntheticDataset& synth, EncoderConfig ec, TrainConfig tc,
                         std::size_t max_train, std::uint64_t seed) {
    const TrainData data = prepare_train_data(synth.dataset, ec, max_train, seed);
    tc.seed = seed + 1;
    EncoderModel model = init_model(ec, synth.config.voxels, data.layers, seed + 1, data.train_mean());
    const TrainResult res = train(std::move(model), data, tc);
    RunScore out;
    out.test_r2 = evaluate_split(res.model, data.test, data.coords);
    out.confidence = nan_mean(confidence(run_selectors(res.model, data.coords).layer));
    return out;
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
    const auto t0 = std::chrono::steady_clock::now();
    fixture::TinySpec spec;
    spec.voxels = 6;
    spec.layers = 3;
    spec.dim = 8;
    spec.height = spec.width = 4;
    spec.batch = 2;
    spec.hidden_width = 32;
    spec.seed = 12;
    const auto t = fixture::make_tiny(spec);
    TrainConfig tc;
    const auto rep = grad_check(t.model, t.batch, t.targets, encode_coords(t.model, t.coords), tc, 0, 1e-3, 0, 1e-4);
    const double secs = seconds_since(t0);
    double worst = 0.0;
    std::string worst_name;
    std::size_t entries = 0;
    for (const auto& g : rep.groups) {
        entries += g.entries;
        if (g.rel_error >= worst) {
            worst = g.rel_error;
            worst_name = g.name;
        }
    }
    return {rep.passed && secs < 10.0,
            std::to_string(rep.groups.size()) + " groups, " + std::to_string(entries) +
                " entries, worst rel " + num(worst, 3) + " (" + worst_name + "), " + num(secs, 3) + " s"};
}

Outcome forward_oracle() {
    double worst = 0.0;
    std::size_t values = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        fixture::TinySpec spec;
        spec.seed = 1000 + seed;
        spec.voxels = 4 + seed % 5;
        spec.layers = 1 + seed % 4;
        spec.batch = 2;
        const auto t = fixture::make_tiny(spec);
        const Matrix pred = predict(t.model, t.batch, encode_coords(t.model, t.coords));
        for (std::size_t b = 0; b < t.images.size(); ++b) {
            const auto ref = oracle::forward(t.model, t.images[b], t.coords);
            for (std::size_t i = 0; i < ref.size(); ++i) {
                worst = std::max(worst, std::abs(pred(b, i) - ref[i]) / std::max(std::abs(ref[i]), 1e-300));
                ++values;
            }
        }
    }
    return {worst < 1e-6, "100 instances, " + std::to_string(values) + " predictions, max rel error " + num(worst, 3)};
}

Outcome recovery() {
    const auto t0 = std::chrono::steady_clock::now();
    SyntheticConfig sc;  // 256 voxels, 6 layers, 8×8 grid, D=16, σ=0.05
    sc.images = 2500;
    sc.seed = 1;
    const auto synth = generate_synthetic(sc);
    EncoderConfig ec;
    ec.bottleneck_dim = 16;
    ec.hidden_width = 128;
    ec.pe_frequencies = 10;
    ec.grid_height = ec.grid_width = 8;
    const TrainData data = prepare_train_data(synth.dataset, ec);
    TrainConfig tc;
    tc.steps_per_epoch = 100;
    tc.max_epochs = 60;
    tc.seed = 1;
    EncoderModel model = init_model(ec, sc.voxels, data.layers, 1, data.train_mean());
    const TrainResult res = train(std::move(model), data, tc);
    const double test = evaluate_split(res.model, data.test, data.coords);
    const auto sel = run_selectors(res.model, data.coords);

    const std::size_t n = sc.voxels, nl = sc.layers;
    std::size_t agree = 0;
    double cells = 0.0;
    const double half_w = (static_cast<double>(sc.width) - 1) / 2, half_h = (static_cast<double>(sc.height) - 1) / 2;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t a = 0, b = 0;
        for (std::size_t l = 1; l < nl; ++l) {
            if (sel.layer(i, l) > sel.layer(i, a)) a = l;
            if (synth.truth.layer(i, l) > synth.truth.layer(i, b)) b = l;
        }
        agree += a == b;
        cells += std::hypot((sel.space[0](i, 0) - synth.truth.space(i, 0)) * half_w,
                            (sel.space[0](i, 1) - synth.truth.space(i, 1)) * half_h);
    }
    const double argmax = static_cast<double>(agree) / n, space = cells / n;
    const double secs = seconds_since(t0);
    return {argmax >= 0.9 && space < 1.0 && test > 0.85 && secs < 900,
            "argmax " + num(argmax) + ", space error " + num(space) + " cells, test R2 " + num(test) + ", " +
                num(secs, 4) + " s (" + std::to_string(data.train.images.size()) + " train images)"};
}

Outcome confidence_metric() {
    Matrix w({2, 5}, 0.0);
    w(0, 3) = 1.0;
    for (std::size_t l = 0; l < 5; ++l) w(1, l) = 0.2;
    const auto s = confidence(w);

    std::mt19937_64 rng(9);
    std::gamma_distribution<double> g(0.3, 1.0);
    Matrix many({100000, 6});
    for (std::size_t i = 0; i < many.dim(0); ++i) {
        double sum = 0;
        for (std::size_t l = 0; l < 6; ++l) sum += (many(i, l) = g(rng) + 1e-300);
        for (std::size_t l = 0; l < 6; ++l) many(i, l) /= sum;
    }
    double lo = 1, hi = 0;
    for (double v : confidence(many)) lo = std::min(lo, v), hi = std::max(hi, v);
    const double two = confidence(Matrix({1, 2}, std::vector<double>{0.75, 0.25}))[0];
    const bool pass = s[0] == 1.0 && s[1] == 0.0 && lo >= 0.0 && hi <= 1.0 && std::abs(two - 0.1887) <= 1e-4;
    return {pass, "one-hot " + num(s[0]) + ", uniform " + num(s[1]) + ", range [" + num(lo) + ", " + num(hi) +
                      "] over 1e5 rows, (0.75, 0.25) -> " + num(two, 6)};
}

Outcome hierarchy() {
    const auto levels = default_roi_levels();
    const std::map<std::string, std::vector<std::size_t>> rois{
        {"V1", {0, 1, 2}}, {"V2", {3, 4, 5}}, {"V4", {6, 7}}, {"FFA", {8, 9, 10, 11}}};
    const std::size_t n = 12, nl = 4;

    double oracle_gap = 0.0;
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix w({n, nl});
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0;
            for (std::size_t l = 0; l < nl; ++l) sum += (w(i, l) = u(rng));
            for (std::size_t l = 0; l < nl; ++l) w(i, l) /= sum;
        }
        const auto f = hierarchy_slope(w, rois, levels);
        std::vector<double> x, y;
        for (const auto& [name, idx] : rois) {
            for (auto i : idx) {
                double d = 0;
                for (std::size_t l = 0; l < nl; ++l) d += double(l) / double(nl - 1) * w(i, l);
                x.push_back(levels.at(name));
                y.push_back(d);
            }
        }
        const auto [slope, icept] = oracle::normal_equations(x, y);
        oracle_gap = std::max({oracle_gap, std::abs(f.slope - slope), std::abs(f.b0 - icept)});
    }

    // Each voxel's expected depth equals its ROI level, split between two
    // neighbouring layers.
    Matrix perfect({n, nl}, 0.0);
    for (const auto& [name, idx] : rois) {
        const double pos = levels.at(name) * double(nl - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const double frac = pos - double(lo);
        for (auto i : idx) {
            perfect(i, lo) = 1 - frac;
            if (frac > 0) perfect(i, lo + 1) = frac;
        }
    }
    const auto p = hierarchy_slope(perfect, rois, levels);
    const auto q = hierarchy_slope(Matrix({n, nl}, 1.0 / nl), rois, levels);
    const bool pass = oracle_gap < 1e-10 && std::abs(p.slope - 1) < 1e-6 && std::abs(p.b0) < 1e-6 &&
                      std::abs(p.b1 - 1) < 1e-6 && std::abs(q.slope) < 1e-12 && std::abs(q.b0 - 0.5) < 1e-12 &&
                      std::abs(q.b1 - 0.5) < 1e-12;
    return {pass, "oracle gap " + num(oracle_gap, 3) + " over 50 draws; perfect (" + num(p.slope, 10) + ", " +
                      num(p.b0, 3) + ", " + num(p.b1, 10) + "); uniform (" + num(q.slope, 3) + ", " + num(q.b0, 10) +
                      ", " + num(q.b1, 10) + ")"};
}

Outcome regularizer() {
    const double lambda = 0.1;
    bool zero_after = true;
    for (std::size_t step : {6000u, 6001u, 12000u, 1000000u}) {
        zero_after = zero_after && regularizer_multiplier(step, lambda, 6000) == 0.0;
    }
    const double at0 = regularizer_multiplier(0, lambda, 6000);
    bool exact = true;
    double uniform = 0.0, onehot_reg = 0.0;
    for (std::size_t nl : {2, 3, 4, 5, 6, 12}) {
        Matrix onehot({5, nl}, 0.0);
        for (std::size_t i = 0; i < 5; ++i) onehot(i, i % nl) = 1.0;
        const auto a = entropy_regularizer(onehot, 0, lambda, 6000);
        const auto b = entropy_regularizer(Matrix({5, nl}, 1.0 / double(nl)), 0, lambda, 6000);
        exact = exact && a.loss_reg == 0.0 && b.loss_reg == -1.0;
        onehot_reg = std::max(onehot_reg, std::abs(a.loss_reg));
        uniform = std::max(uniform, std::abs(b.loss_reg + 1.0));
    }
    const bool pass = zero_after && at0 == lambda && exact;
    return {pass, std::string("multiplier ") + (zero_after ? "0" : "nonzero") + " at step >= 6000, " + num(at0) +
                      " at step 0; over L in {2..12}: max |loss_reg| one-hot " + num(onehot_reg) +
                      ", max |loss_reg + 1| uniform " + num(uniform)};
}

SyntheticConfig small_synth(std::uint64_t seed) {
    SyntheticConfig sc;
    sc.voxels = 64;
    sc.layers = 4;
    sc.channels = 8;
    sc.height = sc.width = 6;
    sc.dim = 8;
    sc.images = 1250;
    sc.seed = seed;
    return sc;
}

EncoderConfig small_encoder(std::size_t dim) {
    EncoderConfig ec;
    ec.bottleneck_dim = dim;
    ec.hidden_width = 32;
    ec.pe_frequencies = 6;
    ec.grid_height = ec.grid_width = 6;
    return ec;
}

Outcome ablation() {
    const auto synth = generate_synthetic(small_synth(0));
    TrainConfig tc;
    tc.steps_per_epoch = 100;
    tc.max_epochs = 30;
    tc.patience = 10;
    std::map<Variant, double> mean;
    for (Variant v : {Variant::factortopy, Variant::no_space_sel, Variant::class_token}) {
        EncoderConfig ec = small_encoder(8);
        ec.variant = v;
        for (std::uint64_t seed = 0; seed < 3; ++seed) mean[v] += train_and_score(synth, ec, tc, 0, seed).test_r2 / 3;
    }
    const double f = mean[Variant::factortopy];
    const bool pass = f - mean[Variant::no_space_sel] >= 0.02 && f - mean[Variant::class_token] >= 0.02;
    return {pass, "3-seed test R2: factortopy " + num(f) + ", no_space_sel " + num(mean[Variant::no_space_sel]) +
                      ", class_token " + num(mean[Variant::class_token])};
}

Outcome topology() {
    SyntheticConfig sc;  // 256 voxels, 6 layers, 8×8 grid
    sc.images = 2500;
    sc.seed = 3;
    const auto synth = generate_synthetic(sc);
    TrainConfig tc;
    tc.steps_per_epoch = 100;
    tc.max_epochs = 30;
    tc.patience = 10;
    std::map<Variant, double> conf, r2;
    for (Variant v : {Variant::factortopy, Variant::no_topology}) {
        EncoderConfig ec;
        ec.variant = v;
        ec.bottleneck_dim = 16;
        ec.hidden_width = 64;
        ec.pe_frequencies = 10;
        ec.grid_height = ec.grid_width = 8;
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            const auto s = train_and_score(synth, ec, tc, 500, seed);
            conf[v] += s.confidence / 3;
            r2[v] += s.test_r2 / 3;
        }
    }
    return {conf[Variant::factortopy] > conf[Variant::no_topology],
            "500 train images, 3-seed mean confidence: topology " + num(conf[Variant::factortopy]) +
                ", no_topology " + num(conf[Variant::no_topology]) + " (test R2 " + num(r2[Variant::factortopy]) +
                " vs " + num(r2[Variant::no_topology]) + ")"};
}

Outcome clustering() {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    const std::size_t d = 16, n = 200;
    Matrix w({d, n}, 0.0);
    std::vector<std::size_t> truth(n);
    for (std::size_t j = 0; j < n; ++j) {
        truth[j] = (j * 7919) % 2;
        for (std::size_t k = 0; k < d / 2; ++k) w(truth[j] * d / 2 + k, j) = u(rng);
    }
    double worst = 1.0;
    bool deterministic = true;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto a = cluster_channels(w, 2, 1000, seed);
        const auto b = cluster_channels(w, 2, 1000, seed);
        deterministic = deterministic && a.labels == b.labels;
        worst = std::min(worst, adjusted_rand_index(a.labels, truth));
        if (!oracle::same_partition(a.labels, truth)) worst = std::min(worst, 0.0);
    }
    return {worst == 1.0 && deterministic,
            "min ARI " + num(worst) + " over 5 seeds, " + (deterministic ? "deterministic" : "NOT deterministic")};
}

Outcome scaling() {
    // Low signal-to-noise responses, so that estimation error depends on
    // the sample count.
    SyntheticConfig sc = small_synth(5);
    sc.channels = 16;
    sc.dim = 32;
    sc.noise = 1.0;
    sc.images = 2500;
    const auto synth = generate_synthetic(sc);
    TrainConfig tc;
    tc.steps_per_epoch = 100;
    tc.max_epochs = 60;
    tc.patience = 10;
    const EncoderConfig ec = small_encoder(32);
    std::vector<double> means;
    std::string detail = "3-seed test R2:";
    for (std::size_t m : {250, 500, 1000, 2000}) {
        double r = 0;
        for (std::uint64_t seed = 0; seed < 3; ++seed) r += train_and_score(synth, ec, tc, m, seed).test_r2 / 3;
        means.push_back(r);
        detail += " " + std::to_string(m) + "->" + num(r);
    }
    bool pass = true;
    for (std::size_t k = 1; k < means.size(); ++k) pass = pass && means[k] >= means[k - 1];
    return {pass, detail};
}

template <class F>
std::string rejection(F&& f) {
    try {
        f();
    } catch (const FormatError& e) {
        return e.what();
    }
    return {};
}

Outcome format_round_trip() {
    fixture::TempDir dir("acceptance");
    SyntheticConfig sc;
    sc.voxels = 20;
    sc.layers = 3;
    sc.channels = 4;
    sc.height = sc.width = 5;
    sc.dim = 4;
    sc.images = 30;
    sc.sessions = 2;
    sc.seed = 8;
    const auto synth = generate_synthetic(sc);
    const fs::path root = dir.path / "data";
    write_dataset(synth.dataset, root);
    const Dataset back = load_dataset(root);

    bool bank_same = back.bank.image_ids() == synth.dataset.bank.image_ids() &&
                     back.bank.layers() == synth.dataset.bank.layers();
    for (std::size_t i = 0; i < sc.images && bank_same; ++i) {
        for (std::size_t l = 0; l < sc.layers; ++l) {
            bank_same = bank_same && back.bank.local(i, l) == synth.dataset.bank.local(i, l) &&
                        back.bank.global(i, l) == synth.dataset.bank.global(i, l);
        }
    }
    const auto& va = back.voxels;
    const auto& vb = synth.dataset.voxels;
    const bool voxels_same = va.coords == vb.coords && va.flat == vb.flat && va.rois == vb.rois &&
                             va.responses == vb.responses && va.has_response == vb.has_response;

    fixture::TinySpec spec;
    spec.seed = 4;
    const auto t = fixture::make_tiny(spec);
    const fs::path ckpt = dir.path / "model.ckpt";
    save_checkpoint(t.model, ckpt);
    const EncoderModel m = load_checkpoint(ckpt);
    bool ckpt_same = true;
    const auto pa = t.model.parameters();
    const auto pb = m.parameters();
    for (std::size_t g = 0; g < pa.size(); ++g) ckpt_same = ckpt_same && *pa[g].value == *pb[g].value;
    ckpt_same = ckpt_same && predict(t.model, t.batch, encode_coords(t.model, t.coords)) ==
                                 predict(m, t.batch, encode_coords(m, t.coords));

    // Corruptions, each expected to name the damaged file.
    std::vector<std::pair<fs::path, std::function<void()>>> cases;
    const auto id = synth.dataset.bank.image_ids()[3];
    const fs::path local = root / "features" / id / "1_local.bin";
    const fs::path response = root / "responses" / (id + ".bin");
    const fs::path coords = root / "voxels" / "coords.bin";
    cases.push_back({local, [&] { fs::resize_file(local, fs::file_size(local) - 4); }});
    cases.push_back({response, [&] { fs::resize_file(response, 3); }});
    cases.push_back({coords, [&] { fs::remove(coords); }});
    std::size_t named = 0;
    for (auto& [file, damage] : cases) {
        fs::remove_all(root);
        write_dataset(synth.dataset, root);
        damage();
        const std::string msg = rejection([&] { load_dataset(root); });
        named += msg.find(file.filename().string()) != std::string::npos;
    }
    fs::resize_file(ckpt, fs::file_size(ckpt) - 1);
    named += rejection([&] { load_checkpoint(ckpt); }).find(ckpt.string()) != std::string::npos;

    const bool pass = bank_same && voxels_same && ckpt_same && named == cases.size() + 1;
    return {pass, std::string("bank ") + (bank_same ? "identical" : "DIFFERS") + ", voxel set " +
                      (voxels_same ? "identical" : "DIFFERS") + ", checkpoint " + (ckpt_same ? "identical" : "DIFFERS") +
                      ", " + std::to_string(named) + "/" + std::to_string(cases.size() + 1) +
                      " corruptions rejected naming the file"};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient", gradient_check},       {"forward", forward_oracle},   {"recovery", recovery},
        {"confidence", confidence_metric},  {"hierarchy", hierarchy},      {"regularizer", regularizer},
        {"ablation", ablation},             {"topology", topology},        {"clustering", clustering},
        {"scaling", scaling},               {"format", format_round_trip},
    };
    std::set<std::string> only(argv + 1, argv + argc);
    std::size_t failed = 0, ran = 0;
    std::ofstream report("acceptance_report.txt", std::ios::trunc);
    for (const auto& [name, run] : criteria) {
        if (!only.empty() && !only.count(name)) continue;
        ++ran;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        char line[1024];
        std::snprintf(line, sizeof line, "%s %-12s %s [%.1f s]", o.pass ? "PASS" : "FAIL", name.c_str(),
                      o.detail.c_str(), seconds_since(t0));
        std::cout << line << std::endl;
        report << line << std::endl;
    }
    if (ran == 0) {
        std::fprintf(stderr, "no criterion matched\n");
        return 2;
    }
    return failed == 0 ? 0 : 1;
}
