// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "factortopy/encoder.hpp"
#include "factortopy/training.hpp"

namespace fixture {

using namespace factortopy;

inline DenseArray random_array(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
    DenseArray a(std::move(shape));
    std::normal_distribution<double> g(0.0, scale);
    for (auto& v : a.values()) v = static_cast<float>(g(rng));
    return a;
}

inline Matrix random_coords(std::size_t n, std::mt19937_64& rng) {
    Matrix c({n, 3});
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& v : c.values()) v = u(rng);
    return c;
}

struct Tiny {
    EncoderModel model;
    std::vector<ImageFeatures> images;
    std::vector<const ImageFeatures*> batch;
    Matrix coords;
    Matrix targets;
};

struct TinySpec {
    Variant variant = Variant::factortopy;
    std::size_t voxels = 6, layers = 3, dim = 8, channels = 5, height = 4, width = 4;
    std::size_t batch = 2, hidden_width = 16, hidden_layers = 2, pe = 3;
    std::uint64_t seed = 0;
    bool randomize = true;
};

inline Tiny make_tiny(const TinySpec& s) {
    std::mt19937_64 rng(s.seed * 7919 + 17);
    std::vector<LayerSpec> layers;
    for (std::size_t l = 0; l < s.layers; ++l) {
        layers.push_back({"layer" + std::to_string(l), s.channels + l, s.height, s.width});
    }
    EncoderConfig ec;
    ec.variant = s.variant;
    ec.bottleneck_dim = s.dim;
    ec.hidden_width = s.hidden_width;
    ec.hidden_layers = s.hidden_layers;
    ec.pe_frequencies = s.pe;
    ec.grid_height = s.height;
    ec.grid_width = s.width;
    Tiny t;
    t.model = init_model(ec, s.voxels, layers, s.seed);
    if (s.randomize) randomize_parameters(t.model, s.seed + 1);
    for (std::size_t b = 0; b < s.batch; ++b) {
        ImageFeatures f;
        f.id = "img" + std::to_string(b);
        for (const auto& ls : layers) {
            f.local.push_back(random_array({ls.channels, ls.height, ls.width}, rng));
            f.global.push_back(random_array({ls.channels}, rng));
        }
        t.images.push_back(std::move(f));
    }
    for (const auto& f : t.images) t.batch.push_back(&f);
    t.coords = random_coords(s.voxels, rng);
    t.targets = Matrix({s.batch, s.voxels});
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& v : t.targets.values()) v = g(rng);
    return t;
}

/// Scratch directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() /
               ("factortopy-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

}  // namespace fixture
