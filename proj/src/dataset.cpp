// SPDX-License-Identifier: Apache-2.0
#include "factortopy/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include <json.hpp>

#include "factortopy/error.hpp"

namespace factortopy {

static_assert(std::endian::native == std::endian::little,
              "blob I/O assumes a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path local_blob(const fs::path& root, const std::string& image, std::size_t layer) {
    return root / "features" / image / (std::to_string(layer) + "_local.bin");
}

fs::path global_blob(const fs::path& root, const std::string& image, std::size_t layer) {
    return root / "features" / image / (std::to_string(layer) + "_global.bin");
}

json read_json(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw FormatError("cannot open " + file.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("malformed JSON in " + file.string() + ": " + e.what());
    }
}

void write_json(const json& doc, const fs::path& file) {
    fs::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out) throw FormatError("cannot write " + file.string());
    out << doc.dump(2) << '\n';
}

void check_image_id(const std::string& id) {
    if (id.empty() || id.find('/') != std::string::npos || id == "." || id == "..") {
        throw FormatError("image id '" + id + "' is not a valid file name");
    }
}

DenseArray spatial_mean(const DenseArray& grid) {
    const std::size_t c = grid.dim(0), plane = grid.dim(1) * grid.dim(2);
    DenseArray out({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += grid[ch * plane + i];
        out[ch] = static_cast<float>(s / static_cast<double>(plane));
    }
    return out;
}

}  // namespace

std::vector<float> read_f32_blob(const fs::path& file, std::size_t expected_count) {
    std::error_code ec;
    const auto bytes = fs::file_size(file, ec);
    if (ec) throw FormatError("missing blob " + file.string());
    if (bytes != expected_count * sizeof(float)) {
        throw FormatError("blob " + file.string() + " has " + std::to_string(bytes) +
                          " bytes, expected " + std::to_string(expected_count * sizeof(float)));
    }
    std::vector<float> values(expected_count);
    std::ifstream in(file, std::ios::binary);
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(bytes))) {
        throw FormatError("short read on blob " + file.string());
    }
    return values;
}

void write_f32_blob(const fs::path& file, std::span<const float> values) {
    fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + file.string());
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
}

FeatureBank::FeatureBank(std::vector<std::string> image_ids, std::vector<LayerSpec> layers,
                         std::vector<DenseArray> locals, std::vector<DenseArray> globals)
    : image_ids_(std::move(image_ids)),
      layers_(std::move(layers)),
      has_global_(!globals.empty()),
      locals_(std::move(locals)),
      globals_(std::move(globals)) {
    if (layers_.empty()) throw InvalidArgument("feature bank needs at least one layer");
    const std::size_t expected = image_ids_.size() * layers_.size();
    if (locals_.size() != expected || (has_global_ && globals_.size() != expected)) {
        throw InvalidArgument("feature bank blob count does not match images × layers");
    }
    for (std::size_t i = 0; i < image_ids_.size(); ++i) {
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& spec = layers_[l];
            const auto& grid = locals_[i * layers_.size() + l];
            if (grid.shape() != std::vector<std::size_t>{spec.channels, spec.height, spec.width}) {
                throw InvalidArgument("local grid for image '" + image_ids_[i] + "' layer " +
                                      std::to_string(l) + " has shape " +
                                      shape_string(grid.shape()));
            }
            if (has_global_ && globals_[i * layers_.size() + l].size() != spec.channels) {
                throw InvalidArgument("global token for image '" + image_ids_[i] + "' layer " +
                                      std::to_string(l) + " has wrong length");
            }
        }
    }
    build_index();
}

void FeatureBank::build_index() {
    index_.clear();
    for (std::size_t i = 0; i < image_ids_.size(); ++i) {
        if (!index_.emplace(image_ids_[i], i).second) {
            throw FormatError("duplicate image id '" + image_ids_[i] + "'");
        }
    }
}

std::size_t FeatureBank::image_index(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw InvalidArgument("image '" + id + "' is not in the bank");
    return it->second;
}

DenseArray FeatureBank::local(std::size_t image, std::size_t layer) const {
    if (image >= image_ids_.size() || layer >= layers_.size()) {
        throw InvalidArgument("feature bank index out of range");
    }
    if (resident()) return locals_[image * layers_.size() + layer];
    const auto& spec = layers_[layer];
    const auto file = local_blob(root_, image_ids_[image], layer);
    return DenseArray({spec.channels, spec.height, spec.width},
                      read_f32_blob(file, spec.channels * spec.height * spec.width));
}

DenseArray FeatureBank::global(std::size_t image, std::size_t layer) const {
    if (image >= image_ids_.size() || layer >= layers_.size()) {
        throw InvalidArgument("feature bank index out of range");
    }
    if (!has_global_) return spatial_mean(local(image, layer));
    if (resident()) return globals_[image * layers_.size() + layer];
    const auto& spec = layers_[layer];
    return DenseArray({spec.channels},
                      read_f32_blob(global_blob(root_, image_ids_[image], layer), spec.channels));
}

FeatureBank FeatureBank::materialize() const {
    if (resident()) return *this;
    std::vector<DenseArray> locals, globals;
    locals.reserve(image_count() * layer_count());
    for (std::size_t i = 0; i < image_count(); ++i) {
        for (std::size_t l = 0; l < layer_count(); ++l) {
            locals.push_back(local(i, l));
            if (has_global_) globals.push_back(global(i, l));
        }
    }
    return FeatureBank(image_ids_, layers_, std::move(locals), std::move(globals));
}

FeatureBank load_feature_bank(const fs::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) throw FormatError("missing manifest " + manifest_path.string());
    const json manifest = read_json(manifest_path);

    FeatureBank bank;
    try {
        if (manifest.at("version").get<int>() != 1) {
            throw FormatError("unsupported bank version in " + manifest_path.string());
        }
        if (manifest.at("dtype").get<std::string>() != "f32le") {
            throw FormatError("unsupported dtype '" + manifest.at("dtype").get<std::string>() +
                              "' in " + manifest_path.string());
        }
        bank.image_ids_ = manifest.at("images").get<std::vector<std::string>>();
        for (const auto& layer : manifest.at("layers")) {
            bank.layers_.push_back({layer.at("name").get<std::string>(),
                                    layer.at("channels").get<std::size_t>(),
                                    layer.at("height").get<std::size_t>(),
                                    layer.at("width").get<std::size_t>()});
        }
        bank.has_global_ = manifest.at("has_global").get<bool>();
    } catch (const json::exception& e) {
        throw FormatError("manifest " + manifest_path.string() + " violates the schema: " +
                          e.what());
    }
    if (bank.layers_.empty()) throw FormatError("manifest " + manifest_path.string() +
                                                " declares no layers");
    for (std::size_t l = 0; l < bank.layers_.size(); ++l) {
        const auto& s = bank.layers_[l];
        if (s.channels == 0 || s.height == 0 || s.width == 0) {
            throw FormatError("layer " + std::to_string(l) + " in " + manifest_path.string() +
                              " has a zero extent");
        }
    }
    for (const auto& id : bank.image_ids_) check_image_id(id);
    bank.root_ = dir;
    bank.build_index();

    // Validate every blob up front so later lazy reads cannot surprise.
    for (const auto& id : bank.image_ids_) {
        for (std::size_t l = 0; l < bank.layers_.size(); ++l) {
            const auto& s = bank.layers_[l];
            std::vector<std::pair<fs::path, std::size_t>> blobs{
                {local_blob(dir, id, l), s.channels * s.height * s.width}};
            if (bank.has_global_) blobs.emplace_back(global_blob(dir, id, l), s.channels);
            for (const auto& [file, count] : blobs) {
                std::error_code ec;
                const auto bytes = fs::file_size(file, ec);
                if (ec) throw FormatError("missing blob " + file.string());
                if (bytes != count * sizeof(float)) {
                    throw FormatError("blob " + file.string() + " has " + std::to_string(bytes) +
                                      " bytes, expected " + std::to_string(count * sizeof(float)));
                }
            }
        }
    }
    return bank;
}

void write_feature_bank(const FeatureBank& bank, const fs::path& dir) {
    json manifest;
    manifest["version"] = 1;
    manifest["dtype"] = "f32le";
    manifest["images"] = bank.image_ids();
    manifest["layers"] = json::array();
    for (const auto& s : bank.layers()) {
        manifest["layers"].push_back(
            {{"name", s.name}, {"channels", s.channels}, {"height", s.height}, {"width", s.width}});
    }
    manifest["has_global"] = bank.has_native_global();
    write_json(manifest, dir / "manifest.json");
    for (std::size_t i = 0; i < bank.image_count(); ++i) {
        const auto& id = bank.image_ids()[i];
        check_image_id(id);
        for (std::size_t l = 0; l < bank.layer_count(); ++l) {
            write_f32_blob(local_blob(dir, id, l), bank.local(i, l).span());
            if (bank.has_native_global()) {
                write_f32_blob(global_blob(dir, id, l), bank.global(i, l).span());
            }
        }
    }
}

DenseArray adaptive_avg_pool(const DenseArray& grid, std::size_t height, std::size_t width) {
    const std::size_t c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
    if (height == 0 || width == 0) throw InvalidArgument("adaptive_avg_pool: zero target");
    if (h == height && w == width) return grid;
    DenseArray out({c, height, width});
    for (std::size_t oy = 0; oy < height; ++oy) {
        const std::size_t y0 = oy * h / height;
        const std::size_t y1 = ((oy + 1) * h + height - 1) / height;
        for (std::size_t ox = 0; ox < width; ++ox) {
            const std::size_t x0 = ox * w / width;
            const std::size_t x1 = ((ox + 1) * w + width - 1) / width;
            const double area = static_cast<double>((y1 - y0) * (x1 - x0));
            for (std::size_t ch = 0; ch < c; ++ch) {
                double s = 0.0;
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t x = x0; x < x1; ++x) s += grid(ch, y, x);
                out(ch, oy, ox) = static_cast<float>(s / area);
            }
        }
    }
    return out;
}

FeatureBank downsample_local_tokens(const FeatureBank& bank, std::size_t height,
                                    std::size_t width) {
    std::vector<LayerSpec> layers = bank.layers();
    for (auto& s : layers) {
        s.height = std::min(s.height, height);
        s.width = std::min(s.width, width);
    }
    std::vector<DenseArray> locals, globals;
    locals.reserve(bank.image_count() * bank.layer_count());
    globals.reserve(bank.image_count() * bank.layer_count());
    for (std::size_t i = 0; i < bank.image_count(); ++i) {
        for (std::size_t l = 0; l < bank.layer_count(); ++l) {
            DenseArray grid = bank.local(i, l);
            // Global tokens are taken before pooling so mean-pooled ones stay exact.
            globals.push_back(bank.has_native_global() ? bank.global(i, l) : spatial_mean(grid));
            locals.push_back(adaptive_avg_pool(grid, layers[l].height, layers[l].width));
        }
    }
    return FeatureBank(bank.image_ids(), std::move(layers), std::move(locals), std::move(globals));
}

void VoxelSet::validate() const {
    if (coords.rank() != 2 || coords.dim(1) != 3) {
        throw FormatError("voxel coords must be N×3, got " + shape_string(coords.shape()));
    }
    const std::size_t n = coords.dim(0);
    if (!coords.all_finite()) throw FormatError("voxel coords contain non-finite values");
    if (flat && (flat->rank() != 2 || flat->dim(0) != n || flat->dim(1) != 2)) {
        throw FormatError("flat coords must be N×2");
    }
    for (const auto& [name, idx] : rois) {
        for (std::size_t i : idx) {
            if (i >= n) {
                throw FormatError("ROI '" + name + "' index " + std::to_string(i) +
                                  " out of range for " + std::to_string(n) + " voxels");
            }
        }
    }
    if (responses.rank() != 2 || responses.dim(1) != n ||
        has_response.size() != responses.dim(0)) {
        throw FormatError("responses must be M×N with one presence flag per image");
    }
}

VoxelSet load_voxel_set(const fs::path& dir, const FeatureBank& bank) {
    VoxelSet v;
    const auto coords_file = dir / "voxels" / "coords.bin";
    std::error_code ec;
    const auto bytes = fs::file_size(coords_file, ec);
    if (ec) throw FormatError("missing voxel coordinates " + coords_file.string());
    if (bytes == 0 || bytes % (3 * sizeof(float)) != 0) {
        throw FormatError("voxel coordinates " + coords_file.string() +
                          " length is not a multiple of 12 bytes");
    }
    const std::size_t n = bytes / (3 * sizeof(float));
    v.coords = DenseArray({n, 3}, read_f32_blob(coords_file, n * 3));
    const auto flat_file = dir / "voxels" / "flat.bin";
    if (fs::exists(flat_file)) v.flat = DenseArray({n, 2}, read_f32_blob(flat_file, n * 2));
    const auto rois_file = dir / "voxels" / "rois.json";
    if (fs::exists(rois_file)) {
        try {
            v.rois = read_json(rois_file).get<std::map<std::string, std::vector<std::size_t>>>();
        } catch (const json::exception& e) {
            throw FormatError("ROI map " + rois_file.string() + " violates the schema: " +
                              e.what());
        }
        for (const auto& [name, idx] : v.rois) {
            for (std::size_t i : idx) {
                if (i >= n) {
                    throw FormatError("ROI map " + rois_file.string() + ": '" + name + "' index " +
                                      std::to_string(i) + " out of range for " +
                                      std::to_string(n) + " voxels");
                }
            }
        }
    }
    const std::size_t m = bank.image_count();
    v.responses = DenseArray({m, n});
    v.has_response.assign(m, false);
    for (std::size_t i = 0; i < m; ++i) {
        const auto file = dir / "responses" / (bank.image_ids()[i] + ".bin");
        if (!fs::exists(file)) continue;
        const auto values = read_f32_blob(file, n);
        std::copy(values.begin(), values.end(), v.responses.data() + i * n);
        v.has_response[i] = true;
    }
    v.validate();
    return v;
}

void write_voxel_set(const VoxelSet& voxels, const FeatureBank& bank, const fs::path& dir) {
    voxels.validate();
    write_f32_blob(dir / "voxels" / "coords.bin", voxels.coords.span());
    if (voxels.flat) write_f32_blob(dir / "voxels" / "flat.bin", voxels.flat->span());
    json rois = json::object();
    for (const auto& [name, idx] : voxels.rois) rois[name] = idx;
    write_json(rois, dir / "voxels" / "rois.json");
    const std::size_t n = voxels.size();
    for (std::size_t i = 0; i < bank.image_count(); ++i) {
        if (!voxels.has_response[i]) continue;
        write_f32_blob(dir / "responses" / (bank.image_ids()[i] + ".bin"),
                       std::span<const float>(voxels.responses.data() + i * n, n));
    }
}

SplitSpec load_splits(const fs::path& file) {
    const json doc = read_json(file);
    try {
        return {doc.at("train").get<std::vector<std::string>>(),
                doc.at("val").get<std::vector<std::string>>(),
                doc.at("test").get<std::vector<std::string>>()};
    } catch (const json::exception& e) {
        throw FormatError("splits file " + file.string() + " violates the schema: " + e.what());
    }
}

void write_splits(const SplitSpec& splits, const fs::path& file) {
    write_json({{"train", splits.train}, {"val", splits.val}, {"test", splits.test}}, file);
}

void validate_splits(const SplitSpec& splits, const FeatureBank& bank, const VoxelSet& voxels) {
    std::set<std::string> seen;
    for (const auto* part : {&splits.train, &splits.val, &splits.test}) {
        for (const auto& id : *part) {
            if (!seen.insert(id).second) {
                throw FormatError("image '" + id + "' appears in more than one split");
            }
            if (!bank.has_image(id)) {
                throw FormatError("split image '" + id + "' is not in the feature bank");
            }
            if (!voxels.has_response[bank.image_index(id)]) {
                throw FormatError("split image '" + id + "' has no response vector");
            }
        }
    }
}

Dataset load_dataset(const fs::path& dir) {
    Dataset ds;
    ds.bank = load_feature_bank(dir);
    ds.voxels = load_voxel_set(dir, ds.bank);
    if (fs::exists(dir / "splits.json")) {
        ds.splits = load_splits(dir / "splits.json");
        validate_splits(*ds.splits, ds.bank, ds.voxels);
    }
    if (fs::exists(dir / "sessions.json")) {
        try {
            ds.sessions = read_json(dir / "sessions.json").get<std::map<std::string, std::string>>();
        } catch (const json::exception& e) {
            throw FormatError("sessions.json violates the schema: " + std::string(e.what()));
        }
    }
    return ds;
}

void write_dataset(const Dataset& dataset, const fs::path& dir) {
    write_feature_bank(dataset.bank, dir);
    write_voxel_set(dataset.voxels, dataset.bank, dir);
    if (dataset.splits) write_splits(*dataset.splits, dir / "splits.json");
    if (!dataset.sessions.empty()) write_json(json(dataset.sessions), dir / "sessions.json");
}

Matrix normalize_coords(const DenseArray& coords) {
    const std::size_t n = coords.dim(0);
    Matrix out({n, 3});
    for (std::size_t axis = 0; axis < 3; ++axis) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (std::size_t i = 0; i < n; ++i) {
            lo = std::min(lo, static_cast<double>(coords(i, axis)));
            hi = std::max(hi, static_cast<double>(coords(i, axis)));
        }
        const double span = hi - lo;
        for (std::size_t i = 0; i < n; ++i) {
            out(i, axis) = span > 0 ? 2.0 * (coords(i, axis) - lo) / span - 1.0 : 0.0;
        }
    }
    return out;
}

ZScoreResult session_zscore(const VoxelSet& voxels, const FeatureBank& bank,
                            const std::map<std::string, std::string>& sessions) {
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < bank.image_count(); ++i) {
        if (!voxels.has_response[i]) continue;
        auto it = sessions.find(bank.image_ids()[i]);
        if (it == sessions.end()) {
            throw InvalidArgument("image '" + bank.image_ids()[i] + "' has no session");
        }
        members[it->second].push_back(i);
    }
    for (const auto& [session, rows] : members) {
        if (rows.size() < 2) {
            throw InvalidArgument("session '" + session + "' has fewer than two images");
        }
    }
    ZScoreResult result{voxels, 0};
    const std::size_t n = voxels.size();
    auto& r = result.voxels.responses;
    for (const auto& [session, rows] : members) {
        const double count = static_cast<double>(rows.size());
        for (std::size_t v = 0; v < n; ++v) {
            double mean = 0.0;
            for (std::size_t row : rows) mean += r(row, v);
            mean /= count;
            double var = 0.0;
            for (std::size_t row : rows) var += (r(row, v) - mean) * (r(row, v) - mean);
            var /= count;
            if (var < 1e-6) {
                var = 1e-6;
                ++result.floored;
            }
            const double sd = std::sqrt(var);
            for (std::size_t row : rows) {
                r(row, v) = static_cast<float>((voxels.responses(row, v) - mean) / sd);
            }
        }
    }
    return result;
}

SplitSpec make_splits(const std::vector<std::vector<std::string>>& groups,
                      std::array<std::size_t, 3> ratios, std::uint64_t seed) {
    const std::size_t g = groups.size();
    if (g < 3) throw InvalidArgument("make_splits needs at least three groups");
    const std::size_t total = ratios[0] + ratios[1] + ratios[2];
    if (total == 0) throw InvalidArgument("make_splits ratios sum to zero");
    std::set<std::string> seen;
    for (const auto& group : groups) {
        if (group.empty()) throw InvalidArgument("make_splits: empty repeat group");
        for (const auto& id : group) {
            if (!seen.insert(id).second) {
                throw InvalidArgument("make_splits: image '" + id + "' in more than one group");
            }
        }
    }
    std::vector<std::size_t> order(g);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    auto share = [&](std::size_t ratio) {
        const auto n = static_cast<std::size_t>(
            std::llround(static_cast<double>(g * ratio) / static_cast<double>(total)));
        return ratio == 0 ? std::size_t{0} : std::max<std::size_t>(n, 1);
    };
    const std::size_t n_val = share(ratios[1]);
    const std::size_t n_test = share(ratios[2]);
    if (n_val + n_test >= g) throw InvalidArgument("make_splits: too few groups for the ratios");

    SplitSpec out;
    for (std::size_t k = 0; k < g; ++k) {
        const auto& group = groups[order[k]];
        auto& dst = k < n_test ? out.test : (k < n_test + n_val ? out.val : out.train);
        dst.insert(dst.end(), group.begin(), group.end());
    }
    return out;
}

}  // namespace factortopy
